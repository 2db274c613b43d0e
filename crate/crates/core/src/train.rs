//! Warm-start training: GENE on the GIB loss, LAMO pretraining, then joint
//! training of the whole model.

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::lamo::{lamo_loss_tape, topics_tape, LamoParams};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{instance_rng, LossParts, Model, Prediction, Prepared, Stage};
use crate::nn::{Adam, AdamConfig, GradBuffer, ParamId, ParamStore, Session};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    stages: Vec<(Stage, usize)>,
}

impl Schedule {
    /// Stages must appear in warm-start order, each at most once.
    pub fn new(stages: Vec<(Stage, usize)>) -> Result<Self> {
        for w in stages.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::Config(format!(
                    "stage {} cannot run after {}",
                    w[1].0.name(),
                    w[0].0.name()
                )));
            }
        }
        Ok(Schedule { stages })
    }

    pub fn from_config(c: &crate::Config) -> Self {
        Schedule {
            stages: vec![
                (Stage::GeneWarmup, c.epochs_gene),
                (Stage::LamoPretrain, c.epochs_lamo),
                (Stage::Joint, c.epochs_joint),
            ],
        }
    }

    pub fn stages(&self) -> &[(Stage, usize)] {
        &self.stages
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }
}

/// One record per epoch, plus an initial record before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Cumulative epoch count; 0 is the untrained model.
    pub step: usize,
    pub stage: Stage,
    pub epoch: usize,
    /// Mean training losses over the epoch (zero for the initial record).
    pub train: LossParts,
    /// Mean KL of the bottleneck on the dev split.
    pub mi_proxy: f64,
    pub node_keep: f64,
    pub edge_keep: f64,
    pub dev_accuracy: f64,
    pub dev_f1: f64,
}

/// Dev-split summary of a deterministic pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub metrics: MetricsReport,
    /// Metrics of the bottleneck classifier `q(Y|z)`.
    pub z_metrics: MetricsReport,
    pub mi_proxy: f64,
    pub node_keep: f64,
    pub edge_keep: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn excluded_label(model: &Model) -> Option<usize> {
    if model.config.include_none {
        None
    } else {
        model.relations.none_index()
    }
}

pub fn predict_all(model: &Model, data: &[Prepared]) -> Result<Vec<Prediction>> {
    data.par_iter().map(|p| model.predict(p)).collect()
}

pub fn evaluate(model: &Model, data: &[Prepared]) -> Result<Evaluation> {
    let predictions = predict_all(model, data)?;
    let classes = model.relations.len();
    let gold: Vec<usize> = predictions.iter().map(|p| p.gold).collect();
    let pred: Vec<usize> = predictions.iter().map(|p| p.predicted).collect();
    let zpred: Vec<usize> = predictions.iter().map(|p| crate::lamo::argmax(&p.z_probs)).collect();
    let excluded = excluded_label(model);
    let metrics = compute_metrics(&pred, &gold, classes, excluded)?;
    let z_metrics = compute_metrics(&zpred, &gold, classes, excluded)?;
    let node_keep = mean(predictions.iter().map(|p| mean(p.pi_v.iter().copied())));
    let edge_keep = mean(
        predictions
            .iter()
            .filter(|p| !p.pi_e.is_empty())
            .map(|p| mean(p.pi_e.iter().copied())),
    );
    let mi_proxy = mean(predictions.iter().map(|p| p.losses.kl));
    Ok(Evaluation {
        predictions,
        metrics,
        z_metrics,
        mi_proxy,
        node_keep,
        edge_keep,
    })
}

fn log_record(model: &Model, dev: &[Prepared], step: usize, stage: Stage, epoch: usize, train: LossParts) -> Result<EpochLog> {
    let ev = evaluate(model, dev)?;
    let m = if stage == Stage::Joint { &ev.metrics } else { &ev.z_metrics };
    Ok(EpochLog {
        step,
        stage,
        epoch,
        train,
        mi_proxy: ev.mi_proxy,
        node_keep: ev.node_keep,
        edge_keep: ev.edge_keep,
        dev_accuracy: m.accuracy,
        dev_f1: m.f1,
    })
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Mean gradient over a batch, restricted to `trainable`.
fn batch_gradients(
    model: &Model,
    data: &[Prepared],
    batch: &[usize],
    stage: Stage,
    epoch: usize,
    trainable: &BTreeSet<ParamId>,
) -> Result<(LossParts, GradBuffer)> {
    let seed = model.config.seed;
    let per: Vec<(LossParts, GradBuffer)> = batch
        .par_iter()
        .map(|&i| {
            let mut rng = instance_rng(seed, stage, epoch, i);
            model.instance_gradients(&data[i], stage, Some(&mut rng))
        })
        .collect::<Result<_>>()?;
    let mut parts = LossParts::default();
    let mut grads = GradBuffer::default();
    for (l, g) in &per {
        parts.add(l);
        grads.merge(g);
    }
    let c = 1.0 / batch.len() as f64;
    parts.scale(c);
    grads.scale(c);
    grads.retain(|id| trainable.contains(&id));
    Ok((parts, grads))
}

fn non_finite_grad() -> Error {
    Error::NonFinite {
        component: "gradient".into(),
        value: f64::NAN,
    }
}

/// Runs the schedule, appending to `logs` as it goes. On a non-finite loss
/// or gradient the offending update is dropped, `model` keeps the last good
/// parameters and the error is returned.
pub fn run_schedule(
    model: &mut Model,
    train: &[Prepared],
    dev: &[Prepared],
    schedule: &Schedule,
    logs: &mut Vec<EpochLog>,
) -> Result<()> {
    if schedule.total_epochs() == 0 {
        return Ok(());
    }
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let threads = model.config.threads;
    if threads > 0 {
        pool(threads)?.install(|| run_inner(model, train, dev, schedule, logs))
    } else {
        run_inner(model, train, dev, schedule, logs)
    }
}

fn run_inner(
    model: &mut Model,
    train: &[Prepared],
    dev: &[Prepared],
    schedule: &Schedule,
    logs: &mut Vec<EpochLog>,
) -> Result<()> {
    let first = schedule.stages().iter().find(|s| s.1 > 0).expect("nonzero schedule").0;
    logs.push(log_record(model, dev, 0, first, 0, LossParts::default())?);
    let mut step = 0;
    let bs = model.config.batch_size;
    for &(stage, epochs) in schedule.stages() {
        if epochs == 0 {
            continue;
        }
        let trainable: BTreeSet<ParamId> = model.trainable(stage).into_iter().collect();
        let mut adam = Adam::new(model.config.adam());
        for epoch in 1..=epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ ((stage as u64) << 48) ^ (epoch as u64));
            order.shuffle(&mut rng);
            let mut total = LossParts::default();
            for batch in order.chunks(bs) {
                let (parts, grads) = batch_gradients(model, train, batch, stage, epoch, &trainable)?;
                parts.check()?;
                if !grads.all_finite() {
                    return Err(non_finite_grad());
                }
                let backup = model.store.clone();
                adam.step(&mut model.store, &grads);
                if !model.store.all_finite() {
                    model.store = backup;
                    return Err(Error::NonFinite {
                        component: "parameters".into(),
                        value: f64::NAN,
                    });
                }
                let mut p = parts;
                p.scale(batch.len() as f64);
                total.add(&p);
            }
            total.scale(1.0 / train.len() as f64);
            step += 1;
            let rec = log_record(model, dev, step, stage, epoch, total)?;
            log::info!(
                "{} epoch {epoch}: loss {:.4} dev f1 {:.4} keep {:.3}/{:.3}",
                stage.name(),
                total.total,
                rec.dev_f1,
                rec.node_keep,
                rec.edge_keep
            );
            logs.push(rec);
        }
    }
    Ok(())
}

/// Settings for fitting the topic model alone on bag-of-words documents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopicFit {
    pub topics: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TopicFit {
    fn default() -> Self {
        TopicFit {
            topics: 3,
            epochs: 30,
            batch_size: 32,
            lr: 0.02,
            seed: 5,
        }
    }
}

/// Fitted topic model; rows of `chi`, `psi` are unnormalised logits.
#[derive(Clone, Debug)]
pub struct FittedTopics {
    pub store: ParamStore,
    pub params: LamoParams,
    pub losses: Vec<f64>,
}

impl FittedTopics {
    /// `Softmax` of each topic-word row.
    pub fn word_distributions(&self) -> (Mat, Mat) {
        let f = |m: &Mat| {
            let mut out = m.clone();
            for mut r in out.rows_mut() {
                let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                r.mapv_inplace(|x| (x - mx).exp());
                let z = r.sum();
                r.mapv_inplace(|x| x / z);
            }
            out
        };
        (f(self.store.get(self.params.chi)), f(self.store.get(self.params.psi)))
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        v.to_vec()
    }
}

/// Fits LAMO with the normalised concatenated counts of each document as
/// encoder input.
pub fn fit_topics(text: &[Vec<f64>], visual: &[Vec<f64>], fit: &TopicFit) -> Result<FittedTopics> {
    if text.len() != visual.len() || text.is_empty() {
        return Err(Error::Contract("topic fit needs aligned, nonempty documents".into()));
    }
    let ut = text[0].len();
    let ui = visual[0].len();
    let inputs: Vec<Mat> = text
        .iter()
        .zip(visual)
        .map(|(t, v)| {
            let row: Vec<f64> = normalized(t).into_iter().chain(normalized(v)).collect();
            Array2::from_shape_vec((1, ut + ui), row).expect("row shape")
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let mut store = ParamStore::new();
    let params = LamoParams::register(&mut store, &mut rng, ut + ui, fit.topics, ut, ui);
    let mut adam = Adam::new(AdamConfig {
        lr_pretrained: fit.lr,
        lr_other: fit.lr,
        ..AdamConfig::default()
    });
    let mut losses = Vec::new();
    for epoch in 0..fit.epochs {
        let mut order: Vec<usize> = (0..text.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(fit.batch_size.max(1)) {
            let per: Vec<(f64, GradBuffer)> = batch
                .par_iter()
                .map(|&i| {
                    let mut r = instance_rng(fit.seed, Stage::LamoPretrain, epoch, i);
                    let eps = Array2::from_shape_fn((1, fit.topics), |_| StandardNormal.sample(&mut r));
                    let sess = Session::new(&store);
                    let vars = params.bind(&sess);
                    let h = sess.tape.leaf(inputs[i].clone());
                    let topics = topics_tape(&sess.tape, h, &eps, &vars);
                    let (loss, ..) = lamo_loss_tape(&sess.tape, &topics, &text[i], &visual[i], &vars);
                    let g = sess.tape.backward(loss);
                    (sess.tape.scalar(loss), sess.param_grads(&g))
                })
                .collect();
            let mut grads = GradBuffer::default();
            for (l, g) in &per {
                total += l;
                grads.merge(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(non_finite_grad());
            }
            adam.step(&mut store, &grads);
        }
        losses.push(total / text.len() as f64);
    }
    Ok(FittedTopics { store, params, losses })
}

/// Total-variation distance between two distributions.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Mean TV distance under the best one-to-one matching of learned rows to
/// reference rows (exhaustive over permutations).
pub fn aligned_tv(learned: &Mat, reference: &Mat) -> (f64, Vec<usize>) {
    let k = reference.nrows();
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..learned.nrows())
                .map(|j| {
                    total_variation(
                        reference.row(i).as_slice().expect("contiguous"),
                        learned.row(j).as_slice().expect("contiguous"),
                    )
                })
                .collect()
        })
        .collect();
    let mut best = (f64::INFINITY, vec![]);
    let mut perm: Vec<usize> = (0..learned.nrows()).collect();
    permute(&mut perm, 0, k, &mut |p| {
        let c: f64 = (0..k).map(|i| cost[i][p[i]]).sum::<f64>() / k as f64;
        if c < best.0 {
            best = (c, p[..k].to_vec());
        }
    });
    best
}

fn permute(p: &mut Vec<usize>, i: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    if i == k {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, k, f);
        p.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_order_is_enforced() {
        let bad = Schedule::new(vec![(Stage::LamoPretrain, 1), (Stage::GeneWarmup, 1)]);
        assert!(matches!(bad, Err(Error::Config(_))));
        let dup = Schedule::new(vec![(Stage::Joint, 1), (Stage::Joint, 1)]);
        assert!(dup.is_err());
        assert!(Schedule::new(vec![(Stage::GeneWarmup, 1), (Stage::Joint, 2)]).is_ok());
    }

    #[test]
    fn tv_alignment_finds_permutation() {
        let r = ndarray::array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let l = ndarray::array![[0.0, 0.0, 1.0], [0.9, 0.1, 0.0], [0.0, 1.0, 0.0]];
        let (tv, perm) = aligned_tv(&l, &r);
        assert_eq!(perm, vec![1, 2, 0]);
        assert!((tv - 0.1 / 3.0).abs() < 1e-12);
    }
}
