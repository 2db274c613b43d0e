//! Post-training analyses: task entropy per feature stage, training
//! trajectories, text-image relevance buckets and pruned-graph dumps.

use crate::autograd::Mat;
use crate::cmg::{cosine, CrossModalGraph};
use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::gene::{hard_prune, PrunedGraph};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{Model, Prediction, Prepared};
use crate::sg::{embed_textual_nodes, visual_region_features, EmbeddingProvider, NodeKind, SceneGraph};
use crate::train::EpochLog;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

/// Mean over all pairs of `max(0, cos)`; `None` when either side is empty.
/// A zero vector has similarity 0 to everything.
pub fn relevance_from_embeddings(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += cosine(x, y).map_or(0.0, |c| c.max(0.0));
        }
    }
    Some((sum / (a.len() * b.len()) as f64).clamp(0.0, 1.0))
}

fn scored_rows(graph: &SceneGraph, rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    graph
        .nodes
        .iter()
        .zip(rows)
        .filter(|(n, _)| matches!(n.kind, NodeKind::Object | NodeKind::Attribute))
        .map(|(_, r)| r)
        .collect()
}

/// Relevance `Ψ` between an instance's visual and textual scene graphs,
/// over object and attribute nodes.
pub fn relevance(inst: &Instance, provider: &dyn EmbeddingProvider) -> Result<Option<f64>> {
    let visual = scored_rows(&inst.vsg, visual_region_features(&inst.vsg, &inst.image, provider)?);
    let text = embed_textual_nodes(&inst.tsg, &inst.tokens, provider)?;
    let text = scored_rows(&inst.tsg, text.rows().into_iter().map(|r| r.to_vec()).collect());
    Ok(relevance_from_embeddings(&visual, &text))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceBucket {
    pub lo: f64,
    pub hi: f64,
    pub ids: Vec<String>,
    pub metrics: Option<MetricsReport>,
}

/// Bucket index of `psi` among `k` equal-width buckets over `[0, 1]`; the
/// last bucket is closed on the right.
pub fn bucket_of(psi: f64, k: usize) -> usize {
    ((psi * k as f64).floor() as usize).min(k - 1)
}

/// Groups scored predictions into `k` buckets. Instances without a score
/// are left out.
pub fn relevance_buckets(
    scores: &[(String, Option<f64>)],
    predictions: &[Prediction],
    k: usize,
    classes: usize,
    excluded: Option<usize>,
) -> Result<Vec<RelevanceBucket>> {
    if k == 0 {
        return Err(Error::Config("at least one bucket is required".into()));
    }
    let mut buckets: Vec<RelevanceBucket> = (0..k)
        .map(|b| RelevanceBucket {
            lo: b as f64 / k as f64,
            hi: (b + 1) as f64 / k as f64,
            ids: vec![],
            metrics: None,
        })
        .collect();
    let mut members: Vec<Vec<&Prediction>> = vec![vec![]; k];
    for (id, psi) in scores {
        let Some(psi) = psi else { continue };
        let b = bucket_of(*psi, k);
        buckets[b].ids.push(id.clone());
        if let Some(p) = predictions.iter().find(|p| &p.id == id) {
            members[b].push(p);
        }
    }
    for (bucket, ps) in buckets.iter_mut().zip(members) {
        if !ps.is_empty() {
            let pred: Vec<usize> = ps.iter().map(|p| p.predicted).collect();
            let gold: Vec<usize> = ps.iter().map(|p| p.gold).collect();
            bucket.metrics = Some(compute_metrics(&pred, &gold, classes, excluded)?);
        }
    }
    Ok(buckets)
}

pub fn write_buckets_csv(buckets: &[RelevanceBucket]) -> Result<String> {
    #[derive(Serialize)]
    struct Row {
        lo: f64,
        hi: f64,
        count: usize,
        accuracy: Option<f64>,
        f1: Option<f64>,
    }
    let mut w = csv::Writer::from_writer(vec![]);
    for b in buckets {
        w.serialize(Row {
            lo: b.lo,
            hi: b.hi,
            count: b.ids.len(),
            accuracy: b.metrics.as_ref().map(|m| m.accuracy),
            f1: b.metrics.as_ref().map(|m| m.f1),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub stage: String,
    pub epoch: usize,
    pub node_keep_ratio: f64,
    pub edge_keep_ratio: f64,
    pub f1: f64,
    pub mi_proxy: f64,
}

pub fn trajectory_rows(logs: &[EpochLog]) -> Vec<TrajectoryRow> {
    logs.iter()
        .map(|l| TrajectoryRow {
            step: l.step,
            stage: l.stage.name().to_string(),
            epoch: l.epoch,
            node_keep_ratio: l.node_keep,
            edge_keep_ratio: l.edge_keep,
            f1: l.dev_f1,
            mi_proxy: l.mi_proxy,
        })
        .collect()
}

pub fn trajectory_report(logs: &[EpochLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    for r in trajectory_rows(logs) {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    finish(w)
}

pub fn read_trajectory(text: &str) -> Result<Vec<TrajectoryRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Entropy of a probability vector in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureStage {
    H,
    Z,
    S,
}

impl FeatureStage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "h" | "H" => Some(FeatureStage::H),
            "z" => Some(FeatureStage::Z),
            "s" => Some(FeatureStage::S),
            _ => None,
        }
    }

    pub fn features(self, p: &Prediction) -> &[f64] {
        match self {
            FeatureStage::H => &p.h_pool,
            FeatureStage::Z => &p.z,
            FeatureStage::S => &p.s,
        }
    }
}

/// Multinomial logistic regression on frozen features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

fn softmax_rows(logits: &mut Mat) {
    for mut r in logits.rows_mut() {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        r.mapv_inplace(|x| (x - m).exp());
        let z = r.sum();
        r.mapv_inplace(|x| x / z);
    }
}

impl LinearProbe {
    /// Full-batch gradient descent on mean cross-entropy plus `l2·‖W‖²/2`.
    pub fn fit(features: &Mat, labels: &[usize], classes: usize, epochs: usize, lr: f64, l2: f64) -> Result<Self> {
        if features.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::Contract("probe needs one label per feature row".into()));
        }
        if labels.iter().any(|&y| y >= classes) {
            return Err(Error::Contract("probe label outside class range".into()));
        }
        let n = labels.len() as f64;
        let mut weight = Array2::zeros((classes, features.ncols()));
        let mut bias = Array1::zeros(classes);
        for _ in 0..epochs {
            let mut p = features.dot(&weight.t()) + &bias;
            softmax_rows(&mut p);
            for (i, &y) in labels.iter().enumerate() {
                p[[i, y]] -= 1.0;
            }
            let gw = p.t().dot(features) / n + &weight * l2;
            let gb = p.sum_axis(Axis(0)) / n;
            weight -= &(gw * lr);
            bias -= &(gb * lr);
        }
        Ok(LinearProbe {
            weight,
            bias: bias.to_vec(),
        })
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let mut l = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        l = l.dot(&self.weight.t()) + &Array1::from(self.bias.clone());
        softmax_rows(&mut l);
        l.row(0).to_vec()
    }
}

pub fn feature_matrix(predictions: &[Prediction], stage: FeatureStage) -> Mat {
    let d = predictions.first().map_or(0, |p| stage.features(p).len());
    let mut m = Array2::zeros((predictions.len(), d));
    for (i, p) in predictions.iter().enumerate() {
        m.row_mut(i).assign(&ndarray::ArrayView1::from(stage.features(p)));
    }
    m
}

/// Heads used for task entropy: probes for `H` and `z`, the model's own
/// classifier for `s`.
#[derive(Clone, Debug, Default)]
pub struct EntropyHeads {
    pub h: Option<LinearProbe>,
    pub z: Option<LinearProbe>,
}

impl EntropyHeads {
    pub fn fit(model: &Model, train: &[Prediction]) -> Result<Self> {
        let c = &model.config;
        let classes = model.relations.len();
        let labels: Vec<usize> = train.iter().map(|p| p.gold).collect();
        let fit = |stage| {
            LinearProbe::fit(
                &feature_matrix(train, stage),
                &labels,
                classes,
                c.probe_epochs,
                c.probe_lr,
                c.probe_l2,
            )
        };
        Ok(EntropyHeads {
            h: Some(fit(FeatureStage::H)?),
            z: Some(fit(FeatureStage::Z)?),
        })
    }

    fn distribution(&self, stage: FeatureStage, p: &Prediction) -> Result<Vec<f64>> {
        let probe = match stage {
            FeatureStage::S => return Ok(p.probs.clone()),
            FeatureStage::H => &self.h,
            FeatureStage::Z => &self.z,
        };
        probe
            .as_ref()
            .map(|probe| probe.probabilities(stage.features(p)))
            .ok_or_else(|| Error::Contract(format!("no fitted head for the {stage:?} stage")))
    }

    /// Mean predictive entropy over `data` at `stage`.
    pub fn task_entropy(&self, stage: FeatureStage, data: &[Prediction]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for p in data {
            total += entropy(&self.distribution(stage, p)?);
        }
        Ok(total / data.len() as f64)
    }
}

/// Area under the ROC curve of scores separating `pos` from `neg`; ties
/// count one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for a in pos {
        for b in neg {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// One pruned-graph dump record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectRecord {
    pub id: String,
    pub graph: CrossModalGraph,
    pub pi_v: Vec<f64>,
    pub rho_v: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    pub rho_e: Vec<f64>,
    pub pruned: PrunedGraph,
    pub predicted: String,
    pub gold: String,
}

pub fn inspect(model: &Model, p: &Prepared) -> Result<InspectRecord> {
    let pred = model.predict(p)?;
    let sess = crate::nn::Session::new(&model.store);
    let graph = model.forward(&sess, p, Some(crate::model::Stage::GeneWarmup), None)?.graph;
    Ok(InspectRecord {
        id: p.id.clone(),
        pruned: hard_prune(&pred.edges, &pred.rho_v, &pred.rho_e),
        graph,
        pi_v: pred.pi_v,
        rho_v: pred.rho_v,
        edges: pred.edges,
        rho_e: pred.rho_e,
        predicted: model.relations.name(pred.predicted).to_string(),
        gold: model.relations.name(pred.gold).to_string(),
    })
}
