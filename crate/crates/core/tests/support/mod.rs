#![allow(dead_code)]

pub mod equations;

use cmggib::corpus::RelationSet;
use cmggib::model::{Model, Prepared, Stage};
use cmggib::nn::ParamId;
use cmggib::synth::{synth_corpus, SynthCorpus};
use cmggib::train::{run_schedule, EpochLog, Schedule};
use cmggib::Config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

pub const DESK: &str = include_str!("../../../../configs/desk.toml");

pub fn desk_config() -> Config {
    Config::from_toml(DESK).expect("desk config parses")
}

/// Small dimensions for gradient checks.
pub fn toy_config(seed: u64) -> Config {
    Config {
        seed,
        dim: 8,
        label_dim: 4,
        topics: 3,
        keywords: 3,
        codebook_size: 4,
        synth_instances: 12,
        synth_noise_objects: 2,
        synth_visual_noise: 2,
        dev_fraction: 0.0,
        test_fraction: 0.0,
        ..Config::default()
    }
}

pub struct Trained {
    pub corpus: SynthCorpus,
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub train: Vec<Prepared>,
    pub dev: Vec<Prepared>,
    pub test: Vec<Prepared>,
    pub elapsed: Duration,
}

pub fn train_pipeline(cfg: &Config) -> Trained {
    let start = Instant::now();
    let corpus = synth_corpus(cfg).expect("corpus");
    let mut model = Model::build(cfg, RelationSet::default(), &corpus.train, &corpus.dev).expect("model");
    let train = model.prepare_all(&corpus.train).expect("train split");
    let dev = model.prepare_all(&corpus.dev).expect("dev split");
    let test = model.prepare_all(&corpus.test).expect("test split");
    let mut logs = Vec::new();
    run_schedule(&mut model, &train, &dev, &Schedule::from_config(cfg), &mut logs).expect("training");
    Trained {
        corpus,
        model,
        logs,
        train,
        dev,
        test,
        elapsed: start.elapsed(),
    }
}

/// The planted-signal run on the desk config, trained once per process.
pub fn planted_run() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| train_pipeline(&desk_config()))
}

/// Adds Gaussian noise to every parameter so gates and heads leave their
/// symmetric initial values.
pub fn perturb(model: &mut Model, rng: &mut ChaCha8Rng, std: f64) {
    let n = Normal::new(0.0, std).unwrap();
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        model.store.get_mut(id).mapv_inplace(|v| v + n.sample(rng));
    }
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub draws: usize,
    pub checked: usize,
    pub kinks: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

const H: f64 = 1e-4;

fn loss_at(model: &mut Model, p: &Prepared, stage: Stage, id: ParamId, idx: (usize, usize), v: f64) -> f64 {
    let old = model.store.get(id)[idx];
    model.store.get_mut(id)[idx] = v;
    let l = model.instance_loss(p, stage, None).expect("loss").total;
    model.store.get_mut(id)[idx] = old;
    l
}

fn central(model: &mut Model, p: &Prepared, stage: Stage, id: ParamId, idx: (usize, usize), h: f64) -> f64 {
    let x = model.store.get(id)[idx];
    (loss_at(model, p, stage, id, idx, x + h) - loss_at(model, p, stage, id, idx, x - h)) / (2.0 * h)
}

/// Central differences against the tape gradient for `draws` random
/// parameter draws of `stage`'s loss. A coordinate whose difference
/// quotients disagree across step sizes sits on a non-differentiable point
/// (activation kink, hyper-edge or keyword switch) and is counted as a kink.
pub fn gradient_check(stage: Stage, draws: usize, coords_per_tensor: usize) -> FdReport {
    let mut report = FdReport::default();
    for draw in 0..draws {
        let cfg = toy_config(1000 + draw as u64);
        let corpus = synth_corpus(&cfg).expect("corpus");
        let mut model = Model::build(&cfg, RelationSet::default(), &corpus.train, &[]).expect("model");
        let mut rng = ChaCha8Rng::seed_from_u64(draw as u64);
        perturb(&mut model, &mut rng, 0.3);
        let prepared = model.prepare_all(&corpus.train).expect("prepare");
        let p = &prepared[draw % prepared.len()];
        let (_, grads) = model.instance_gradients(p, stage, None).expect("grads");
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let (r, c) = model.store.get(id).dim();
            for _ in 0..coords_per_tensor.min(r * c) {
                let idx = (rng.random_range(0..r), rng.random_range(0..c));
                let analytic = grads.get(id).map_or(0.0, |g| g[idx]);
                let numeric = central(&mut model, p, stage, id, idx, H);
                let e = rel(analytic, numeric);
                if e < 1e-3 {
                    report.checked += 1;
                    report.worst = report.worst.max(e);
                    continue;
                }
                let coarse = central(&mut model, p, stage, id, idx, 10.0 * H);
                let fine = central(&mut model, p, stage, id, idx, 0.1 * H);
                if rel(coarse, numeric) > 1e-3 || rel(fine, numeric) > 1e-3 {
                    report.kinks += 1;
                } else {
                    report.checked += 1;
                    report.worst = report.worst.max(e);
                    report.failures.push(format!(
                        "draw {draw} {} {idx:?}: tape {analytic:.6e} numeric {numeric:.6e}",
                        model.store.name(id)
                    ));
                }
            }
        }
        report.draws += 1;
    }
    report
}
