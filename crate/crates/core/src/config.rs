//! Flat key-value run configuration.

use crate::error::{Error, Result};
use crate::gene::GeneConfig;
use crate::nn::AdamConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const SEED_ENV: &str = "CMGGIB_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    // features
    pub dim: usize,
    pub label_dim: usize,
    /// Defaults to `dim` when zero.
    pub z_dim: usize,
    pub provider_seed: u64,
    pub context_noise: f64,
    pub region_noise: f64,
    /// Weight of the shared direction mixed into the synthetic cue concepts.
    pub signal_axis: f64,

    // graph
    pub lambda: f64,
    pub gat_layers: usize,

    // refinement
    pub tau: f64,
    pub beta: f64,
    pub context_order: usize,
    pub refine_iterations: usize,
    pub gate_floor: f64,

    // topics
    pub topics: usize,
    pub keywords: usize,
    pub codebook_size: usize,
    pub vocab_min_count: usize,

    // training
    pub eta1: f64,
    pub eta2: f64,
    pub lr_pretrained: f64,
    pub lr_other: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs_gene: usize,
    pub epochs_lamo: usize,
    pub epochs_joint: usize,
    pub freeze_topic_words: bool,
    pub threads: usize,

    // evaluation and analysis
    pub include_none: bool,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
    pub buckets: usize,

    // synthetic corpus
    pub synth_instances: usize,
    pub synth_classes: usize,
    pub plant_strength: f64,
    pub synth_noise_objects: usize,
    pub synth_visual_noise: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            dim: 768,
            label_dim: 300,
            z_dim: 0,
            provider_seed: 7,
            context_noise: 0.1,
            region_noise: 0.1,
            signal_axis: 0.7,
            lambda: crate::cmg::DEFAULT_LAMBDA,
            gat_layers: 2,
            tau: 0.1,
            beta: 0.01,
            context_order: 2,
            refine_iterations: 2,
            gate_floor: crate::gene::GATE_FLOOR,
            topics: 10,
            keywords: 10,
            codebook_size: 2000,
            vocab_min_count: 2,
            eta1: 1.0,
            eta2: 1.0,
            lr_pretrained: 2e-5,
            lr_other: 2e-4,
            grad_clip: 5.0,
            batch_size: 16,
            epochs_gene: 20,
            epochs_lamo: 20,
            epochs_joint: 40,
            freeze_topic_words: false,
            threads: 0,
            include_none: false,
            probe_epochs: 200,
            probe_lr: 0.05,
            probe_l2: 1e-2,
            buckets: 4,
            synth_instances: 500,
            synth_classes: 4,
            plant_strength: 1.0,
            synth_noise_objects: 6,
            synth_visual_noise: 4,
            dev_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file (or the defaults when `path` is `None`) and
    /// applies the seed override from the environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut c = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        c.apply_env()?;
        Ok(c)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn z_dim(&self) -> usize {
        if self.z_dim == 0 {
            self.dim
        } else {
            self.z_dim
        }
    }

    pub fn gene(&self) -> GeneConfig {
        GeneConfig {
            tau: self.tau,
            beta: self.beta,
            order: self.context_order,
            iterations: self.refine_iterations,
            floor: self.gate_floor,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr_pretrained: self.lr_pretrained,
            lr_other: self.lr_other,
            clip_norm: self.grad_clip,
            ..AdamConfig::default()
        }
    }

    /// SHA-256 over the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.gene().validate()?;
        let positive = [
            ("dim", self.dim),
            ("label_dim", self.label_dim),
            ("gat_layers", self.gat_layers),
            ("codebook_size", self.codebook_size),
            ("batch_size", self.batch_size),
            ("buckets", self.buckets),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.topics < 2 {
            return Err(Error::Config("at least two topics are required".into()));
        }
        if !(-1.0..=1.01).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [-1, 1]", self.lambda)));
        }
        if self.eta1 < 0.0 || self.eta2 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.plant_strength) {
            return Err(Error::Config("plant_strength must lie in [0, 1]".into()));
        }
        if self.synth_classes < 2 {
            return Err(Error::Config("synthetic corpus needs at least two classes".into()));
        }
        if self.dev_fraction < 0.0 || self.test_fraction < 0.0 || self.dev_fraction + self.test_fraction >= 1.0 {
            return Err(Error::Config("split fractions must be nonnegative and sum below 1".into()));
        }
        Ok(())
    }
}
