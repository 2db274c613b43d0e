use super::graph::BBox;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Source of node features. Visual regions and textual tokens land in one
/// shared `dim()`-dimensional space; category labels get `label_dim()`-sized
/// word vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn label_dim(&self) -> usize;

    /// Feature of an image region. `label` is the detector's category for
    /// the region.
    fn region(&self, image: &str, region: &BBox, label: &str) -> Vec<f64>;

    /// Contextual vector for every token of a sentence.
    fn tokens(&self, tokens: &[String]) -> Vec<Vec<f64>>;

    /// Static word vector for a category label.
    fn word(&self, word: &str) -> Vec<f64>;
}

/// Seeded pseudo-random unit vector for `(seed, domain, key)`.
pub fn hash_unit_vector(seed: u64, domain: &str, key: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(bytes);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    v
}

pub fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Deterministic stand-in for a pretrained vision-language encoder.
///
/// Every word maps to a concept (itself, or an alias target), every concept
/// to a hashed unit vector. Region and token vectors are the concept vector
/// perturbed by hashed noise keyed on the image box or the token context,
/// so a region and a word naming the same concept have high cosine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProvider {
    pub seed: u64,
    pub dim: usize,
    pub label_dim: usize,
    pub context_noise: f64,
    pub region_noise: f64,
    aliases: BTreeMap<String, String>,
    components: BTreeMap<String, Vec<(String, f64)>>,
}

impl SyntheticProvider {
    pub fn new(seed: u64, dim: usize, label_dim: usize) -> Self {
        SyntheticProvider {
            seed,
            dim,
            label_dim,
            context_noise: 0.1,
            region_noise: 0.1,
            aliases: BTreeMap::new(),
            components: BTreeMap::new(),
        }
    }

    pub fn with_noise(mut self, context_noise: f64, region_noise: f64) -> Self {
        self.context_noise = context_noise;
        self.region_noise = region_noise;
        self
    }

    /// Makes `a` and `b` the same concept, so e.g. a detector label and a
    /// sentence word embed close together.
    pub fn with_pair(mut self, a: &str, b: &str) -> Self {
        self.aliases.insert(b.to_lowercase(), a.to_lowercase());
        self
    }

    /// Mixes a shared direction named `axis` into `concept` with weight `w`.
    /// Concepts sharing an axis are mutually correlated.
    pub fn with_component(mut self, concept: &str, axis: &str, w: f64) -> Self {
        self.components
            .entry(concept.to_lowercase())
            .or_default()
            .push((axis.to_string(), w));
        self
    }

    pub fn concept_of(&self, word: &str) -> String {
        let w = word.to_lowercase();
        self.aliases.get(&w).cloned().unwrap_or(w)
    }

    pub fn concept_vector(&self, word: &str) -> Vec<f64> {
        let c = self.concept_of(word);
        let mut v = hash_unit_vector(self.seed, "concept", &c, self.dim);
        if let Some(comps) = self.components.get(&c) {
            for (axis, w) in comps {
                let a = hash_unit_vector(self.seed, "axis", axis, self.dim);
                v.iter_mut().zip(&a).for_each(|(x, y)| *x += w * y);
            }
            normalize(&mut v);
        }
        v
    }

    fn perturbed(&self, mut base: Vec<f64>, domain: &str, key: &str, amount: f64) -> Vec<f64> {
        if amount != 0.0 {
            let noise = hash_unit_vector(self.seed, domain, key, self.dim);
            base.iter_mut().zip(&noise).for_each(|(x, n)| *x += amount * n);
        }
        normalize(&mut base);
        base
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn label_dim(&self) -> usize {
        self.label_dim
    }

    fn region(&self, image: &str, region: &BBox, label: &str) -> Vec<f64> {
        let key = format!(
            "{image}|{}|{}|{}|{}|{}",
            label, region.x0, region.y0, region.x1, region.y1
        );
        self.perturbed(self.concept_vector(label), "region", &key, self.region_noise)
    }

    fn tokens(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        (0..tokens.len())
            .map(|i| {
                let prev = if i > 0 { tokens[i - 1].as_str() } else { "<s>" };
                let next = tokens.get(i + 1).map_or("</s>", |s| s.as_str());
                let key = format!("{prev}|{}|{next}", tokens[i]);
                self.perturbed(
                    self.concept_vector(&tokens[i]),
                    "context",
                    &key,
                    self.context_noise,
                )
            })
            .collect()
    }

    fn word(&self, word: &str) -> Vec<f64> {
        hash_unit_vector(self.seed, "word", &self.concept_of(word), self.label_dim)
    }
}
