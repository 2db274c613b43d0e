//! Latent multimodal topic model: visual-word codebook, bag-of-words
//! vocabularies, Gaussian-softmax topic inference and the dual
//! reconstruction objective.

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::gene::kl_tape;
use crate::nn::{normal_init, xavier, LrGroup, ParamId, ParamStore, Session};
use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const CODEBOOK_VERSION: u32 = 1;
const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-4;

/// Visual vocabulary: k-means centroids over object features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub version: u32,
    pub size: usize,
    pub dim: usize,
    pub seed: u64,
    pub centroids: Mat,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by Euclidean distance, lowest index on ties.
pub fn nearest_centroid(centroids: &Mat, x: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

fn kmeans_pp_init(features: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = features.nrows();
    let mut chosen: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i), features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // guard against rounding at the tail
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // duplicates exhausted the spread; take the first unused point
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(features.row(i), features.row(next)));
        }
    }
    let mut out = Array2::zeros((k, features.ncols()));
    for (r, &i) in chosen.iter().enumerate() {
        out.row_mut(r).assign(&features.row(i));
    }
    out
}

/// Seeded k-means++ followed by Lloyd iterations. Stops when assignments
/// stop changing, the centroid shift falls below tolerance, or after 100
/// iterations.
pub fn build_codebook(features: &Mat, size: usize, seed: u64) -> Result<Codebook> {
    let n = features.nrows();
    if size == 0 {
        return Err(Error::Config("codebook size must be positive".into()));
    }
    if n < size {
        return Err(Error::Config(format!(
            "{n} features cannot fill a codebook of {size}"
        )));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite visual feature".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(features, size, &mut rng);
    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for i in 0..n {
            let k = nearest_centroid(&centroids, features.row(i));
            if k != assign[i] {
                assign[i] = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; size];
        for i in 0..n {
            let mut row = sums.row_mut(assign[i]);
            row += &features.row(i);
            counts[assign[i]] += 1;
        }
        let mut shift = 0.0;
        let mut scale = 0.0;
        for k in 0..size {
            // empty clusters keep their previous centroid
            if counts[k] == 0 {
                continue;
            }
            let new = sums.row(k).mapv(|x| x / counts[k] as f64);
            shift += sq_dist(new.view(), centroids.row(k));
            scale += new.iter().map(|x| x * x).sum::<f64>();
            centroids.row_mut(k).assign(&new);
        }
        if shift.sqrt() <= KMEANS_TOL * scale.sqrt().max(1e-12) {
            break;
        }
    }
    Ok(Codebook {
        version: CODEBOOK_VERSION,
        size,
        dim: features.ncols(),
        seed,
        centroids,
    })
}

impl Codebook {
    /// Visual bag-of-words: count of nearest centroids. No features gives
    /// the zero vector.
    pub fn assign(&self, features: &Mat) -> Vec<f64> {
        assign_visual_words(features, &self.centroids)
    }
}

pub fn assign_visual_words(features: &Mat, centroids: &Mat) -> Vec<f64> {
    let mut counts = vec![0.0; centroids.nrows()];
    for row in features.rows() {
        counts[nearest_centroid(centroids, row)] += 1.0;
    }
    counts
}

pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "rt", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

fn is_stopword(w: &str) -> bool {
    STOPWORDS.binary_search(&w).is_ok()
}

fn is_wordlike(w: &str) -> bool {
    w.chars().any(char::is_alphanumeric)
}

/// Textual vocabulary in sorted order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(mut words: Vec<String>) -> Self {
        words.sort();
        words.dedup();
        let mut v = Vocabulary {
            words,
            index: BTreeMap::new(),
        };
        v.reindex();
        v
    }

    /// Lowercased tokens seen at least `min_count` times, minus stopwords
    /// and pure punctuation.
    pub fn build<'a, D>(documents: D, min_count: usize) -> Self
    where
        D: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for doc in documents {
            for tok in doc {
                let w = tok.to_lowercase();
                if is_wordlike(&w) && !is_stopword(&w) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let words = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .map(|(w, _)| w)
            .collect();
        Self::from_words(words)
    }

    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn id(&self, w: &str) -> Option<usize> {
        self.index.get(&w.to_lowercase()).copied()
    }

    pub fn bow(&self, tokens: &[String]) -> Vec<f64> {
        let mut counts = vec![0.0; self.len()];
        for t in tokens {
            if let Some(i) = self.id(t) {
                counts[i] += 1.0;
            }
        }
        counts
    }
}

/// Encoder, topic FFN and topic-word matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LamoParams {
    pub mu: ParamId,
    pub mu_bias: ParamId,
    pub log_sigma: ParamId,
    pub log_sigma_bias: ParamId,
    pub theta: ParamId,
    pub theta_bias: ParamId,
    /// `χ`, `K × U^T`.
    pub chi: ParamId,
    /// `ψ`, `K × U^I`.
    pub psi: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LamoVars {
    pub mu: Var,
    pub mu_bias: Var,
    pub log_sigma: Var,
    pub log_sigma_bias: Var,
    pub theta: Var,
    pub theta_bias: Var,
    pub chi: Var,
    pub psi: Var,
}

impl LamoParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        input_dim: usize,
        topics: usize,
        text_vocab: usize,
        visual_vocab: usize,
    ) -> Self {
        let o = LrGroup::Other;
        LamoParams {
            mu: store.add("lamo.mu", o, xavier(rng, topics, input_dim)),
            mu_bias: store.add("lamo.mu_bias", o, Array2::zeros((1, topics))),
            log_sigma: store.add("lamo.log_sigma", o, normal_init(rng, topics, input_dim, 0.01)),
            log_sigma_bias: store.add("lamo.log_sigma_bias", o, Array2::zeros((1, topics))),
            theta: store.add("lamo.theta", o, xavier(rng, topics, topics)),
            theta_bias: store.add("lamo.theta_bias", o, Array2::zeros((1, topics))),
            chi: store.add("lamo.chi", o, normal_init(rng, topics, text_vocab, 0.1)),
            psi: store.add("lamo.psi", o, normal_init(rng, topics, visual_vocab, 0.1)),
        }
    }

    pub fn bind(&self, s: &Session) -> LamoVars {
        LamoVars {
            mu: s.param(self.mu),
            mu_bias: s.param(self.mu_bias),
            log_sigma: s.param(self.log_sigma),
            log_sigma_bias: s.param(self.log_sigma_bias),
            theta: s.param(self.theta),
            theta_bias: s.param(self.theta_bias),
            chi: s.param(self.chi),
            psi: s.param(self.psi),
        }
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [
            self.mu,
            self.mu_bias,
            self.log_sigma,
            self.log_sigma_bias,
            self.theta,
            self.theta_bias,
            self.chi,
            self.psi,
        ]
    }

    pub fn topics(&self, store: &ParamStore) -> usize {
        store.get(self.chi).nrows()
    }
}

/// Topic-side outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TopicVars {
    pub mu: Var,
    pub sigma: Var,
    pub theta: Var,
}

/// `μ = f_μ(f(H))`, `log σ = f_σ(f(H))` with `f` the row mean.
pub fn encode_topics_tape(tape: &Tape, h: Var, vars: &LamoVars) -> (Var, Var) {
    let f = tape.mean_rows(h);
    let mu = tape.add(tape.matmul_nt(f, vars.mu), vars.mu_bias);
    let log_sigma = tape.add(tape.matmul_nt(f, vars.log_sigma), vars.log_sigma_bias);
    (mu, tape.exp(log_sigma))
}

/// `θ = Softmax(FFN(μ + σ·ε))`.
pub fn sample_theta_tape(tape: &Tape, mu: Var, sigma: Var, eps: &Mat, vars: &LamoVars) -> Var {
    let e = tape.leaf(eps.clone());
    let varpi = tape.add(mu, tape.mul(sigma, e));
    let logits = tape.add(tape.matmul_nt(varpi, vars.theta), vars.theta_bias);
    tape.softmax_rows(logits)
}

pub fn topics_tape(tape: &Tape, h: Var, eps: &Mat, vars: &LamoVars) -> TopicVars {
    let (mu, sigma) = encode_topics_tape(tape, h, vars);
    let theta = sample_theta_tape(tape, mu, sigma, eps, vars);
    TopicVars { mu, sigma, theta }
}

/// `Σ_w counts_w · log Softmax(θ·M)_w`.
pub fn reconstruction_loglik_tape(tape: &Tape, theta: Var, m: Var, counts: &[f64]) -> Var {
    let log_p = tape.log_softmax_rows(tape.matmul(theta, m));
    let c = tape.row_leaf(counts);
    tape.sum_all(tape.mul(c, log_p))
}

/// `(total, kl, rec_t, rec_i)` on the tape.
pub fn lamo_loss_tape(
    tape: &Tape,
    topics: &TopicVars,
    text_bow: &[f64],
    visual_bow: &[f64],
    vars: &LamoVars,
) -> (Var, Var, Var, Var) {
    let kl = kl_tape(tape, topics.mu, topics.sigma);
    let rec_t = tape.scale(reconstruction_loglik_tape(tape, topics.theta, vars.chi, text_bow), -1.0);
    let rec_i = tape.scale(reconstruction_loglik_tape(tape, topics.theta, vars.psi, visual_bow), -1.0);
    let total = tape.add(tape.add(kl, rec_t), rec_i);
    (total, kl, rec_t, rec_i)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn affine(w: &Mat, b: &[f64], x: &[f64]) -> Vec<f64> {
    w.rows()
        .into_iter()
        .zip(b)
        .map(|(row, bi)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bi)
        .collect()
}

/// Plain-value topic encoder heads.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicEncoder {
    pub mu_w: Mat,
    pub mu_b: Vec<f64>,
    pub sigma_w: Mat,
    pub sigma_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicState {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn encode_topics(h: &Mat, enc: &TopicEncoder) -> Result<TopicState> {
    if h.nrows() == 0 {
        return Err(Error::Structure("cannot encode topics of an empty graph".into()));
    }
    let f: Vec<f64> = h.mean_axis(ndarray::Axis(0)).expect("nonempty").to_vec();
    let mu = affine(&enc.mu_w, &enc.mu_b, &f);
    let sigma = affine(&enc.sigma_w, &enc.sigma_b, &f)
        .into_iter()
        .map(f64::exp)
        .collect();
    Ok(TopicState { mu, sigma })
}

pub fn sample_theta(state: &TopicState, eps: &[f64], ffn_w: &Mat, ffn_b: &[f64]) -> Result<Vec<f64>> {
    if state.sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Domain("sigma must be positive".into()));
    }
    let varpi: Vec<f64> = state
        .mu
        .iter()
        .zip(&state.sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect();
    Ok(softmax(&affine(ffn_w, ffn_b, &varpi)))
}

/// `Softmax(θ·M)` over the vocabulary.
pub fn reconstruct(theta: &[f64], m: &Mat) -> Vec<f64> {
    let logits: Vec<f64> = (0..m.ncols())
        .map(|w| theta.iter().enumerate().map(|(k, t)| t * m[[k, w]]).sum())
        .collect();
    softmax(&logits)
}

pub fn reconstruction_loglik(p: &[f64], counts: &[f64]) -> f64 {
    p.iter()
        .zip(counts)
        .filter(|(_, c)| **c != 0.0)
        .map(|(p, c)| c * p.ln())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LamoLoss {
    pub kl: f64,
    pub rec_t: f64,
    pub rec_i: f64,
    pub total: f64,
}

pub fn lamo_loss(
    state: &TopicState,
    theta: &[f64],
    text_bow: &[f64],
    visual_bow: &[f64],
    chi: &Mat,
    psi: &Mat,
) -> Result<LamoLoss> {
    let kl = crate::gene::kl_gaussian(&state.mu, &state.sigma)?;
    let rec_t = -reconstruction_loglik(&reconstruct(theta, chi), text_bow);
    let rec_i = -reconstruction_loglik(&reconstruct(theta, psi), visual_bow);
    Ok(LamoLoss {
        kl,
        rec_t,
        rec_i,
        total: kl + rec_t + rec_i,
    })
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `l` largest entries, descending, ties by lowest index.
pub fn top_indices(row: &[f64], l: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(l);
    idx
}

/// Top-`l` textual and visual word ids of the most activated topic.
pub fn top_keywords(theta: &[f64], chi: &Mat, psi: &Mat, l: usize) -> (Vec<usize>, Vec<usize>) {
    let k = argmax(theta);
    (
        top_indices(&chi.row(k).to_vec(), l),
        top_indices(&psi.row(k).to_vec(), l),
    )
}

/// One line of a topic dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicRecord {
    pub topic: usize,
    pub textual: Vec<String>,
    pub visual: Vec<usize>,
}

pub fn topic_records(chi: &Mat, psi: &Mat, vocab: &Vocabulary, l: usize) -> Vec<TopicRecord> {
    (0..chi.nrows())
        .map(|k| TopicRecord {
            topic: k,
            textual: top_indices(&chi.row(k).to_vec(), l)
                .into_iter()
                .map(|i| vocab.word(i).to_string())
                .collect(),
            visual: top_indices(&psi.row(k).to_vec(), l),
        })
        .collect()
}

pub fn write_topic_dump(records: &[TopicRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_topic_dump(text: &str) -> Result<Vec<TopicRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Corpus {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
