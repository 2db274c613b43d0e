//! Seeded synthetic corpora: planted-signal relation instances and a
//! bag-of-words corpus drawn from a known topic model.

use crate::config::Config;
use crate::corpus::{Entity, Instance, MRE_RELATIONS};
use crate::error::{Error, Result};
use crate::sg::{BBox, EmbeddingProvider, Modality, NodeKind, SceneGraph, SgNode, Span, SyntheticProvider};
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

/// Class-indicative concepts; class `c` is cued by `CUES[c]`.
pub const CUES: [&str; 22] = [
    "guitar", "trophy", "wedding", "stadium", "church", "diploma", "microphone", "flag", "crown",
    "ballot", "badge", "passport", "altar", "podium", "medal", "tractor", "bridge", "castle",
    "harbor", "banner", "ring", "helmet",
];

const FILLERS: [&str; 30] = [
    "tree", "car", "cup", "chair", "window", "dog", "cloud", "street", "table", "lamp", "book",
    "bag", "shoe", "door", "wall", "grass", "sky", "bottle", "phone", "hat", "bench", "bus",
    "bike", "fence", "road", "plant", "shirt", "sign", "boat", "clock",
];

const ATTRIBUTES: [&str; 10] = [
    "red", "blue", "green", "old", "small", "large", "white", "dark", "bright", "wooden",
];

const RELATION_WORDS: [&str; 6] = ["near", "on", "behind", "holding", "under", "beside"];

const NAMES: [&str; 24] = [
    "Alice", "Bob", "Carol", "Dave", "Erin", "Frank", "Grace", "Heidi", "Ivan", "Judy", "Mallory",
    "Niaj", "Olivia", "Peggy", "Rupert", "Sybil", "Trent", "Uma", "Victor", "Walter", "Xena",
    "Yusuf", "Zoe", "Quinn",
];

const CONNECTIVES: [&str; 3] = ["and", "with", "meets"];

/// Provider used for both generation and training: cue concepts share one
/// extra direction so "being a cue" is linearly visible.
pub fn build_provider(config: &Config) -> SyntheticProvider {
    let mut p = SyntheticProvider::new(config.provider_seed, config.dim, config.label_dim)
        .with_noise(config.context_noise, config.region_noise);
    if config.signal_axis != 0.0 {
        for cue in CUES {
            p = p.with_component(cue, "signal", config.signal_axis);
        }
    }
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Planted,
    Entity,
    Noise,
}

/// Ground truth for one generated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    /// Class whose cue was planted.
    pub planted: usize,
    /// Per node, in scene-graph node order.
    pub textual: Vec<Role>,
    pub visual: Vec<Role>,
}

impl Annotation {
    /// Roles in cross-modal node order (textual first).
    pub fn cmg_roles(&self) -> Vec<Role> {
        self.textual.iter().chain(&self.visual).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
    pub annotations: Vec<Annotation>,
    /// Relation label of each class.
    pub class_labels: Vec<String>,
}

impl SynthCorpus {
    pub fn all(&self) -> impl Iterator<Item = &Instance> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    pub fn annotation(&self, id: &str) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.id == id)
    }
}

struct TextBuilder {
    tokens: Vec<String>,
    nodes: Vec<SgNode>,
    edges: Vec<(u32, u32)>,
    roles: Vec<Role>,
}

impl TextBuilder {
    fn word(&mut self, w: &str) -> Span {
        self.tokens.push(w.to_string());
        Span::new(self.tokens.len() - 1, self.tokens.len())
    }

    fn node(&mut self, kind: NodeKind, label: &str, span: Span, role: Role) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(SgNode {
            id,
            kind,
            label: label.to_string(),
            region: None,
            span: Some(span),
        });
        self.roles.push(role);
        id
    }
}

struct VisualBuilder {
    nodes: Vec<SgNode>,
    edges: Vec<(u32, u32)>,
    roles: Vec<Role>,
}

impl VisualBuilder {
    fn node(&mut self, kind: NodeKind, label: &str, region: Option<BBox>, role: Role) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(SgNode {
            id,
            kind,
            label: label.to_string(),
            region,
            span: None,
        });
        self.roles.push(role);
        id
    }
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let x0 = rng.random_range(0..400) as f64;
    let y0 = rng.random_range(0..300) as f64;
    let w = rng.random_range(20..200) as f64;
    let h = rng.random_range(20..200) as f64;
    BBox::from([x0, y0, x0 + w, y0 + h])
}

fn generate_instance<R: Rng>(rng: &mut R, index: usize, config: &Config, labels: &[String]) -> (Instance, Annotation) {
    let classes = labels.len();
    let planted = rng.random_range(0..classes);
    let class = if rng.random::<f64>() < config.plant_strength {
        planted
    } else {
        rng.random_range(0..classes)
    };
    let cue = CUES[planted];

    let mut t = TextBuilder {
        tokens: Vec::new(),
        nodes: Vec::new(),
        edges: Vec::new(),
        roles: Vec::new(),
    };
    let subj_name = *NAMES.choose(rng).expect("names");
    let obj_name = loop {
        let n = *NAMES.choose(rng).expect("names");
        if n != subj_name {
            break n;
        }
    };
    let s_span = t.word(subj_name);
    let conn = *CONNECTIVES.choose(rng).expect("connectives");
    let c_span = t.word(conn);
    let o_span = t.word(obj_name);
    let s = t.node(NodeKind::Object, subj_name, s_span, Role::Entity);
    let o = t.node(NodeKind::Object, obj_name, o_span, Role::Entity);
    let r = t.node(NodeKind::Relation, conn, c_span, Role::Entity);
    t.edges.extend([(s, r), (r, o)]);

    let noise = config.synth_noise_objects;
    let cue_slot = rng.random_range(0..=noise);
    let mut prev_noise: Option<u32> = None;
    for slot in 0..=noise {
        if slot == cue_slot {
            t.word("the");
            let span = t.word(cue);
            t.node(NodeKind::Object, cue, span, Role::Planted);
            continue;
        }
        let attr = if rng.random_bool(0.5) {
            let a = *ATTRIBUTES.choose(rng).expect("attributes");
            Some((a, t.word(a)))
        } else {
            None
        };
        let noun = *FILLERS.choose(rng).expect("fillers");
        let span = t.word(noun);
        let n = t.node(NodeKind::Object, noun, span, Role::Noise);
        if let Some((a, aspan)) = attr {
            let an = t.node(NodeKind::Attribute, a, aspan, Role::Noise);
            t.edges.push((n, an));
        }
        if let Some(p) = prev_noise {
            if rng.random_bool(0.5) {
                let rw = *RELATION_WORDS.choose(rng).expect("relations");
                let rspan = t.word(rw);
                let rn = t.node(NodeKind::Relation, rw, rspan, Role::Noise);
                t.edges.extend([(p, rn), (rn, n)]);
            }
        }
        prev_noise = Some(n);
    }

    let mut v = VisualBuilder {
        nodes: Vec::new(),
        edges: Vec::new(),
        roles: Vec::new(),
    };
    let vnoise = config.synth_visual_noise;
    let vcue_slot = rng.random_range(0..=vnoise);
    let mut objects: Vec<u32> = Vec::new();
    for slot in 0..=vnoise {
        if slot == vcue_slot {
            v.node(NodeKind::Object, cue, Some(random_box(rng)), Role::Planted);
            continue;
        }
        let label = *FILLERS.choose(rng).expect("fillers");
        let n = v.node(NodeKind::Object, label, Some(random_box(rng)), Role::Noise);
        if rng.random_bool(0.4) {
            let a = *ATTRIBUTES.choose(rng).expect("attributes");
            let an = v.node(NodeKind::Attribute, a, None, Role::Noise);
            v.edges.push((n, an));
        }
        objects.push(n);
    }
    for pair in objects.windows(2) {
        if rng.random_bool(0.5) {
            let rw = *RELATION_WORDS.choose(rng).expect("relations");
            let rn = v.node(NodeKind::Relation, rw, None, Role::Noise);
            v.edges.extend([(pair[0], rn), (rn, pair[1])]);
        }
    }

    let id = format!("syn{index:05}");
    let inst = Instance {
        id: id.clone(),
        tokens: t.tokens,
        image: format!("img{index:05}.jpg"),
        vsg: SceneGraph {
            modality: Modality::Visual,
            nodes: v.nodes,
            edges: v.edges,
        },
        tsg: SceneGraph {
            modality: Modality::Textual,
            nodes: t.nodes,
            edges: t.edges,
        },
        subject: Entity {
            name: subj_name.to_string(),
            span: s_span,
        },
        object: Entity {
            name: obj_name.to_string(),
            span: o_span,
        },
        relation: labels[class].clone(),
    };
    let ann = Annotation {
        id,
        planted,
        textual: t.roles,
        visual: v.roles,
    };
    (inst, ann)
}

/// Planted-signal corpus. Each instance carries one cue concept in both
/// modalities; with probability `plant_strength` the label is the cue's
/// class, otherwise a uniformly random class.
pub fn synth_corpus(config: &Config) -> Result<SynthCorpus> {
    let classes = config.synth_classes;
    if classes < 2 {
        return Err(Error::Config("synthetic corpus needs at least two classes".into()));
    }
    if classes > CUES.len() || classes >= MRE_RELATIONS.len() {
        return Err(Error::Config(format!("at most {} synthetic classes", CUES.len())));
    }
    let labels: Vec<String> = MRE_RELATIONS[1..=classes].iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut all = Vec::with_capacity(config.synth_instances);
    let mut annotations = Vec::with_capacity(config.synth_instances);
    for i in 0..config.synth_instances {
        let (inst, ann) = generate_instance(&mut rng, i, config, &labels);
        all.push(inst);
        annotations.push(ann);
    }
    let n = all.len();
    let n_test = (n as f64 * config.test_fraction).round() as usize;
    let n_dev = (n as f64 * config.dev_fraction).round() as usize;
    let n_train = n - n_dev - n_test;
    let test = all.split_off(n_train + n_dev);
    let dev = all.split_off(n_train);
    Ok(SynthCorpus {
        train: all,
        dev,
        test,
        annotations,
        class_labels: labels,
    })
}

/// Accuracy of predicting each label from the planted textual node's
/// embedding alone, by nearest cue concept.
pub fn oracle_accuracy(corpus: &SynthCorpus, provider: &SyntheticProvider) -> f64 {
    let classes = corpus.class_labels.len();
    let concepts: Vec<Vec<f64>> = CUES[..classes].iter().map(|c| provider.concept_vector(c)).collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for inst in corpus.all() {
        let ann = corpus.annotation(&inst.id).expect("annotated");
        let Some(k) = ann.textual.iter().position(|r| *r == Role::Planted) else {
            continue;
        };
        let span = inst.tsg.nodes[k].span.expect("textual span");
        let vecs = provider.tokens(&inst.tokens);
        let x = &vecs[span.start];
        let best = (0..classes)
            .max_by(|&a, &b| dot(x, &concepts[a]).total_cmp(&dot(x, &concepts[b])))
            .expect("classes");
        if corpus.class_labels[best] == inst.relation {
            correct += 1;
        }
        total += 1;
    }
    correct as f64 / total.max(1) as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn write_annotations(anns: &[Annotation]) -> String {
    anns.iter()
        .map(|a| serde_json::to_string(a).expect("annotation serializes") + "\n")
        .collect()
}

pub fn read_annotations(text: &str) -> Result<Vec<Annotation>> {
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

/// Bag-of-words corpus drawn from a known topic model.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicCorpus {
    /// Generating topic-word distributions, rows on the simplex.
    pub chi: Array2<f64>,
    pub psi: Array2<f64>,
    pub text: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopicCorpusSpec {
    pub topics: usize,
    pub text_vocab: usize,
    pub visual_vocab: usize,
    pub documents: usize,
    pub text_len: usize,
    pub visual_len: usize,
    /// Dirichlet concentration of per-document topic mixtures.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TopicCorpusSpec {
    fn default() -> Self {
        TopicCorpusSpec {
            topics: 3,
            text_vocab: 50,
            visual_vocab: 20,
            documents: 1000,
            text_len: 80,
            visual_len: 30,
            alpha: 0.05,
            seed: 11,
        }
    }
}

/// Topic `k` concentrates on its own block of the vocabulary, with a thin
/// spread over the rest.
fn topic_rows<R: Rng>(rng: &mut R, topics: usize, vocab: usize) -> Array2<f64> {
    let mut m = Array2::zeros((topics, vocab));
    for k in 0..topics {
        for w in 0..vocab {
            let own = w * topics / vocab == k;
            let g: f64 = StandardNormal.sample(rng);
            m[[k, w]] = if own { (0.5 * g).exp() } else { 0.03 * (0.5 * g).exp() };
        }
        let z: f64 = m.row(k).sum();
        m.row_mut(k).mapv_inplace(|x| x / z);
    }
    m
}

fn categorical<R: Rng>(rng: &mut R, p: &[f64]) -> usize {
    let mut u = rng.random::<f64>();
    for (i, &x) in p.iter().enumerate() {
        if u < x {
            return i;
        }
        u -= x;
    }
    p.len() - 1
}

pub fn synth_topic_corpus(spec: &TopicCorpusSpec) -> TopicCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chi = topic_rows(&mut rng, spec.topics, spec.text_vocab);
    let psi = topic_rows(&mut rng, spec.topics, spec.visual_vocab);
    let gamma = Gamma::new(spec.alpha, 1.0).expect("positive concentration");
    let mut text = Vec::new();
    let mut visual = Vec::new();
    let mut thetas = Vec::new();
    for _ in 0..spec.documents {
        let mut theta: Vec<f64> = (0..spec.topics).map(|_| gamma.sample(&mut rng) + 1e-12).collect();
        let z: f64 = theta.iter().sum();
        theta.iter_mut().for_each(|t| *t /= z);
        let mut bt = vec![0.0; spec.text_vocab];
        for _ in 0..spec.text_len {
            let k = categorical(&mut rng, &theta);
            bt[categorical(&mut rng, &chi.row(k).to_vec())] += 1.0;
        }
        let mut bi = vec![0.0; spec.visual_vocab];
        for _ in 0..spec.visual_len {
            let k = categorical(&mut rng, &theta);
            bi[categorical(&mut rng, &psi.row(k).to_vec())] += 1.0;
        }
        text.push(bt);
        visual.push(bi);
        thetas.push(theta);
    }
    TopicCorpus {
        chi,
        psi,
        text,
        visual,
        theta: thetas,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RelationSet;

    fn small() -> Config {
        Config {
            dim: 16,
            label_dim: 4,
            synth_instances: 60,
            ..Config::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let c = small();
        let a = synth_corpus(&c).unwrap();
        let b = synth_corpus(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.dev.len() + a.test.len(), 60);
        let rel = RelationSet::default();
        for inst in a.all() {
            inst.validate(&rel).unwrap();
            let ann = a.annotation(&inst.id).unwrap();
            assert_eq!(ann.textual.len(), inst.tsg.len());
            assert_eq!(ann.visual.len(), inst.vsg.len());
            assert_eq!(ann.textual.iter().filter(|r| **r == Role::Planted).count(), 1);
        }
        let other = synth_corpus(&Config { seed: 5, ..c }).unwrap();
        assert_ne!(other.train, a.train);
    }

    #[test]
    fn too_few_classes() {
        assert!(synth_corpus(&Config { synth_classes: 1, ..small() }).is_err());
    }

    #[test]
    fn topic_rows_are_distributions() {
        let tc = synth_topic_corpus(&TopicCorpusSpec {
            documents: 10,
            ..TopicCorpusSpec::default()
        });
        for row in tc.chi.rows().into_iter().chain(tc.psi.rows()) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(tc.text[0].iter().sum::<f64>(), 80.0);
    }
}
