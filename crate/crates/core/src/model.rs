//! The assembled relation-extraction model: feature preparation, the
//! per-instance forward pass and plain-value predictions.

use crate::autograd::{Mat, Tape, Var};
use crate::cmg::{build_cmg, gat_stack, CrossModalGraph, GatLayerVars};
use crate::config::Config;
use crate::corpus::{Instance, RelationSet};
use crate::error::{Error, Result};
use crate::fusion::{classify_tape, entity_rows, integrate_topics_tape, FusionParams, FusionVars, Integrated};
use crate::gene::{
    classify_z, cross_entropy_tape, gib_loss_tape, kl_tape, refine, GateStructure, GeneNoise, GeneParams,
    GeneVars, Refined,
};
use crate::lamo::{
    build_codebook, lamo_loss_tape, top_keywords, topics_tape, Codebook, LamoParams, LamoVars, TopicVars,
    Vocabulary,
};
use crate::nn::{normal_init, xavier, GradBuffer, LrGroup, ParamId, ParamStore, Session};
use crate::sg::{
    embed_textual_nodes, visual_region_features, EmbeddingProvider, LabelEmbeddingTable, NodeKind,
    SceneGraph, SyntheticProvider,
};
use crate::synth::build_provider;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatIds {
    pub attn: ParamId,
    pub value: ParamId,
}

/// Where every tensor lives in the [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `W₁`, `d × (d + d₂)`.
    pub w1: ParamId,
    /// Label embedding table, `d₂ × C_label`.
    pub label_table: ParamId,
    pub gat: Vec<GatIds>,
    pub gene: GeneParams,
    pub lamo: LamoParams,
    pub fusion: FusionParams,
}

impl ModelParams {
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w1, self.label_table];
        for g in &self.gat {
            ids.extend([g.attn, g.value]);
        }
        ids
    }
}

/// Which part of the objective a pass optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GeneWarmup,
    LamoPretrain,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GeneWarmup => "gene-warmup",
            Stage::LamoPretrain => "lamo-pretrain",
            Stage::Joint => "joint",
        }
    }
}

/// Static, parameter-free features of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub label: usize,
    pub textual: Mat,
    pub regions: Mat,
    /// One-hot rows selecting each visual node's label column.
    pub label_select: Mat,
    pub vsg: SceneGraph,
    pub tsg: SceneGraph,
    pub subject_rows: Vec<usize>,
    pub object_rows: Vec<usize>,
    pub text_bow: Vec<f64>,
    pub visual_bow: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub relations: RelationSet,
    pub store: ParamStore,
    pub params: ModelParams,
    pub label_names: Vec<String>,
    pub vocab: Vocabulary,
    pub codebook: Codebook,
    pub provider: SyntheticProvider,
    label_index: BTreeMap<String, usize>,
    keyword_text: Mat,
}

/// Region features of a graph's object nodes, the inputs of the visual
/// vocabulary.
pub fn object_features(inst: &Instance, provider: &dyn EmbeddingProvider) -> Result<Mat> {
    let feats = visual_region_features(&inst.vsg, &inst.image, provider)?;
    let rows: Vec<&Vec<f64>> = inst
        .vsg
        .nodes
        .iter()
        .zip(&feats)
        .filter(|(n, _)| n.kind == NodeKind::Object)
        .map(|(_, f)| f)
        .collect();
    let mut m = Array2::zeros((rows.len(), provider.dim()));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    Ok(m)
}

fn rows_to_mat(rows: &[Vec<f64>], dim: usize) -> Mat {
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    m
}

/// Randomness for one pass. `None` runs deterministically.
pub type PassRng<'a> = Option<&'a mut ChaCha8Rng>;

/// Tape handles and side outputs of one forward pass.
pub struct Forward {
    pub graph: CrossModalGraph,
    pub structure: GateStructure,
    pub h: Var,
    pub refined: Option<Refined>,
    /// `(total, ce, kl)`.
    pub gib: Option<(Var, Var, Var)>,
    pub z_logits: Option<Var>,
    pub topics: Option<TopicVars>,
    /// `(total, kl, rec_t, rec_i)`.
    pub lamo: Option<(Var, Var, Var, Var)>,
    pub keywords: Option<(Vec<usize>, Vec<usize>)>,
    pub integrated: Option<Integrated>,
    pub logits: Option<Var>,
    pub ce: Option<Var>,
    pub loss: Var,
}

struct Bound {
    w1: Var,
    label_table: Var,
    gat: Vec<GatLayerVars>,
    gene: GeneVars,
    lamo: LamoVars,
    fusion: FusionVars,
}

/// Scalar loss components of one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub gib: f64,
    pub gib_ce: f64,
    pub kl: f64,
    pub lamo: f64,
    pub lamo_kl: f64,
    pub rec_t: f64,
    pub rec_i: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.ce += o.ce;
        self.gib += o.gib;
        self.gib_ce += o.gib_ce;
        self.kl += o.kl;
        self.lamo += o.lamo;
        self.lamo_kl += o.lamo_kl;
        self.rec_t += o.rec_t;
        self.rec_i += o.rec_i;
    }

    pub fn scale(&mut self, c: f64) {
        for x in [
            &mut self.total,
            &mut self.ce,
            &mut self.gib,
            &mut self.gib_ce,
            &mut self.kl,
            &mut self.lamo,
            &mut self.lamo_kl,
            &mut self.rec_t,
            &mut self.rec_i,
        ] {
            *x *= c;
        }
    }

    /// Names the first non-finite component.
    pub fn check(&self) -> Result<()> {
        for (name, v) in [
            ("ce", self.ce),
            ("gib", self.gib),
            ("lamo", self.lamo),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    component: name.into(),
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// Plain-value outputs of a deterministic pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub gold: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub z_probs: Vec<f64>,
    pub pi_v: Vec<f64>,
    pub rho_v: Vec<f64>,
    pub pi_e: Vec<f64>,
    pub rho_e: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    /// Mean of `H` over nodes.
    pub h_pool: Vec<f64>,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    pub theta: Vec<f64>,
    pub keywords_text: Vec<usize>,
    pub keywords_visual: Vec<usize>,
    pub hyper_edges: Vec<(usize, usize)>,
    pub losses: LossParts,
}

fn row(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).iter().copied().collect()
}

impl Model {
    /// Builds vocabularies, the codebook and freshly initialised parameters
    /// from the training split. `extra` only contributes label names.
    pub fn build(config: &Config, relations: RelationSet, train: &[Instance], extra: &[Instance]) -> Result<Self> {
        config.validate()?;
        let provider = build_provider(config);
        let vocab = Vocabulary::build(train.iter().map(|i| i.tokens.as_slice()), config.vocab_min_count);
        if vocab.is_empty() {
            return Err(Error::Config("textual vocabulary is empty".into()));
        }
        let mut feats = Vec::new();
        for inst in train {
            let f = object_features(inst, &provider)?;
            feats.extend(f.rows().into_iter().map(|r| r.to_vec()));
        }
        let codebook = build_codebook(&rows_to_mat(&feats, config.dim), config.codebook_size, config.seed)?;
        let table = LabelEmbeddingTable::build(
            train
                .iter()
                .chain(extra)
                .flat_map(|i| i.vsg.nodes.iter().map(|n| n.label.as_str())),
            &provider,
        );
        let label_names = table.names().to_vec();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let mut w1 = Array2::zeros((d, d + config.label_dim));
        w1.slice_mut(s![.., ..d]).assign(&Array2::eye(d));
        w1.slice_mut(s![.., d..]).assign(&normal_init(&mut rng, d, config.label_dim, 0.01));
        let w1 = store.add("encoder.w1", LrGroup::Other, w1);
        let label_table = store.add("encoder.label_table", LrGroup::Pretrained, table.matrix.clone());
        let gat = (0..config.gat_layers)
            .map(|l| GatIds {
                attn: store.add(format!("gat.{l}.attn"), LrGroup::Other, normal_init(&mut rng, 1, 2 * d, 0.1)),
                value: store.add(format!("gat.{l}.value"), LrGroup::Other, xavier(&mut rng, d, d)),
            })
            .collect();
        let z_dim = config.z_dim();
        let classes = relations.len();
        let gene = GeneParams::register(&mut store, &mut rng, d, z_dim, classes);
        let lamo = LamoParams::register(&mut store, &mut rng, d, config.topics, vocab.len(), codebook.size);
        let fusion = FusionParams::register(&mut store, &mut rng, d, z_dim, classes);
        let params = ModelParams {
            w1,
            label_table,
            gat,
            gene,
            lamo,
            fusion,
        };
        Ok(Self::assemble(config.clone(), relations, store, params, label_names, vocab, codebook))
    }

    /// Restores derived lookups around stored state.
    pub fn assemble(
        config: Config,
        relations: RelationSet,
        store: ParamStore,
        params: ModelParams,
        label_names: Vec<String>,
        vocab: Vocabulary,
        codebook: Codebook,
    ) -> Self {
        let provider = build_provider(&config);
        let label_index = label_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let mut keyword_text = Array2::zeros((vocab.len(), config.dim));
        for (i, w) in vocab.words().iter().enumerate() {
            let v = provider.tokens(std::slice::from_ref(w)).remove(0);
            keyword_text.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice()));
        }
        Model {
            config,
            relations,
            store,
            params,
            label_names,
            vocab,
            codebook,
            provider,
            label_index,
            keyword_text,
        }
    }

    pub fn prepare(&self, inst: &Instance) -> Result<Prepared> {
        let label = self
            .relations
            .index(&inst.relation)
            .ok_or_else(|| Error::Validation(format!("unknown relation `{}`", inst.relation)))?;
        let textual = embed_textual_nodes(&inst.tsg, &inst.tokens, &self.provider)?;
        let regions = rows_to_mat(
            &visual_region_features(&inst.vsg, &inst.image, &self.provider)?,
            self.config.dim,
        );
        let mut label_select = Array2::zeros((inst.vsg.len(), self.label_names.len()));
        for (i, n) in inst.vsg.nodes.iter().enumerate() {
            if let Some(&c) = self.label_index.get(&n.label) {
                label_select[[i, c]] = 1.0;
            }
        }
        let spans: Vec<_> = inst.tsg.nodes.iter().map(|n| n.span.expect("validated span")).collect();
        let subject_rows = entity_rows(&spans, inst.subject.span)?;
        let object_rows = entity_rows(&spans, inst.object.span)?;
        let visual_bow = self.codebook.assign(&object_features(inst, &self.provider)?);
        Ok(Prepared {
            id: inst.id.clone(),
            label,
            textual,
            regions,
            label_select,
            vsg: inst.vsg.clone(),
            tsg: inst.tsg.clone(),
            subject_rows,
            object_rows,
            text_bow: self.vocab.bow(&inst.tokens),
            visual_bow,
        })
    }

    /// Prepares every instance, skipping (with a warning) those whose
    /// entities cannot be resolved.
    pub fn prepare_all(&self, corpus: &[Instance]) -> Result<Vec<Prepared>> {
        let mut out = Vec::with_capacity(corpus.len());
        for inst in corpus {
            match self.prepare(inst) {
                Ok(p) => out.push(p),
                Err(Error::Skip(m)) => log::warn!("skipping {}: {m}", inst.id),
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn bind(&self, sess: &Session) -> Bound {
        Bound {
            w1: sess.param(self.params.w1),
            label_table: sess.param(self.params.label_table),
            gat: self
                .params
                .gat
                .iter()
                .map(|g| GatLayerVars {
                    attn: sess.param(g.attn),
                    value: sess.param(g.value),
                })
                .collect(),
            gene: self.params.gene.bind(sess),
            lamo: self.params.lamo.bind(sess),
            fusion: self.params.fusion.bind(sess),
        }
    }

    /// Keyword embeddings `u^T`, `u^I` for the given ids.
    pub fn keyword_embeddings(&self, text: &[usize], visual: &[usize]) -> (Mat, Mat) {
        let d = self.config.dim;
        let mut ut = Array2::zeros((text.len(), d));
        for (r, &i) in text.iter().enumerate() {
            ut.row_mut(r).assign(&self.keyword_text.row(i));
        }
        let mut ui = Array2::zeros((visual.len(), d));
        for (r, &i) in visual.iter().enumerate() {
            ui.row_mut(r).assign(&self.codebook.centroids.row(i));
        }
        (ut, ui)
    }

    /// Records one pass on `sess.tape`. Which losses are built depends on
    /// `stage`; `None` builds everything and uses the joint objective.
    pub fn forward(&self, sess: &Session, p: &Prepared, stage: Option<Stage>, mut rng: PassRng) -> Result<Forward> {
        let t = &sess.tape;
        let b = self.bind(sess);
        let cfg = &self.config;
        let m = p.textual.nrows();
        let n = p.regions.nrows();

        let xt = t.leaf(p.textual.clone());
        let (x, xi_value) = if n > 0 {
            let labels = t.matmul_nt(t.leaf(p.label_select.clone()), b.label_table);
            let input = t.concat_cols(&[t.leaf(p.regions.clone()), labels]);
            let xi = t.tanh(t.matmul_nt(input, b.w1));
            let value = t.value(xi).to_owned();
            (t.concat_rows(&[xt, xi]), value)
        } else {
            (xt, Array2::zeros((0, cfg.dim)))
        };
        let graph = build_cmg(&xi_value, &p.textual, &p.vsg, &p.tsg, cfg.lambda)?;
        let structure = GateStructure::new(&graph, cfg.context_order);
        let adj = t.leaf(graph.message_adjacency());
        let h = gat_stack(t, x, adj, &b.gat);
        debug_assert_eq!(t.shape(h).0, m + n);

        let want_gene = stage != Some(Stage::LamoPretrain);
        let want_lamo = stage != Some(Stage::GeneWarmup);
        let want_fusion = matches!(stage, None | Some(Stage::Joint));

        let mut out = Forward {
            graph,
            structure,
            h,
            refined: None,
            gib: None,
            z_logits: None,
            topics: None,
            lamo: None,
            keywords: None,
            integrated: None,
            logits: None,
            ce: None,
            loss: t.scalar_leaf(0.0),
        };

        if want_gene {
            let gcfg = cfg.gene();
            let z_dim = cfg.z_dim();
            let noise = match rng.as_deref_mut() {
                Some(r) => GeneNoise::sample(r, &out.structure, gcfg.iterations, z_dim),
                None => GeneNoise::deterministic(&out.structure, gcfg.iterations, z_dim),
            };
            let refined = refine(
                t,
                x,
                h,
                &out.structure,
                &b.gat,
                &p.subject_rows,
                &p.object_rows,
                &b.gene,
                &noise,
                &gcfg,
            );
            let z_logits = classify_z(t, refined.z, &b.gene);
            let ce = cross_entropy_tape(t, z_logits, p.label);
            let kl = kl_tape(t, refined.mu, refined.sigma);
            let total = t.add(ce, t.scale(kl, gcfg.beta));
            out.gib = Some((total, ce, kl));
            out.z_logits = Some(z_logits);
            out.refined = Some(refined);
        }
        if want_lamo {
            let k = cfg.topics;
            let eps = match rng {
                Some(r) => Array2::from_shape_fn((1, k), |_| StandardNormal.sample(r)),
                None => Array2::zeros((1, k)),
            };
            let topics = topics_tape(t, h, &eps, &b.lamo);
            out.lamo = Some(lamo_loss_tape(t, &topics, &p.text_bow, &p.visual_bow, &b.lamo));
            out.topics = Some(topics);
        }
        if want_fusion {
            let refined = out.refined.expect("gene built");
            let topics = out.topics.expect("lamo built");
            let theta = row(t, topics.theta);
            let chi = self.store.get(self.params.lamo.chi);
            let psi = self.store.get(self.params.lamo.psi);
            let (kt, kv) = top_keywords(&theta, chi, psi, cfg.keywords);
            let (ut, ui) = self.keyword_embeddings(&kt, &kv);
            let integrated = integrate_topics_tape(t, refined.z, &ut, &ui, &b.fusion);
            let logits = classify_tape(t, integrated.s, &b.fusion);
            out.ce = Some(cross_entropy_tape(t, logits, p.label));
            out.logits = Some(logits);
            out.integrated = Some(integrated);
            out.keywords = Some((kt, kv));
        }

        out.loss = match stage {
            Some(Stage::GeneWarmup) => out.gib.expect("gene built").0,
            Some(Stage::LamoPretrain) => out.lamo.expect("lamo built").0,
            Some(Stage::Joint) | None => {
                let gib = t.scale(out.gib.expect("gene built").0, cfg.eta1);
                let lamo = t.scale(out.lamo.expect("lamo built").0, cfg.eta2);
                t.add(t.add(out.ce.expect("fusion built"), gib), lamo)
            }
        };
        Ok(out)
    }

    fn loss_parts(&self, t: &Tape, f: &Forward) -> LossParts {
        let v = |x: Option<Var>| x.map_or(0.0, |x| t.scalar(x));
        LossParts {
            total: t.scalar(f.loss),
            ce: v(f.ce),
            gib: v(f.gib.map(|g| g.0)),
            gib_ce: v(f.gib.map(|g| g.1)),
            kl: v(f.gib.map(|g| g.2)),
            lamo: v(f.lamo.map(|l| l.0)),
            lamo_kl: v(f.lamo.map(|l| l.1)),
            rec_t: v(f.lamo.map(|l| l.2)),
            rec_i: v(f.lamo.map(|l| l.3)),
        }
    }

    /// Loss and parameter gradients for one instance.
    pub fn instance_gradients(&self, p: &Prepared, stage: Stage, rng: PassRng) -> Result<(LossParts, GradBuffer)> {
        let sess = Session::new(&self.store);
        let f = self.forward(&sess, p, Some(stage), rng)?;
        let parts = self.loss_parts(&sess.tape, &f);
        let grads = sess.tape.backward(f.loss);
        Ok((parts, sess.param_grads(&grads)))
    }

    /// Loss value only, for finite-difference checks.
    pub fn instance_loss(&self, p: &Prepared, stage: Stage, rng: PassRng) -> Result<LossParts> {
        let sess = Session::new(&self.store);
        let f = self.forward(&sess, p, Some(stage), rng)?;
        Ok(self.loss_parts(&sess.tape, &f))
    }

    /// Parameters updated in `stage`.
    pub fn trainable(&self, stage: Stage) -> Vec<ParamId> {
        let p = &self.params;
        let gene: Vec<ParamId> = {
            let g = &p.gene;
            vec![
                g.node_attn,
                g.node_value,
                g.edge_attn,
                g.edge_value,
                g.node_gate,
                g.node_gate_bias,
                g.edge_gate,
                g.edge_gate_bias,
                g.mu,
                g.mu_bias,
                g.sigma,
                g.sigma_bias,
                g.classifier,
                g.classifier_bias,
            ]
        };
        match stage {
            Stage::GeneWarmup => p.encoder_ids().into_iter().chain(gene).collect(),
            Stage::LamoPretrain => p.lamo.ids().to_vec(),
            Stage::Joint => {
                let frozen = if self.config.freeze_topic_words {
                    vec![p.lamo.chi, p.lamo.psi]
                } else {
                    vec![]
                };
                self.store.ids().filter(|id| !frozen.contains(id)).collect()
            }
        }
    }

    /// Deterministic full pass.
    pub fn predict(&self, p: &Prepared) -> Result<Prediction> {
        let sess = Session::new(&self.store);
        let f = self.forward(&sess, p, None, None)?;
        let t = &sess.tape;
        let refined = f.refined.expect("gene built");
        let probs = crate::fusion::classify(&row(t, f.logits.expect("fusion built")));
        let z_probs = crate::fusion::classify(&row(t, f.z_logits.expect("gene built")));
        let col = |v: Option<Var>| v.map(|v| row(t, v)).unwrap_or_default();
        let h_pool = row(t, t.mean_rows(f.h));
        let (kt, kv) = f.keywords.clone().unwrap_or_default();
        Ok(Prediction {
            id: p.id.clone(),
            gold: p.label,
            predicted: crate::fusion::predict(&probs),
            probs,
            z_probs,
            pi_v: col(refined.pi_v),
            rho_v: col(refined.rho_v),
            pi_e: if f.structure.edges.is_empty() { vec![] } else { col(refined.pi_e) },
            rho_e: if f.structure.edges.is_empty() { vec![] } else { col(refined.rho_e) },
            edges: f.structure.edges.clone(),
            h_pool,
            z: row(t, refined.z),
            s: row(t, f.integrated.expect("fusion built").s),
            theta: row(t, f.topics.expect("lamo built").theta),
            keywords_text: kt,
            keywords_visual: kv,
            hyper_edges: f.graph.hyper_edges.clone(),
            losses: self.loss_parts(t, &f),
        })
    }

    pub fn gib_loss_value(&self, p: &Prepared, rng: PassRng) -> Result<f64> {
        let sess = Session::new(&self.store);
        let f = self.forward(&sess, p, Some(Stage::GeneWarmup), rng)?;
        let b = self.bind(&sess);
        let refined = f.refined.expect("gene built");
        let (total, _, _) = gib_loss_tape(&sess.tape, &refined, &b.gene, p.label, self.config.beta);
        Ok(sess.tape.scalar(total))
    }
}

/// Per-instance generator derived from `(seed, stage, epoch, index)`.
pub fn instance_rng(seed: u64, stage: Stage, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = stage as u8;
    key[9..17].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[17..25].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform noise helper for callers that need a fresh generator.
pub fn fresh_rng<R: Rng>(rng: &mut R) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(rng.random())
}
