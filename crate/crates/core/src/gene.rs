//! Information-bottleneck graph refinement: differentiable node filtering
//! and edge adjusting, the compressed representation `z`, and its loss.

use crate::autograd::{Mat, Tape, Var};
use crate::cmg::{gat_stack, CrossModalGraph, GatLayerVars};
use crate::error::{Error, Result};
use crate::nn::{normal_init, xavier, LrGroup, ParamId, ParamStore, Session};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const GATE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneConfig {
    pub tau: f64,
    pub beta: f64,
    /// Hops of context used by the gates.
    pub order: usize,
    pub iterations: usize,
    /// π and ε are clamped to `[floor, 1 - floor]` before taking logits.
    pub floor: f64,
}

impl Default for GeneConfig {
    fn default() -> Self {
        GeneConfig {
            tau: 0.1,
            beta: 0.01,
            order: 2,
            iterations: 2,
            floor: GATE_FLOOR,
        }
    }
}

impl GeneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be nonnegative, got {}", self.beta)));
        }
        if self.order < 1 {
            return Err(Error::Config("context order must be at least 1".into()));
        }
        if !(self.floor > 0.0 && self.floor < 0.5) {
            return Err(Error::Config(format!("gate floor {} outside (0, 0.5)", self.floor)));
        }
        Ok(())
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_unit(x: f64, floor: f64, what: &str) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("{what} = {x} is outside [0, 1]")));
    }
    Ok(x.clamp(floor, 1.0 - floor))
}

/// Relaxed Bernoulli sample
/// `ρ = Sigmoid((log(π/(1-π)) + log(ε/(1-ε))) / τ)`.
pub fn concrete_sample(pi: f64, tau: f64, eps: f64) -> Result<f64> {
    concrete_sample_with_floor(pi, tau, eps, GATE_FLOOR)
}

pub fn concrete_sample_with_floor(pi: f64, tau: f64, eps: f64, floor: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    let pi = clamp_unit(pi, floor, "pi")?;
    let eps = clamp_unit(eps, floor, "epsilon")?;
    Ok(sigmoid((logit(pi) + logit(eps)) / tau))
}

/// `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn kl_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Structure("mu and sigma lengths differ".into()));
    }
    let mut kl = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::Domain(format!("sigma {s} must be positive")));
        }
        kl += m * m + s * s - 1.0 - 2.0 * s.ln();
    }
    Ok(0.5 * kl)
}

/// Cross-entropy of softmax(logits) against `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Contract(format!(
            "label {label} outside {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibLoss {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

/// `CE(q(Y|z), Y) + β·KL`. The label-entropy constant is omitted.
pub fn gib_loss(logits: &[f64], label: usize, mu: &[f64], sigma: &[f64], beta: f64) -> Result<GibLoss> {
    let ce = cross_entropy(logits, label)?;
    let kl = kl_gaussian(mu, sigma)?;
    Ok(GibLoss {
        ce,
        kl,
        total: ce + beta * kl,
    })
}

/// Tape form of [`kl_gaussian`] for `1×d` rows.
pub fn kl_tape(tape: &Tape, mu: Var, sigma: Var) -> Var {
    let mu2 = tape.square(mu);
    let s2 = tape.square(sigma);
    let log_s = tape.scale(tape.ln(sigma), 2.0);
    let inner = tape.sub(tape.add(mu2, s2), log_s);
    let inner = tape.add_const(inner, -1.0);
    tape.scale(tape.sum_all(inner), 0.5)
}

/// Tape form of [`cross_entropy`] for a `1×C` logit row.
pub fn cross_entropy_tape(tape: &Tape, logits: Var, label: usize) -> Var {
    let ls = tape.log_softmax_rows(logits);
    tape.scale(tape.select(ls, 0, label), -1.0)
}

/// Gate relaxation on the tape. `u` holds pre-sigmoid gate scores; returns
/// `(π, ρ)` with the same shape.
pub fn concrete_tape(tape: &Tape, u: Var, eps: &Mat, tau: f64, floor: f64) -> (Var, Var) {
    let pi = tape.sigmoid(u);
    let pc = tape.clamp(pi, floor, 1.0 - floor);
    let one_minus = tape.add_const(tape.scale(pc, -1.0), 1.0);
    let log_odds = tape.sub(tape.ln(pc), tape.ln(one_minus));
    let noise = tape.leaf(eps.mapv(|e| {
        let e = e.clamp(floor, 1.0 - floor);
        logit(e)
    }));
    let rho = tape.sigmoid(tape.scale(tape.add(log_odds, noise), 1.0 / tau));
    (pi, rho)
}

/// Parameters of the refinement module, registered in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneParams {
    /// `W₄`, `1 × 2d`.
    pub node_attn: ParamId,
    /// `W₅`, `d × d`.
    pub node_value: ParamId,
    /// `W₆`, `1 × 3d`.
    pub edge_attn: ParamId,
    /// `W₇`, `d × d`.
    pub edge_value: ParamId,
    /// Node gate FFN over `[r; h_s; h_o]`, `1 × 3d` plus bias.
    pub node_gate: ParamId,
    pub node_gate_bias: ParamId,
    pub edge_gate: ParamId,
    pub edge_gate_bias: ParamId,
    /// `μ_z` head, `d_z × 3d`.
    pub mu: ParamId,
    pub mu_bias: ParamId,
    pub sigma: ParamId,
    pub sigma_bias: ParamId,
    /// `q(Y|z)`, `C × d_z`.
    pub classifier: ParamId,
    pub classifier_bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneVars {
    pub node_attn: Var,
    pub node_value: Var,
    pub edge_attn: Var,
    pub edge_value: Var,
    pub node_gate: Var,
    pub node_gate_bias: Var,
    pub edge_gate: Var,
    pub edge_gate_bias: Var,
    pub mu: Var,
    pub mu_bias: Var,
    pub sigma: Var,
    pub sigma_bias: Var,
    pub classifier: Var,
    pub classifier_bias: Var,
}

impl GeneParams {
    /// Gate FFNs start at zero so every π begins at 0.5.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        dim: usize,
        z_dim: usize,
        classes: usize,
    ) -> Self {
        let o = LrGroup::Other;
        GeneParams {
            node_attn: store.add("gene.node_attn", o, normal_init(rng, 1, 2 * dim, 0.1)),
            node_value: store.add("gene.node_value", o, xavier(rng, dim, dim)),
            edge_attn: store.add("gene.edge_attn", o, normal_init(rng, 1, 3 * dim, 0.1)),
            edge_value: store.add("gene.edge_value", o, xavier(rng, dim, dim)),
            node_gate: store.add("gene.node_gate", o, Array2::zeros((1, 3 * dim))),
            node_gate_bias: store.add("gene.node_gate_bias", o, Array2::zeros((1, 1))),
            edge_gate: store.add("gene.edge_gate", o, Array2::zeros((1, 3 * dim))),
            edge_gate_bias: store.add("gene.edge_gate_bias", o, Array2::zeros((1, 1))),
            mu: store.add("gene.mu", o, xavier(rng, z_dim, 3 * dim)),
            mu_bias: store.add("gene.mu_bias", o, Array2::zeros((1, z_dim))),
            sigma: store.add("gene.sigma", o, normal_init(rng, z_dim, 3 * dim, 0.01)),
            // softplus(-2) ≈ 0.127: start with little sampling noise
            sigma_bias: store.add("gene.sigma_bias", o, Array2::from_elem((1, z_dim), -2.0)),
            classifier: store.add("gene.classifier", o, xavier(rng, classes, z_dim)),
            classifier_bias: store.add("gene.classifier_bias", o, Array2::zeros((1, classes))),
        }
    }

    pub fn bind(&self, s: &Session) -> GeneVars {
        GeneVars {
            node_attn: s.param(self.node_attn),
            node_value: s.param(self.node_value),
            edge_attn: s.param(self.edge_attn),
            edge_value: s.param(self.edge_value),
            node_gate: s.param(self.node_gate),
            node_gate_bias: s.param(self.node_gate_bias),
            edge_gate: s.param(self.edge_gate),
            edge_gate_bias: s.param(self.edge_gate_bias),
            mu: s.param(self.mu),
            mu_bias: s.param(self.mu_bias),
            sigma: s.param(self.sigma),
            sigma_bias: s.param(self.sigma_bias),
            classifier: s.param(self.classifier),
            classifier_bias: s.param(self.classifier_bias),
        }
    }

    pub fn z_dim(&self, store: &ParamStore) -> usize {
        store.get(self.mu).nrows()
    }
}

/// Fixed structure the gates are computed over.
#[derive(Clone, Debug, PartialEq)]
pub struct GateStructure {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
    /// `n × n`: node itself plus its l-order neighbourhood.
    pub node_context: Mat,
    /// `|E| × n`: both endpoints plus their l-order neighbourhoods.
    pub edge_context: Mat,
}

impl GateStructure {
    pub fn new(graph: &CrossModalGraph, order: usize) -> Self {
        let n = graph.len();
        let edges = graph.undirected_edges();
        let hoods = graph.neighborhoods(order);
        let mut node_context = Array2::zeros((n, n));
        for i in 0..n {
            node_context[[i, i]] = 1.0;
            for &k in &hoods[i] {
                node_context[[i, k]] = 1.0;
            }
        }
        let mut edge_context = Array2::zeros((edges.len(), n));
        for (e, &(i, j)) in edges.iter().enumerate() {
            for v in [i, j].into_iter().chain(hoods[i].iter().copied()).chain(hoods[j].iter().copied()) {
                edge_context[[e, v]] = 1.0;
            }
        }
        GateStructure {
            nodes: n,
            edges,
            node_context,
            edge_context,
        }
    }

    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        let key = (i.min(j), i.max(j));
        self.edges.binary_search(&key).ok()
    }
}

/// Per-call randomness. Deterministic mode fixes gate noise at 0.5 and the
/// `z` noise at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneNoise {
    pub node: Vec<Mat>,
    pub edge: Vec<Mat>,
    pub z: Mat,
}

impl GeneNoise {
    pub fn deterministic(structure: &GateStructure, iterations: usize, z_dim: usize) -> Self {
        GeneNoise {
            node: vec![Array2::from_elem((structure.nodes, 1), 0.5); iterations],
            edge: vec![Array2::from_elem((structure.edges.len(), 1), 0.5); iterations],
            z: Array2::zeros((1, z_dim)),
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        structure: &GateStructure,
        iterations: usize,
        z_dim: usize,
    ) -> Self {
        let mut uniform = |rows: usize| -> Mat { Array2::from_shape_fn((rows, 1), |_| rng.random::<f64>()) };
        let node = (0..iterations).map(|_| uniform(structure.nodes)).collect();
        let edge = (0..iterations).map(|_| uniform(structure.edges.len())).collect();
        let z = Array2::from_shape_fn((1, z_dim), |_| StandardNormal.sample(rng));
        GeneNoise { node, edge, z }
    }
}

/// Everything the refinement produces on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Refined {
    /// Final-iteration gates; `None` when no iterations ran.
    pub pi_v: Option<Var>,
    pub rho_v: Option<Var>,
    pub pi_e: Option<Var>,
    pub rho_e: Option<Var>,
    pub h_refined: Var,
    pub subject: Var,
    pub object: Var,
    pub pooled: Var,
    pub context: Var,
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
}

/// Mean of the given rows of `h`.
pub fn entity_rep(tape: &Tape, h: Var, rows: &[usize]) -> Var {
    tape.mean_rows(tape.gather_rows(h, rows))
}

/// Gate scores from `[r; h_s; h_o]`: the FFN weight is split into three
/// blocks so the entity terms broadcast over rows.
fn gate_scores(tape: &Tape, r: Var, hs: Var, ho: Var, w: Var, b: Var) -> Var {
    let d = tape.shape(r).1;
    let w_r = tape.slice_cols(w, 0, d);
    let w_s = tape.slice_cols(w, d, 2 * d);
    let w_o = tape.slice_cols(w, 2 * d, 3 * d);
    let shared = tape.add(tape.add(tape.matmul_nt(hs, w_s), tape.matmul_nt(ho, w_o)), b);
    tape.add(tape.matmul_nt(r, w_r), shared)
}

/// `r_i = Tanh(Σ_k α_ik W₅ h_k)` over each node's context, with
/// `α_ik = softmax_k(W₄[h_i; h_k])`.
pub fn node_context_features(tape: &Tape, h: Var, structure: &GateStructure, attn: Var, value: Var) -> Var {
    let d = tape.shape(h).1;
    let a_self = tape.slice_cols(attn, 0, d);
    let a_ctx = tape.slice_cols(attn, d, 2 * d);
    let scores = tape.add(tape.matmul_nt(h, a_self), tape.matmul_nt(a_ctx, h));
    let alpha = tape.masked_softmax_rows(scores, &structure.node_context);
    tape.tanh(tape.matmul(alpha, tape.matmul_nt(h, value)))
}

/// `r_ij = Tanh(Σ_k α_ijk W₇ h_k)` over the joint context of each edge,
/// with `α_ijk = softmax_k(W₆[h_i; h_j; h_k])`.
pub fn edge_context_features(tape: &Tape, h: Var, structure: &GateStructure, attn: Var, value: Var) -> Var {
    let d = tape.shape(h).1;
    let a_i = tape.slice_cols(attn, 0, d);
    let a_j = tape.slice_cols(attn, d, 2 * d);
    let a_k = tape.slice_cols(attn, 2 * d, 3 * d);
    let src: Vec<usize> = structure.edges.iter().map(|e| e.0).collect();
    let dst: Vec<usize> = structure.edges.iter().map(|e| e.1).collect();
    let pi = tape.gather_rows(tape.matmul_nt(h, a_i), &src);
    let pj = tape.gather_rows(tape.matmul_nt(h, a_j), &dst);
    let scores = tape.add(tape.add(pi, pj), tape.matmul_nt(a_k, h));
    let alpha = tape.masked_softmax_rows(scores, &structure.edge_context);
    tape.tanh(tape.matmul(alpha, tape.matmul_nt(h, value)))
}

/// Node gates `(π^v, ρ^v)`, each `n×1`.
pub fn node_gates(
    tape: &Tape,
    h: Var,
    hs: Var,
    ho: Var,
    structure: &GateStructure,
    vars: &GeneVars,
    eps: &Mat,
    config: &GeneConfig,
) -> (Var, Var) {
    let r = node_context_features(tape, h, structure, vars.node_attn, vars.node_value);
    let u = gate_scores(tape, r, hs, ho, vars.node_gate, vars.node_gate_bias);
    concrete_tape(tape, u, eps, config.tau, config.floor)
}

/// Edge gates `(π^e, ρ^e)`, each `|E|×1`.
pub fn edge_gates(
    tape: &Tape,
    h: Var,
    hs: Var,
    ho: Var,
    structure: &GateStructure,
    vars: &GeneVars,
    eps: &Mat,
    config: &GeneConfig,
) -> (Var, Var) {
    if structure.edges.is_empty() {
        let empty = tape.leaf(Array2::zeros((0, 1)));
        return (empty, empty);
    }
    let r = edge_context_features(tape, h, structure, vars.edge_attn, vars.edge_value);
    let u = gate_scores(tape, r, hs, ho, vars.edge_gate, vars.edge_gate_bias);
    concrete_tape(tape, u, eps, config.tau, config.floor)
}

/// Runs the configured refinement iterations and derives `z`.
///
/// Each iteration gates nodes and edges from the current states, forms the
/// effective adjacency `ρ^e_ij·ρ^v_i·ρ^v_j` (self-loops kept at 1), and
/// re-encodes `x` over it. Entity representations are recomputed from the
/// newest states.
#[allow(clippy::too_many_arguments)]
pub fn refine(
    tape: &Tape,
    x: Var,
    h: Var,
    structure: &GateStructure,
    gat: &[GatLayerVars],
    subject_rows: &[usize],
    object_rows: &[usize],
    vars: &GeneVars,
    noise: &GeneNoise,
    config: &GeneConfig,
) -> Refined {
    let mut current = h;
    let mut gates = None;
    for it in 0..config.iterations {
        let hs = entity_rep(tape, current, subject_rows);
        let ho = entity_rep(tape, current, object_rows);
        let (pi_v, rho_v) = node_gates(tape, current, hs, ho, structure, vars, &noise.node[it], config);
        let (pi_e, rho_e) = edge_gates(tape, current, hs, ho, structure, vars, &noise.edge[it], config);
        let adj = tape.gated_adjacency(rho_v, rho_e, &structure.edges);
        current = gat_stack(tape, x, adj, gat);
        gates = Some((pi_v, rho_v, pi_e, rho_e));
    }
    let subject = entity_rep(tape, current, subject_rows);
    let object = entity_rep(tape, current, object_rows);
    let pooled = match gates {
        Some((_, rho_v, _, _)) => {
            let mass = tape.add_const(tape.sum_all(rho_v), 1e-12);
            if tape.scalar(mass) < config.floor {
                // sampled gates collapse routinely at low temperature
                if noise.node.iter().all(|m| m.iter().all(|&e| e == 0.5)) {
                    log::warn!("all node gates collapsed; pooled representation is degenerate");
                } else {
                    log::debug!("sampled node gates collapsed");
                }
            }
            let weighted = tape.matmul(tape.transpose(rho_v), current);
            tape.div(weighted, mass)
        }
        None => tape.mean_rows(current),
    };
    let context = tape.concat_cols(&[pooled, subject, object]);
    let mu = tape.add(tape.matmul_nt(context, vars.mu), vars.mu_bias);
    let sigma = tape.softplus(tape.add(tape.matmul_nt(context, vars.sigma), vars.sigma_bias));
    let eps = tape.leaf(noise.z.clone());
    let z = tape.add(mu, tape.mul(sigma, eps));
    Refined {
        pi_v: gates.map(|g| g.0),
        rho_v: gates.map(|g| g.1),
        pi_e: gates.map(|g| g.2),
        rho_e: gates.map(|g| g.3),
        h_refined: current,
        subject,
        object,
        pooled,
        context,
        mu,
        sigma,
        z,
    }
}

/// `q(Y|z)` logits.
pub fn classify_z(tape: &Tape, z: Var, vars: &GeneVars) -> Var {
    tape.add(tape.matmul_nt(z, vars.classifier), vars.classifier_bias)
}

/// GIB loss on the tape; returns `(total, ce, kl)`.
pub fn gib_loss_tape(tape: &Tape, refined: &Refined, vars: &GeneVars, label: usize, beta: f64) -> (Var, Var, Var) {
    let logits = classify_z(tape, refined.z, vars);
    let ce = cross_entropy_tape(tape, logits, label);
    let kl = kl_tape(tape, refined.mu, refined.sigma);
    (tape.add(ce, tape.scale(kl, beta)), ce, kl)
}

/// Hard-thresholded view of a refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunedGraph {
    pub kept_nodes: Vec<usize>,
    pub kept_edges: Vec<(usize, usize)>,
}

/// Keeps nodes with `ρ^v ≥ 0.5` and edges whose three gates all pass.
pub fn hard_prune(edges: &[(usize, usize)], rho_v: &[f64], rho_e: &[f64]) -> PrunedGraph {
    let on = |x: f64| x >= 0.5;
    let kept_nodes = (0..rho_v.len()).filter(|&i| on(rho_v[i])).collect();
    let kept_edges = edges
        .iter()
        .zip(rho_e)
        .filter(|(&(i, j), &re)| on(re) && on(rho_v[i]) && on(rho_v[j]))
        .map(|(e, _)| *e)
        .collect();
    PrunedGraph {
        kept_nodes,
        kept_edges,
    }
}

/// Effective adjacency in hard mode: thresholds each gate, then multiplies.
pub fn hard_adjacency(n: usize, edges: &[(usize, usize)], rho_v: &[f64], rho_e: &[f64]) -> Mat {
    let b = |x: f64| if x >= 0.5 { 1.0 } else { 0.0 };
    let mut w = Array2::zeros((n, n));
    for (k, &(i, j)) in edges.iter().enumerate() {
        let v = b(rho_e[k]) * b(rho_v[i]) * b(rho_v[j]);
        w[[i, j]] = v;
        w[[j, i]] = v;
    }
    w
}

/// Single-node and single-edge gate queries without a training session.
pub struct GateProbe<'a> {
    pub store: &'a ParamStore,
    pub params: &'a GeneParams,
    pub config: GeneConfig,
}

impl GateProbe<'_> {
    fn run<T>(
        &self,
        h: &Mat,
        hs: &[f64],
        ho: &[f64],
        f: impl FnOnce(&Tape, Var, Var, Var, &GeneVars) -> T,
    ) -> T {
        let session = Session::new(self.store);
        let vars = self.params.bind(&session);
        let t = &session.tape;
        let hv = t.leaf(h.clone());
        let hsv = t.row_leaf(hs);
        let hov = t.row_leaf(ho);
        f(t, hv, hsv, hov, &vars)
    }

    /// `(π^v_i, ρ^v_i)` with gate noise `eps`.
    pub fn node_gate(&self, i: usize, h: &Mat, hs: &[f64], ho: &[f64], structure: &GateStructure, eps: f64) -> Result<(f64, f64)> {
        if i >= structure.nodes {
            return Err(Error::Contract(format!("node {i} out of range")));
        }
        let noise = Array2::from_elem((structure.nodes, 1), eps);
        Ok(self.run(h, hs, ho, |t, hv, hsv, hov, vars| {
            let (pi, rho) = node_gates(t, hv, hsv, hov, structure, vars, &noise, &self.config);
            (t.value(pi)[[i, 0]], t.value(rho)[[i, 0]])
        }))
    }

    /// `(π^e_ij, ρ^e_ij)`; errors when `(i, j)` is not an edge.
    pub fn edge_gate(&self, i: usize, j: usize, h: &Mat, hs: &[f64], ho: &[f64], structure: &GateStructure, eps: f64) -> Result<(f64, f64)> {
        let k = structure
            .edge_index(i, j)
            .ok_or_else(|| Error::Contract(format!("({i}, {j}) is not an edge")))?;
        let noise = Array2::from_elem((structure.edges.len(), 1), eps);
        Ok(self.run(h, hs, ho, |t, hv, hsv, hov, vars| {
            let (pi, rho) = edge_gates(t, hv, hsv, hov, structure, vars, &noise, &self.config);
            (t.value(pi)[[k, 0]], t.value(rho)[[k, 0]])
        }))
    }

    /// Context features `r^v` for all nodes.
    pub fn node_context(&self, h: &Mat, structure: &GateStructure) -> Mat {
        let session = Session::new(self.store);
        let vars = self.params.bind(&session);
        let t = &session.tape;
        let hv = t.leaf(h.clone());
        let r = node_context_features(t, hv, structure, vars.node_attn, vars.node_value);
        let out = t.value(r).to_owned();
        out
    }
}
