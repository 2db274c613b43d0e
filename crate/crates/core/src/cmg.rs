//! Cross-modal graph: the union of a textual and a visual scene graph joined
//! by similarity hyper-edges, and the graph-attention encoder over it.

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::sg::{Modality, NodeKind, SceneGraph};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, VecDeque};

pub const DEFAULT_LAMBDA: f64 = 0.25;
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Structure(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Pairs `(visual row, textual row)` whose cosine is at least `lambda`.
/// Zero rows never match.
pub fn hyper_edges(visual: &Mat, textual: &Mat, lambda: f64) -> Vec<(usize, usize)> {
    if visual.nrows() == 0 || textual.nrows() == 0 {
        return Vec::new();
    }
    let unit = |m: &Mat| -> Mat {
        let mut m = m.clone();
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|x| x / n);
            } else {
                row.fill(f64::NAN);
            }
        }
        m
    };
    let (vu, tu) = (unit(visual), unit(textual));
    let sims = vu.dot(&tu.t());
    let mut out = Vec::new();
    for i in 0..sims.nrows() {
        for j in 0..sims.ncols() {
            let s = sims[[i, j]];
            if !s.is_nan() && s.min(1.0) >= lambda {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmgNode {
    pub modality: Modality,
    pub kind: NodeKind,
    pub label: String,
    /// Id in the source scene graph.
    pub source_id: u32,
}

/// Textual nodes occupy indices `0..m`, visual nodes `m..m+n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossModalGraph {
    pub nodes: Vec<CmgNode>,
    pub textual_count: usize,
    pub visual_count: usize,
    /// Directed intra-modal edges, CMG indices.
    pub textual_edges: Vec<(usize, usize)>,
    pub visual_edges: Vec<(usize, usize)>,
    /// `(visual index, textual index)`, CMG indices.
    pub hyper_edges: Vec<(usize, usize)>,
    pub lambda: f64,
    /// Node features at construction time.
    pub features: Mat,
}

impl CrossModalGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_visual(&self, i: usize) -> bool {
        i >= self.textual_count
    }

    /// Every edge as an unordered pair `(lo, hi)`, deduplicated, self-pairs
    /// removed. This is the edge set that gets gated.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<(usize, usize)> = self
            .textual_edges
            .iter()
            .chain(&self.visual_edges)
            .chain(&self.hyper_edges)
            .filter(|(a, b)| a != b)
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .collect();
        set.into_iter().collect()
    }

    /// Symmetric 0/1 indicator `e_ij`, zero diagonal.
    pub fn adjacency(&self) -> Mat {
        let n = self.len();
        let mut a = Array2::zeros((n, n));
        for (i, j) in self.undirected_edges() {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        a
    }

    /// Adjacency with self-loops, as used for message passing.
    pub fn message_adjacency(&self) -> Mat {
        let mut a = self.adjacency();
        for i in 0..self.len() {
            a[[i, i]] = 1.0;
        }
        a
    }

    /// Nodes within `order` hops of each node, excluding the node itself.
    pub fn neighborhoods(&self, order: usize) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut adj = vec![Vec::new(); n];
        for (i, j) in self.undirected_edges() {
            adj[i].push(j);
            adj[j].push(i);
        }
        (0..n)
            .map(|src| {
                let mut depth = vec![usize::MAX; n];
                depth[src] = 0;
                let mut queue = VecDeque::from([src]);
                while let Some(u) = queue.pop_front() {
                    if depth[u] == order {
                        continue;
                    }
                    for &v in &adj[u] {
                        if depth[v] == usize::MAX {
                            depth[v] = depth[u] + 1;
                            queue.push_back(v);
                        }
                    }
                }
                (0..n)
                    .filter(|&v| v != src && depth[v] != usize::MAX)
                    .collect()
            })
            .collect()
    }

    /// CMG index of a textual node by its scene-graph id.
    pub fn textual_index(&self, source_id: u32) -> Option<usize> {
        (0..self.textual_count).find(|&i| self.nodes[i].source_id == source_id)
    }

    pub fn visual_index(&self, source_id: u32) -> Option<usize> {
        (self.textual_count..self.len()).find(|&i| self.nodes[i].source_id == source_id)
    }
}

/// Assembles the cross-modal graph. Rows of the embedding matrices follow
/// node order in the respective scene graph.
pub fn build_cmg(
    vsg_embeddings: &Mat,
    tsg_embeddings: &Mat,
    vsg: &SceneGraph,
    tsg: &SceneGraph,
    lambda: f64,
) -> Result<CrossModalGraph> {
    if vsg_embeddings.nrows() != vsg.len() || tsg_embeddings.nrows() != tsg.len() {
        return Err(Error::Structure(format!(
            "embedding rows ({}, {}) do not match node counts ({}, {})",
            vsg_embeddings.nrows(),
            tsg_embeddings.nrows(),
            vsg.len(),
            tsg.len()
        )));
    }
    if !vsg.is_empty() && !tsg.is_empty() && vsg_embeddings.ncols() != tsg_embeddings.ncols() {
        return Err(Error::Structure(format!(
            "visual embeddings are {}-d but textual are {}-d",
            vsg_embeddings.ncols(),
            tsg_embeddings.ncols()
        )));
    }
    let m = tsg.len();
    let dim = if m > 0 {
        tsg_embeddings.ncols()
    } else {
        vsg_embeddings.ncols()
    };
    let mut nodes = Vec::with_capacity(m + vsg.len());
    for (g, modality) in [(tsg, Modality::Textual), (vsg, Modality::Visual)] {
        for n in &g.nodes {
            nodes.push(CmgNode {
                modality,
                kind: n.kind,
                label: n.label.clone(),
                source_id: n.id,
            });
        }
    }
    let textual_edges = tsg.index_edges();
    let visual_edges = vsg
        .index_edges()
        .into_iter()
        .map(|(a, b)| (a + m, b + m))
        .collect();
    let hyper = hyper_edges(vsg_embeddings, tsg_embeddings, lambda)
        .into_iter()
        .map(|(v, t)| (v + m, t))
        .collect();
    let mut features = Array2::zeros((m + vsg.len(), dim));
    if m > 0 {
        features.slice_mut(ndarray::s![..m, ..]).assign(tsg_embeddings);
    }
    if !vsg.is_empty() {
        features.slice_mut(ndarray::s![m.., ..]).assign(vsg_embeddings);
    }
    Ok(CrossModalGraph {
        nodes,
        textual_count: m,
        visual_count: vsg.len(),
        textual_edges,
        visual_edges,
        hyper_edges: hyper,
        lambda,
        features,
    })
}

/// One attention layer: `W₂` is `1 × 2d` (scores `[x_i; x_j]`), `W₃` is
/// `d_out × d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub attn: Mat,
    pub value: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatParams {
    pub layers: Vec<GatLayer>,
}

#[derive(Clone, Copy, Debug)]
pub struct GatLayerVars {
    pub attn: Var,
    pub value: Var,
}

/// `α_ij ∝ w_ij·exp(LeakyReLU(W₂[x_i; x_j]))`, `h_i = ReLU(Σ_j α_ij W₃ x_j)`.
/// `adj` holds the nonnegative neighbour weights (0/1 for a plain graph).
/// Returns `(H, α)`.
pub fn gat_layer(tape: &Tape, x: Var, adj: Var, layer: GatLayerVars) -> (Var, Var) {
    let d = tape.shape(x).1;
    let a_self = tape.slice_cols(layer.attn, 0, d);
    let a_nbr = tape.slice_cols(layer.attn, d, 2 * d);
    let left = tape.matmul_nt(x, a_self); // n×1
    let right = tape.matmul_nt(a_nbr, x); // 1×n
    let scores = tape.leaky_relu(tape.add(left, right), LEAKY_SLOPE);
    let alpha = tape.weighted_softmax_rows(scores, adj);
    let values = tape.matmul_nt(x, layer.value);
    let h = tape.relu(tape.matmul(alpha, values));
    (h, alpha)
}

pub fn gat_stack(tape: &Tape, x: Var, adj: Var, layers: &[GatLayerVars]) -> Var {
    layers
        .iter()
        .fold(x, |h, layer| gat_layer(tape, h, adj, *layer).0)
}

/// Encodes the graph with self-loops and symmetrised edges.
pub fn gat_forward(graph: &CrossModalGraph, x: &Mat, params: &GatParams) -> Result<Mat> {
    if x.nrows() != graph.len() {
        return Err(Error::Structure(format!(
            "feature matrix has {} rows for {} nodes",
            x.nrows(),
            graph.len()
        )));
    }
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let adj = tape.leaf(graph.message_adjacency());
    let layers: Vec<GatLayerVars> = params
        .layers
        .iter()
        .map(|l| GatLayerVars {
            attn: tape.leaf(l.attn.clone()),
            value: tape.leaf(l.value.clone()),
        })
        .collect();
    let h = gat_stack(&tape, xv, adj, &layers);
    let out = tape.value(h).to_owned();
    Ok(out)
}

/// Attention weights of the first layer; rows sum to one.
pub fn gat_attention(graph: &CrossModalGraph, x: &Mat, layer: &GatLayer) -> Mat {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let adj = tape.leaf(graph.message_adjacency());
    let vars = GatLayerVars {
        attn: tape.leaf(layer.attn.clone()),
        value: tape.leaf(layer.value.clone()),
    };
    let (_, alpha) = gat_layer(&tape, xv, adj, vars);
    let out = tape.value(alpha).to_owned();
    out
}

/// Row sums, used by invariants on attention matrices.
pub fn row_sums(m: &Mat) -> Vec<f64> {
    m.sum_axis(Axis(1)).to_vec()
}
