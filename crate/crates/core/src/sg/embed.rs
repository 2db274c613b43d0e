use super::graph::{BBox, Modality, NodeKind, SceneGraph};
use super::provider::EmbeddingProvider;
use crate::autograd::Mat;
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Category-label embedding matrix `d₂ × C` plus the name → column map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbeddingTable {
    names: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    pub matrix: Mat,
}

impl LabelEmbeddingTable {
    /// One column per distinct label, initialised from the provider's word
    /// vectors. Labels are deduplicated and sorted.
    pub fn build<'a, I>(labels: I, provider: &dyn EmbeddingProvider) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut names: Vec<String> = labels.into_iter().map(str::to_string).collect();
        names.sort();
        names.dedup();
        let d2 = provider.label_dim();
        let mut matrix = Array2::zeros((d2, names.len()));
        for (c, name) in names.iter().enumerate() {
            for (r, x) in provider.word(name).into_iter().enumerate() {
                matrix[[r, c]] = x;
            }
        }
        Self::from_parts(names, matrix)
    }

    pub fn from_parts(names: Vec<String>, matrix: Mat) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        LabelEmbeddingTable {
            names,
            index,
            matrix,
        }
    }

    /// Restores the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn column(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// The label's vector; zeros for labels outside the table.
    pub fn vector(&self, label: &str) -> Vec<f64> {
        match self.column(label) {
            Some(c) => self.matrix.column(c).to_vec(),
            None => vec![0.0; self.dim()],
        }
    }
}

/// Region feature for every node of a visual graph, in node order.
/// Attribute nodes reuse their object's region; relation nodes use the
/// union box of their two objects.
pub fn visual_region_features(
    graph: &SceneGraph,
    image: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<Vec<f64>>> {
    (0..graph.nodes.len())
        .map(|i| region_feature(graph, i, image, provider))
        .collect()
}

fn object_region(graph: &SceneGraph, id: u32) -> Result<(BBox, &str)> {
    let node = graph
        .node(id)
        .ok_or_else(|| Error::Structure(format!("node {id} does not exist")))?;
    if node.kind != NodeKind::Object {
        return Err(Error::Structure(format!("node {id} is not an object")));
    }
    let region = node
        .region
        .ok_or_else(|| Error::Structure(format!("object node {id} has no region")))?;
    Ok((region, node.label.as_str()))
}

fn region_feature(
    graph: &SceneGraph,
    idx: usize,
    image: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<f64>> {
    let node = &graph.nodes[idx];
    match node.kind {
        NodeKind::Object => {
            let (region, label) = object_region(graph, node.id)?;
            Ok(provider.region(image, &region, label))
        }
        NodeKind::Attribute => {
            let owner = graph.attribute_owner(node.id).ok_or_else(|| {
                Error::Structure(format!("attribute node {} is detached", node.id))
            })?;
            let (region, label) = object_region(graph, owner)?;
            Ok(provider.region(image, &region, label))
        }
        NodeKind::Relation => {
            let (a, b) = graph.relation_endpoints(node.id).ok_or_else(|| {
                Error::Structure(format!("relation node {} lacks endpoints", node.id))
            })?;
            let (ra, _) = object_region(graph, a)?;
            let (rb, _) = object_region(graph, b)?;
            let union = node.region.unwrap_or_else(|| ra.union(&rb));
            Ok(provider.region(image, &union, &node.label))
        }
    }
}

/// `Tanh(W₁·[region; label])` for one node. `w1` is `d₁ × (d₁ + d₂)`.
pub fn fuse_visual_features(w1: &Mat, region: &[f64], label: &[f64]) -> Result<Vec<f64>> {
    let input_dim = region.len() + label.len();
    if w1.ncols() != input_dim {
        return Err(Error::Structure(format!(
            "fusion matrix has {} columns, inputs total {input_dim}",
            w1.ncols()
        )));
    }
    let x: Vec<f64> = region.iter().chain(label).copied().collect();
    Ok(w1
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>().tanh())
        .collect())
}

pub fn embed_visual_node(
    graph: &SceneGraph,
    idx: usize,
    image: &str,
    provider: &dyn EmbeddingProvider,
    labels: &LabelEmbeddingTable,
    w1: &Mat,
) -> Result<Vec<f64>> {
    if graph.modality != Modality::Visual {
        return Err(Error::Structure("expected a visual scene graph".into()));
    }
    let region = region_feature(graph, idx, image, provider)?;
    fuse_visual_features(w1, &region, &labels.vector(&graph.nodes[idx].label))
}

/// Mean of per-token vectors over a half-open span.
pub fn span_mean(token_vectors: &[Vec<f64>], start: usize, end: usize) -> Result<Vec<f64>> {
    if end <= start {
        return Err(Error::Structure(format!("empty span [{start}, {end})")));
    }
    if end > token_vectors.len() {
        return Err(Error::Structure(format!(
            "span [{start}, {end}) exceeds {} tokens",
            token_vectors.len()
        )));
    }
    let dim = token_vectors[start].len();
    let mut out = vec![0.0; dim];
    for v in &token_vectors[start..end] {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
    }
    let n = (end - start) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// One row per textual node: the mean contextual vector over its span.
pub fn embed_textual_nodes(
    graph: &SceneGraph,
    tokens: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<Mat> {
    let vectors = provider.tokens(tokens);
    let mut out = Array2::zeros((graph.nodes.len(), provider.dim()));
    for (i, node) in graph.nodes.iter().enumerate() {
        let span = node
            .span
            .ok_or_else(|| Error::Structure(format!("textual node {} has no span", node.id)))?;
        let row = span_mean(&vectors, span.start, span.end)
            .map_err(|e| Error::Structure(format!("node {}: {e}", node.id)))?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sg::graph::{SgNode, Span};
    use crate::sg::provider::SyntheticProvider;
    use ndarray::array;

    /// Returns fixed token vectors regardless of input.
    struct FixedProvider(Vec<Vec<f64>>);

    impl EmbeddingProvider for FixedProvider {
        fn dim(&self) -> usize {
            self.0[0].len()
        }
        fn label_dim(&self) -> usize {
            1
        }
        fn region(&self, _: &str, _: &BBox, _: &str) -> Vec<f64> {
            vec![0.0; self.dim()]
        }
        fn tokens(&self, tokens: &[String]) -> Vec<Vec<f64>> {
            self.0[..tokens.len()].to_vec()
        }
        fn word(&self, _: &str) -> Vec<f64> {
            vec![1.0]
        }
    }

    fn textual(spans: &[(usize, usize)]) -> SceneGraph {
        SceneGraph {
            modality: Modality::Textual,
            nodes: spans
                .iter()
                .enumerate()
                .map(|(i, &(s, e))| SgNode {
                    id: i as u32,
                    kind: NodeKind::Object,
                    label: format!("w{i}"),
                    region: None,
                    span: Some(Span::new(s, e)),
                })
                .collect(),
            edges: vec![],
        }
    }

    #[test]
    fn zero_fusion_matrix_gives_zero() {
        let w = Array2::zeros((3, 5));
        let out = fuse_visual_features(&w, &[0.3, -0.2, 0.9], &[1.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn label_column_zeroed() {
        let w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let out = fuse_visual_features(&w, &[0.0, 0.0], &[5.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_fusion_hand_value() {
        let w = array![[1.0, 1.0]];
        let out = fuse_visual_features(&w, &[0.5], &[0.5]).unwrap();
        assert!((out[0] - 0.761_594_155_955_764_9).abs() < 1e-12);
    }

    #[test]
    fn textual_span_means() {
        let p = FixedProvider(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let toks: Vec<String> = vec!["a".into(), "b".into()];
        let x = embed_textual_nodes(&textual(&[(0, 1), (0, 2)]), &toks, &p).unwrap();
        assert_eq!(x.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(x.row(1).to_vec(), vec![0.5, 0.5]);
        assert!(embed_textual_nodes(&textual(&[(1, 1)]), &toks, &p).is_err());
        assert!(embed_textual_nodes(&textual(&[(1, 3)]), &toks, &p).is_err());
    }

    #[test]
    fn visual_nodes_resolve_regions() {
        let g = SceneGraph {
            modality: Modality::Visual,
            nodes: vec![
                SgNode {
                    id: 0,
                    kind: NodeKind::Object,
                    label: "man".into(),
                    region: Some(BBox::from([0.0, 0.0, 2.0, 2.0])),
                    span: None,
                },
                SgNode {
                    id: 1,
                    kind: NodeKind::Object,
                    label: "horse".into(),
                    region: Some(BBox::from([1.0, 1.0, 4.0, 3.0])),
                    span: None,
                },
                SgNode {
                    id: 2,
                    kind: NodeKind::Relation,
                    label: "riding".into(),
                    region: None,
                    span: None,
                },
                SgNode {
                    id: 3,
                    kind: NodeKind::Attribute,
                    label: "tall".into(),
                    region: None,
                    span: None,
                },
            ],
            edges: vec![(0, 2), (2, 1), (0, 3)],
        };
        let p = SyntheticProvider::new(0, 8, 4);
        let feats = visual_region_features(&g, "img", &p).unwrap();
        assert_eq!(feats[3], feats[0]);
        let union = BBox::from([0.0, 0.0, 4.0, 3.0]);
        assert_eq!(feats[2], p.region("img", &union, "riding"));

        let labels = LabelEmbeddingTable::build(g.nodes.iter().map(|n| n.label.as_str()), &p);
        assert_eq!(labels.len(), 4);
        let w1 = crate::nn::normal_init(&mut rand::rng(), 8, 12, 3.0);
        for i in 0..4 {
            let v = embed_visual_node(&g, i, "img", &p, &labels, &w1).unwrap();
            assert_eq!(v.len(), 8);
            assert!(v.iter().all(|x| x.abs() < 1.0));
        }

        let mut broken = g.clone();
        broken.nodes[0].region = None;
        assert!(matches!(
            embed_visual_node(&broken, 0, "img", &p, &labels, &w1),
            Err(Error::Structure(_))
        ));
    }
}
