//! Scene graphs for one modality: data model, file format, validation and
//! node feature assembly.

mod embed;
mod graph;
mod provider;

pub use embed::{
    embed_textual_nodes, embed_visual_node, fuse_visual_features, span_mean,
    visual_region_features, LabelEmbeddingTable,
};
pub use graph::{
    parse_scene_graph, parse_scene_graph_str, BBox, Modality, NodeKind, Rule, SceneGraph, SgNode,
    Span, Subject, Violation,
};
pub use provider::{hash_unit_vector, normalize, EmbeddingProvider, SyntheticProvider};
