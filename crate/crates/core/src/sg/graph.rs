use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Object,
    Attribute,
    Relation,
}

impl NodeKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "object" => Some(NodeKind::Object),
            "attribute" => Some(NodeKind::Attribute),
            "relation" => Some(NodeKind::Relation),
            _ => None,
        }
    }
}

/// Pixel-space box `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(b: [f64; 4]) -> Self {
        BBox {
            x0: b[0],
            y0: b[1],
            x1: b[2],
            y1: b[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

/// Half-open token range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for Span {
    fn from(s: [usize; 2]) -> Self {
        Span {
            start: s[0],
            end: s[1],
        }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, other: &Span) -> bool {
        other.start >= self.start && other.end <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgNode {
    pub id: u32,
    pub kind: NodeKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Span>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub modality: Modality,
    pub nodes: Vec<SgNode>,
    pub edges: Vec<(u32, u32)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    DuplicateId,
    DanglingEdge,
    EmptyLabel,
    AttributeDegree,
    RelationDegree,
    MissingRegion,
    MissingSpan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subject {
    Node(u32),
    Edge(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub rule: Rule,
    pub subject: Subject,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.subject {
            Subject::Node(id) => write!(f, "node {id}: {:?}: {}", self.rule, self.message),
            Subject::Edge(i) => write!(f, "edge {i}: {:?}: {}", self.rule, self.message),
        }
    }
}

impl SceneGraph {
    pub fn empty(modality: Modality) -> Self {
        SceneGraph {
            modality,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Position of the node with `id` in `nodes`.
    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn node(&self, id: u32) -> Option<&SgNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Edges as pairs of node positions, dropping dangling ones.
    pub fn index_edges(&self) -> Vec<(usize, usize)> {
        let pos: BTreeMap<u32, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect();
        self.edges
            .iter()
            .filter_map(|(a, b)| Some((*pos.get(a)?, *pos.get(b)?)))
            .collect()
    }

    /// Ids of nodes adjacent to `id`, in edge order, either direction.
    pub fn neighbors(&self, id: u32) -> Vec<u32> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Every invariant violation; empty iff the graph is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                out.push(Violation {
                    rule: Rule::DuplicateId,
                    subject: Subject::Node(n.id),
                    message: "node id appears more than once".into(),
                });
            }
            if n.label.trim().is_empty() {
                out.push(Violation {
                    rule: Rule::EmptyLabel,
                    subject: Subject::Node(n.id),
                    message: "label is empty".into(),
                });
            }
            match self.modality {
                Modality::Visual if n.kind == NodeKind::Object && n.region.is_none() => {
                    out.push(Violation {
                        rule: Rule::MissingRegion,
                        subject: Subject::Node(n.id),
                        message: "visual object node has no region".into(),
                    })
                }
                Modality::Textual if n.span.is_none() => out.push(Violation {
                    rule: Rule::MissingSpan,
                    subject: Subject::Node(n.id),
                    message: "textual node has no span".into(),
                }),
                _ => {}
            }
        }
        let kinds: BTreeMap<u32, NodeKind> = self.nodes.iter().map(|n| (n.id, n.kind)).collect();
        for (i, (a, b)) in self.edges.iter().enumerate() {
            for end in [a, b] {
                if !kinds.contains_key(end) {
                    out.push(Violation {
                        rule: Rule::DanglingEdge,
                        subject: Subject::Edge(i),
                        message: format!("endpoint {end} does not exist"),
                    });
                }
            }
        }
        let is_object = |id: &u32| kinds.get(id) == Some(&NodeKind::Object);
        for n in &self.nodes {
            match n.kind {
                NodeKind::Object => {}
                NodeKind::Attribute => {
                    let incident: Vec<u32> = self.neighbors(n.id);
                    if incident.len() != 1 || !is_object(&incident[0]) {
                        out.push(Violation {
                            rule: Rule::AttributeDegree,
                            subject: Subject::Node(n.id),
                            message: format!(
                                "attribute node needs exactly one edge to an object, has {} incident",
                                incident.len()
                            ),
                        });
                    }
                }
                NodeKind::Relation => {
                    let incoming: Vec<u32> = self
                        .edges
                        .iter()
                        .filter(|e| e.1 == n.id)
                        .map(|e| e.0)
                        .collect();
                    let outgoing: Vec<u32> = self
                        .edges
                        .iter()
                        .filter(|e| e.0 == n.id)
                        .map(|e| e.1)
                        .collect();
                    let ok = incoming.len() == 1
                        && outgoing.len() == 1
                        && is_object(&incoming[0])
                        && is_object(&outgoing[0]);
                    if !ok {
                        out.push(Violation {
                            rule: Rule::RelationDegree,
                            subject: Subject::Node(n.id),
                            message: format!(
                                "relation node needs one incoming and one outgoing object edge, has {} in / {} out",
                                incoming.len(),
                                outgoing.len()
                            ),
                        });
                    }
                }
            }
        }
        out
    }

    /// The two object ids a relation node connects, `(subject, object)`.
    pub fn relation_endpoints(&self, id: u32) -> Option<(u32, u32)> {
        let from = self.edges.iter().find(|e| e.1 == id)?.0;
        let to = self.edges.iter().find(|e| e.0 == id)?.1;
        Some((from, to))
    }

    /// The object an attribute node hangs off.
    pub fn attribute_owner(&self, id: u32) -> Option<u32> {
        self.neighbors(id).into_iter().next()
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("scene graph serializes")
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("scene graph serializes")
    }

    /// Parses and validates one record.
    pub fn from_json(v: &Value) -> Result<Self> {
        parse_scene_graph(v)
    }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str, path: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::parse(format!("{path}{name}"), "missing"))
}

fn as_u32(v: &Value, path: &str) -> Result<u32> {
    v.as_u64()
        .and_then(|x| u32::try_from(x).ok())
        .ok_or_else(|| Error::parse(path, format!("expected a nonnegative integer, got {v}")))
}

fn parse_node(v: &Value, path: &str) -> Result<SgNode> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::parse(path, "expected an object"))?;
    let p = format!("{path}.");
    let id = as_u32(field(obj, "id", &p)?, &format!("{p}id"))?;
    let kind_s = field(obj, "kind", &p)?
        .as_str()
        .ok_or_else(|| Error::parse(format!("{p}kind"), "expected a string"))?;
    let kind = NodeKind::parse(kind_s).ok_or_else(|| {
        Error::parse(
            format!("{p}kind"),
            format!("unknown kind `{kind_s}`, expected object|attribute|relation"),
        )
    })?;
    let label = field(obj, "label", &p)?
        .as_str()
        .ok_or_else(|| Error::parse(format!("{p}label"), "expected a string"))?
        .to_string();
    let region = match obj.get("region") {
        None | Some(Value::Null) => None,
        Some(r) => {
            let arr = r
                .as_array()
                .filter(|a| a.len() == 4)
                .ok_or_else(|| Error::parse(format!("{p}region"), "expected [x0,y0,x1,y1]"))?;
            let mut b = [0.0; 4];
            for (k, x) in arr.iter().enumerate() {
                b[k] = x
                    .as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::parse(format!("{p}region[{k}]"), "expected a number"))?;
            }
            Some(BBox::from(b))
        }
    };
    let span = match obj.get("span") {
        None | Some(Value::Null) => None,
        Some(s) => {
            let arr = s
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| Error::parse(format!("{p}span"), "expected [start,end]"))?;
            let start = arr[0]
                .as_u64()
                .ok_or_else(|| Error::parse(format!("{p}span[0]"), "expected an integer"))?;
            let end = arr[1]
                .as_u64()
                .ok_or_else(|| Error::parse(format!("{p}span[1]"), "expected an integer"))?;
            Some(Span::new(start as usize, end as usize))
        }
    };
    Ok(SgNode {
        id,
        kind,
        label,
        region,
        span,
    })
}

/// Parses one scene-graph record and checks every graph invariant.
pub fn parse_scene_graph(v: &Value) -> Result<SceneGraph> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::parse("<root>", "expected an object"))?;
    let modality = match field(obj, "modality", "")?.as_str() {
        Some("visual") => Modality::Visual,
        Some("textual") => Modality::Textual,
        _ => {
            return Err(Error::parse(
                "modality",
                "expected \"visual\" or \"textual\"",
            ))
        }
    };
    let nodes = field(obj, "nodes", "")?
        .as_array()
        .ok_or_else(|| Error::parse("nodes", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(i, n)| parse_node(n, &format!("nodes[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let edges = field(obj, "edges", "")?
        .as_array()
        .ok_or_else(|| Error::parse("edges", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let pair = e
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| Error::parse(format!("edges[{i}]"), "expected [src,dst]"))?;
            Ok((
                as_u32(&pair[0], &format!("edges[{i}][0]"))?,
                as_u32(&pair[1], &format!("edges[{i}][1]"))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let graph = SceneGraph {
        modality,
        nodes,
        edges,
    };
    let violations = graph.validate();
    if violations.is_empty() {
        Ok(graph)
    } else {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        Err(Error::Validation(msgs.join("; ")))
    }
}

pub fn parse_scene_graph_str(s: &str) -> Result<SceneGraph> {
    let v: Value = serde_json::from_str(s)?;
    parse_scene_graph(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn triple() -> Value {
        json!({
            "modality": "visual",
            "nodes": [
                {"id": 0, "kind": "object", "label": "man", "region": [0, 0, 10, 10]},
                {"id": 1, "kind": "object", "label": "horse", "region": [5, 5, 20, 20]},
                {"id": 2, "kind": "relation", "label": "riding"}
            ],
            "edges": [[0, 2], [2, 1]]
        })
    }

    #[test]
    fn empty_graph_is_valid() {
        let g = parse_scene_graph(&json!({"modality": "textual", "nodes": [], "edges": []})).unwrap();
        assert!(g.is_empty());
        assert!(g.validate().is_empty());
    }

    #[test]
    fn minimal_relation_triple_is_valid() {
        let g = parse_scene_graph(&triple()).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.relation_endpoints(2), Some((0, 1)));
    }

    #[test]
    fn relation_with_two_outgoing_edges_is_rejected() {
        let mut doc = triple();
        doc["edges"] = json!([[2, 0], [2, 1]]);
        let err = parse_scene_graph(&doc).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("RelationDegree")));
    }

    #[test]
    fn dangling_edge_names_edge_index() {
        let mut doc = triple();
        doc["edges"] = json!([[0, 2], [2, 1], [0, 99]]);
        let err = parse_scene_graph(&doc).unwrap_err().to_string();
        assert!(err.contains("edge 2"), "{err}");
    }

    #[test]
    fn schema_error_names_field() {
        let mut doc = triple();
        doc["nodes"][1]["kind"] = json!("thing");
        let err = parse_scene_graph(&doc).unwrap_err();
        match err {
            Error::Parse { field, .. } => assert_eq!(field, "nodes[1].kind"),
            other => panic!("unexpected {other:?}"),
        }
        let mut doc = triple();
        doc["nodes"][0].as_object_mut().unwrap().remove("label");
        match parse_scene_graph(&doc).unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "nodes[0].label"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_reports_each_rule() {
        let g = parse_scene_graph(&triple()).unwrap();
        assert!(g.validate().is_empty());

        let mut bad = g.clone();
        bad.edges.push((0, 99));
        let v = bad.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::DanglingEdge);
        assert_eq!(v[0].subject, Subject::Edge(2));

        let mut attr = g.clone();
        attr.nodes.push(SgNode {
            id: 3,
            kind: NodeKind::Attribute,
            label: "brown".into(),
            region: None,
            span: None,
        });
        attr.edges.push((3, 1));
        attr.edges.push((3, 0));
        let v = attr.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::AttributeDegree);
        assert_eq!(v[0].subject, Subject::Node(3));
    }

    #[test]
    fn missing_region_and_span_are_reported() {
        let mut g = parse_scene_graph(&triple()).unwrap();
        g.nodes[0].region = None;
        assert_eq!(g.validate()[0].rule, Rule::MissingRegion);

        let t = SceneGraph {
            modality: Modality::Textual,
            nodes: vec![SgNode {
                id: 0,
                kind: NodeKind::Object,
                label: "dog".into(),
                region: None,
                span: None,
            }],
            edges: vec![],
        };
        assert_eq!(t.validate()[0].rule, Rule::MissingSpan);
    }

    #[test]
    fn json_roundtrip() {
        let g = parse_scene_graph(&triple()).unwrap();
        let back = parse_scene_graph_str(&g.to_json_line()).unwrap();
        assert_eq!(g, back);
    }
}
