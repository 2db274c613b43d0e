//! Instance records: one JSON object per line, shaped like the public MRE
//! release (`token`, `h`/`t` with `pos`, `relation`, `img_id`) plus the two
//! pre-parsed scene graphs.

use crate::error::{Error, Result};
use crate::sg::{parse_scene_graph, Modality, SceneGraph, Span};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// The 23 relation labels of the MRE benchmark; index 0 is `None`.
pub const MRE_RELATIONS: [&str; 23] = [
    "None",
    "/per/per/parent",
    "/per/per/siblings",
    "/per/per/couple",
    "/per/per/neighbor",
    "/per/per/peer",
    "/per/per/charges",
    "/per/per/alumi",
    "/per/per/alternate_names",
    "/per/org/member_of",
    "/per/loc/place_of_residence",
    "/per/loc/place_of_birth",
    "/org/org/alternate_names",
    "/org/org/subsidiary",
    "/org/loc/locate_at",
    "/loc/loc/contain",
    "/per/misc/present_in",
    "/per/misc/awarded",
    "/per/misc/race",
    "/per/misc/religion",
    "/per/misc/nationality",
    "/misc/misc/part_of",
    "/misc/loc/held_on",
];

pub const NONE_LABEL: &str = "None";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSet {
    labels: Vec<String>,
}

impl Default for RelationSet {
    fn default() -> Self {
        RelationSet {
            labels: MRE_RELATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl RelationSet {
    pub fn new(labels: Vec<String>) -> Self {
        RelationSet { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn none_index(&self) -> Option<usize> {
        self.index(NONE_LABEL)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.labels[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    pub image: String,
    pub vsg: SceneGraph,
    pub tsg: SceneGraph,
    pub subject: Entity,
    pub object: Entity,
    pub relation: String,
}

impl Instance {
    pub fn to_json(&self) -> Value {
        let ent = |e: &Entity| json!({"name": e.name, "pos": [e.span.start, e.span.end]});
        json!({
            "id": self.id,
            "token": self.tokens,
            "h": ent(&self.subject),
            "t": ent(&self.object),
            "relation": self.relation,
            "img_id": self.image,
            "vsg": self.vsg.to_json(),
            "tsg": self.tsg.to_json(),
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_json()).expect("instance serializes")
    }

    /// Structural checks against the relation set.
    pub fn validate(&self, relations: &RelationSet) -> Result<()> {
        if relations.index(&self.relation).is_none() {
            return Err(Error::Validation(format!("unknown relation label `{}`", self.relation)));
        }
        let n = self.tokens.len();
        for (which, e) in [("h", &self.subject), ("t", &self.object)] {
            if e.span.is_empty() || e.span.end > n {
                return Err(Error::Validation(format!(
                    "{which}.pos [{}, {}) is not inside {n} tokens",
                    e.span.start, e.span.end
                )));
            }
        }
        if self.vsg.modality != Modality::Visual || self.tsg.modality != Modality::Textual {
            return Err(Error::Validation("vsg/tsg modalities are swapped".into()));
        }
        for g in [&self.vsg, &self.tsg] {
            if let Some(v) = g.validate().first() {
                return Err(Error::Validation(v.to_string()));
            }
        }
        for node in &self.tsg.nodes {
            match node.span {
                Some(s) if !s.is_empty() && s.end <= n => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "textual node {} span is missing or outside {n} tokens",
                        node.id
                    )))
                }
            }
        }
        Ok(())
    }
}

fn field<'a>(v: &'a Value, name: &str) -> Result<&'a Value> {
    v.get(name)
        .ok_or_else(|| Error::parse(name, "missing"))
}

fn string_field(v: &Value, name: &str) -> Result<String> {
    field(v, name)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::parse(name, "expected a string"))
}

fn entity(v: &Value, name: &str) -> Result<Entity> {
    let e = field(v, name)?;
    let ename = e
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::parse(format!("{name}.name"), "expected a string"))?;
    let pos = e
        .get("pos")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
        .ok_or_else(|| Error::parse(format!("{name}.pos"), "expected [start, end]"))?;
    Ok(Entity {
        name: ename.to_string(),
        span: Span::new(pos.0, pos.1),
    })
}

/// Parses one record. Scene graphs come from the record itself or, when
/// absent there, from `graphs` keyed by instance id.
pub fn parse_instance(v: &Value, graphs: Option<&BTreeMap<String, (Value, Value)>>) -> Result<Instance> {
    let id = match field(v, "id")? {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => return Err(Error::parse("id", "expected a string or number")),
    };
    let tokens = field(v, "token")?
        .as_array()
        .ok_or_else(|| Error::parse("token", "expected an array"))?
        .iter()
        .map(|t| t.as_str().map(str::to_string))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::parse("token", "expected strings"))?;
    let (vsg_v, tsg_v) = match (v.get("vsg"), v.get("tsg")) {
        (Some(a), Some(b)) => (a.clone(), b.clone()),
        _ => graphs
            .and_then(|g| g.get(&id))
            .cloned()
            .ok_or_else(|| Error::parse("vsg", format!("no scene graphs for instance {id}")))?,
    };
    let vsg = parse_scene_graph(&vsg_v).map_err(|e| nest("vsg", e))?;
    let tsg = parse_scene_graph(&tsg_v).map_err(|e| nest("tsg", e))?;
    Ok(Instance {
        id,
        tokens,
        image: string_field(v, "img_id")?,
        vsg,
        tsg,
        subject: entity(v, "h")?,
        object: entity(v, "t")?,
        relation: string_field(v, "relation")?,
    })
}

fn nest(prefix: &str, e: Error) -> Error {
    match e {
        Error::Parse { field, message } => Error::Parse {
            field: format!("{prefix}.{field}"),
            message,
        },
        Error::Validation(m) => Error::Validation(format!("{prefix}: {m}")),
        other => other,
    }
}

/// Parses and validates a whole JSONL document.
pub fn parse_corpus(text: &str, relations: &RelationSet) -> Result<Vec<Instance>> {
    parse_corpus_with_graphs(text, None, relations)
}

pub fn parse_corpus_with_graphs(
    text: &str,
    graphs: Option<&BTreeMap<String, (Value, Value)>>,
    relations: &RelationSet,
) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let wrap = |e: Error| Error::Corpus {
            line: i + 1,
            message: e.to_string(),
        };
        let v: Value = serde_json::from_str(line).map_err(|e| wrap(e.into()))?;
        let inst = parse_instance(&v, graphs).map_err(wrap)?;
        inst.validate(relations).map_err(wrap)?;
        out.push(inst);
    }
    Ok(out)
}

/// Scene graphs stored apart from the instances:
/// `{"id": ..., "vsg": {...}, "tsg": {...}}` per line.
pub fn parse_graph_file(text: &str) -> Result<BTreeMap<String, (Value, Value)>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::Corpus { line: i + 1, message: m };
        let v: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let id = match v.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(err("missing id".into())),
        };
        let vsg = v.get("vsg").cloned().ok_or_else(|| err("missing vsg".into()))?;
        let tsg = v.get("tsg").cloned().ok_or_else(|| err("missing tsg".into()))?;
        out.insert(id, (vsg, tsg));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, relations: &RelationSet) -> Result<Vec<Instance>> {
    let text = std::fs::read_to_string(path)?;
    let corpus = parse_corpus(&text, relations)?;
    let s = summarize(&corpus);
    log::info!(
        "{}: {} sentences, {} instances",
        path.display(),
        s.sentences,
        s.instances
    );
    Ok(corpus)
}

pub fn write_corpus(instances: &[Instance]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&inst.to_json_line());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub instances: usize,
    /// Distinct token sequences.
    pub sentences: usize,
    pub images: usize,
    pub relations: BTreeMap<String, usize>,
}

pub fn summarize(corpus: &[Instance]) -> CorpusSummary {
    let sentences: BTreeSet<&[String]> = corpus.iter().map(|i| i.tokens.as_slice()).collect();
    let images: BTreeSet<&str> = corpus.iter().map(|i| i.image.as_str()).collect();
    let mut relations = BTreeMap::new();
    for i in corpus {
        *relations.entry(i.relation.clone()).or_default() += 1;
    }
    CorpusSummary {
        instances: corpus.len(),
        sentences: sentences.len(),
        images: images.len(),
        relations,
    }
}
