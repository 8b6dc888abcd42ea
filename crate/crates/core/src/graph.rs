//! Per-character persona graphs built from consolidated triplets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::triplet::{canonical_text, PersonaTriplet, RelationType};

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

/// Reserved node text for the character itself.
pub const SELF_NODE: &str = "self";

/// Heads folded into [`SELF_NODE`] during consolidation.
pub const FIRST_PERSON_HEADS: [&str; 4] = ["i", "me", "my", SELF_NODE];

/// A triplet with the number of extractions merged into it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SupportedTriplet {
    pub head: String,
    pub relation: RelationType,
    pub tail: String,
    pub support: usize,
    #[serde(default)]
    pub source_ids: Vec<String>,
}

impl SupportedTriplet {
    pub fn key(&self) -> (&str, RelationType, &str) {
        (&self.head, self.relation, &self.tail)
    }

    pub fn triplet(&self) -> PersonaTriplet {
        PersonaTriplet {
            head: self.head.clone(),
            relation: self.relation,
            tail: self.tail.clone(),
            source_id: String::new(),
        }
    }
}

impl From<&PersonaTriplet> for SupportedTriplet {
    fn from(t: &PersonaTriplet) -> Self {
        SupportedTriplet {
            head: t.head.clone(),
            relation: t.relation,
            tail: t.tail.clone(),
            support: 1,
            source_ids: if t.source_id.is_empty() {
                Vec::new()
            } else {
                vec![t.source_id.clone()]
            },
        }
    }
}

fn consolidated_head(head: &str) -> String {
    let head = canonical_text(head);
    if FIRST_PERSON_HEADS.contains(&head.as_str()) {
        SELF_NODE.to_string()
    } else {
        head
    }
}

/// Lowercases, folds first-person heads into `self` and merges duplicates,
/// summing support. Output is sorted by (head, relation, tail).
pub fn consolidate(items: &[SupportedTriplet]) -> Vec<SupportedTriplet> {
    let mut merged: BTreeMap<(String, RelationType, String), (usize, BTreeSet<String>)> =
        BTreeMap::new();
    for t in items {
        let key = (consolidated_head(&t.head), t.relation, canonical_text(&t.tail));
        let entry = merged.entry(key).or_default();
        entry.0 += t.support;
        entry.1.extend(t.source_ids.iter().cloned());
    }
    merged
        .into_iter()
        .map(|((head, relation, tail), (support, sources))| SupportedTriplet {
            head,
            relation,
            tail,
            support,
            source_ids: sources.into_iter().collect(),
        })
        .collect()
}

pub fn consolidate_triplets(triplets: &[PersonaTriplet]) -> Vec<SupportedTriplet> {
    let items: Vec<SupportedTriplet> = triplets.iter().map(SupportedTriplet::from).collect();
    consolidate(&items)
}

/// Short stable id derived from the node text.
pub fn node_id(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    format!("n{}", hex::encode(&digest[..6]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub head: String,
    pub relation: RelationType,
    pub tail: String,
    pub support: usize,
    pub source_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaGraph {
    pub version: u32,
    pub character: String,
    /// Sorted by text.
    pub nodes: Vec<Node>,
    /// Sorted by (head text, relation, tail text); `head`/`tail` are node ids.
    pub edges: Vec<Edge>,
}

impl PersonaGraph {
    pub fn node_text(&self, id: &str) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .map(|n| n.text.as_str())
    }

    /// Edges as (head text, relation, tail text).
    pub fn edge_set(&self) -> BTreeSet<(String, RelationType, String)> {
        let text: BTreeMap<&str, &str> = self
            .nodes
            .iter()
            .map(|n| (n.id.as_str(), n.text.as_str()))
            .collect();
        self.edges
            .iter()
            .map(|e| {
                (
                    text.get(e.head.as_str()).unwrap_or(&"").to_string(),
                    e.relation,
                    text.get(e.tail.as_str()).unwrap_or(&"").to_string(),
                )
            })
            .collect()
    }

    pub fn total_support(&self) -> usize {
        self.edges.iter().map(|e| e.support).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.version != GRAPH_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported graph version {}",
                self.version
            )));
        }
        let ids: BTreeSet<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        if ids.len() != self.nodes.len() {
            return Err(Error::invalid("duplicate node ids"));
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if !ids.contains(e.head.as_str()) || !ids.contains(e.tail.as_str()) {
                return Err(Error::invalid("edge refers to an unknown node"));
            }
            if !e.relation.is_persona() {
                return Err(Error::invalid("graph contains a no_relation edge"));
            }
            if !seen.insert((&e.head, e.relation, &e.tail)) {
                return Err(Error::invalid("duplicate edge"));
            }
        }
        Ok(())
    }
}

/// One node per entity text, one edge per distinct triplet; no_relation
/// triplets are dropped and duplicates merged.
pub fn build_graph(character: &str, triplets: &[SupportedTriplet]) -> PersonaGraph {
    let merged: Vec<SupportedTriplet> = consolidate(triplets)
        .into_iter()
        .filter(|t| t.relation.is_persona())
        .collect();
    let texts: BTreeSet<&str> = merged
        .iter()
        .flat_map(|t| [t.head.as_str(), t.tail.as_str()])
        .collect();
    let nodes = texts
        .into_iter()
        .map(|t| Node {
            id: node_id(t),
            text: t.to_string(),
        })
        .collect();
    let edges = merged
        .iter()
        .map(|t| Edge {
            head: node_id(&t.head),
            relation: t.relation,
            tail: node_id(&t.tail),
            support: t.support,
            source_ids: t.source_ids.clone(),
        })
        .collect();
    PersonaGraph {
        version: GRAPH_SCHEMA_VERSION,
        character: character.to_string(),
        nodes,
        edges,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Dot,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(ExportFormat::Json),
            "dot" => Ok(ExportFormat::Dot),
            other => Err(Error::invalid(format!("unknown graph format `{other}`"))),
        }
    }
}

fn dot_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

pub fn export(graph: &PersonaGraph, format: ExportFormat) -> Result<String> {
    match format {
        ExportFormat::Json => {
            let mut s = serde_json::to_string(&serde_json::to_value(graph)?)?;
            s.push('\n');
            Ok(s)
        }
        ExportFormat::Dot => {
            let mut s = String::new();
            writeln!(s, "digraph {} {{", dot_quote(&graph.character)).unwrap();
            for n in &graph.nodes {
                writeln!(s, "  {} [label={}];", dot_quote(&n.id), dot_quote(&n.text)).unwrap();
            }
            for e in &graph.edges {
                writeln!(
                    s,
                    "  {} -> {} [label={}];",
                    dot_quote(&e.head),
                    dot_quote(&e.tail),
                    dot_quote(e.relation.name())
                )
                .unwrap();
            }
            s.push_str("}\n");
            Ok(s)
        }
    }
}

pub fn import_json(json: &str) -> Result<PersonaGraph> {
    let graph: PersonaGraph = serde_json::from_str(json)?;
    graph.validate()?;
    Ok(graph)
}
