//! Entity/relationship graph construction, community detection and
//! community reports.
//!
//! Pipeline: [`extract_elements`] per chunk → [`merge_elements`] →
//! [`leiden_partition`] → [`summarize_communities`] → [`export_graph`].

mod export;
mod extract;
pub mod leiden;
mod merge;
mod modularity;
mod reports;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_client::ModelError;

pub use export::{export_graph, load_graph, load_reports, save_reports, GraphFiles, COMMUNITIES_FILE, ENTITIES_FILE, RELATIONSHIPS_FILE, REPORTS_FILE};
pub use extract::{extract_all, extract_elements, parse_records, Extraction, RawEntity, RawRelationship};
pub use leiden::{assignments_from_levels, leiden_partition, run_leiden, CommunityHierarchy, LeidenConfig, LeidenRun, PhaseQuality, WeightedGraph};
pub use merge::{merge_elements, MergeStats};
pub use modularity::modularity;
pub use reports::{community_context, parse_report, summarize_communities, ReportFailure, SummaryOutcome};

pub const DEFAULT_MAX_GLEANINGS: usize = 2;
pub const DEFAULT_RESOLUTION: f64 = 1.0;
pub const DEFAULT_SUMMARY_CHAR_BUDGET: usize = 2000;
pub const DEFAULT_REPORT_LEVELS: [usize; 2] = [0, 1];

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("graph is empty")]
    EmptyGraph,
    #[error(transparent)]
    Provider(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed artifact {file}: {reason}")]
    MalformedArtifact { file: String, reason: String },
}

/// Trim, collapse internal whitespace, upper-case, drop wrapping quotes.
pub fn canonical_name(raw: &str) -> String {
    raw.trim()
        .trim_matches(|c| c == '"' || c == '\'')
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_uppercase()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub entity_type: String,
    pub description: String,
    pub source_chunk_ids: BTreeSet<String>,
    pub mention_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relationship {
    /// Lexicographically smaller endpoint.
    pub source: String,
    pub target: String,
    pub description: String,
    pub weight: f64,
    pub source_chunk_ids: BTreeSet<String>,
    pub mention_count: usize,
}

impl Relationship {
    /// `SOURCE|TARGET`, usable as a stable identifier in traces.
    pub fn id(&self) -> String {
        relationship_id(&self.source, &self.target)
    }
}

pub fn relationship_id(a: &str, b: &str) -> String {
    let (s, t) = ordered_pair(a, b);
    format!("{s}|{t}")
}

pub(crate) fn ordered_pair<'a>(a: &'a str, b: &'a str) -> (&'a str, &'a str) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Undirected weighted entity graph. Both maps iterate in sorted order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityGraph {
    pub entities: BTreeMap<String, Entity>,
    pub relationships: BTreeMap<(String, String), Relationship>,
}

impl EntityGraph {
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Entity names in index order (sorted).
    pub fn node_names(&self) -> Vec<String> {
        self.entities.keys().cloned().collect()
    }

    pub fn relationship(&self, a: &str, b: &str) -> Option<&Relationship> {
        let (s, t) = ordered_pair(a, b);
        self.relationships.get(&(s.to_string(), t.to_string()))
    }

    /// Relationships touching `name`, heaviest first.
    pub fn incident(&self, name: &str) -> Vec<&Relationship> {
        let mut rels: Vec<&Relationship> = self
            .relationships
            .values()
            .filter(|r| r.source == name || r.target == name)
            .collect();
        rels.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.id().cmp(&b.id())));
        rels
    }

    /// Index-based view for community detection; node `i` is the `i`-th sorted name.
    pub fn to_weighted(&self) -> WeightedGraph {
        let index: BTreeMap<&str, usize> = self.entities.keys().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let edges = self
            .relationships
            .values()
            .filter_map(|r| Some((*index.get(r.source.as_str())?, *index.get(r.target.as_str())?, r.weight)));
        WeightedGraph::from_edges(self.entities.len(), edges)
    }

    /// Checks the structural invariants; returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (name, e) in &self.entities {
            if name != &e.name {
                return Err(format!("entity key {name} != name {}", e.name));
            }
            if e.mention_count == 0 || e.source_chunk_ids.is_empty() {
                return Err(format!("entity {name} has no provenance"));
            }
        }
        for ((s, t), r) in &self.relationships {
            if s >= t || &r.source != s || &r.target != t {
                return Err(format!("relationship {s}|{t} not canonically ordered"));
            }
            if !(r.weight > 0.0) {
                return Err(format!("relationship {s}|{t} has non-positive weight"));
            }
            if !self.entities.contains_key(s) || !self.entities.contains_key(t) {
                return Err(format!("relationship {s}|{t} has a dangling endpoint"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityAssignment {
    /// 0 is the coarsest level.
    pub level: usize,
    /// Unique across all levels.
    pub community_id: u32,
    pub parent: Option<u32>,
    pub members: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunityReport {
    pub community_id: u32,
    pub level: usize,
    pub title: String,
    pub summary: String,
    pub member_entities: Vec<String>,
    pub member_relationships: Vec<String>,
    pub rank: f64,
}
