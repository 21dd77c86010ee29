use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{CommunityAssignment, CommunityReport, Entity, EntityGraph, GraphError, Relationship};

pub const ENTITIES_FILE: &str = "entities.json";
pub const RELATIONSHIPS_FILE: &str = "relationships.json";
pub const COMMUNITIES_FILE: &str = "communities.json";
pub const REPORTS_FILE: &str = "reports.json";

/// Paths of the graph artifacts inside one output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphFiles {
    pub entities: PathBuf,
    pub relationships: PathBuf,
    pub communities: PathBuf,
    pub reports: PathBuf,
}

impl GraphFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            entities: dir.join(ENTITIES_FILE),
            relationships: dir.join(RELATIONSHIPS_FILE),
            communities: dir.join(COMMUNITIES_FILE),
            reports: dir.join(REPORTS_FILE),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), GraphError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| GraphError::MalformedArtifact {
        file: path.display().to_string(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, GraphError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| GraphError::MalformedArtifact {
        file: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Writes entities, relationships and communities as JSON arrays in sorted order.
pub fn export_graph(graph: &EntityGraph, assignments: &[CommunityAssignment], dir: &Path) -> Result<GraphFiles, GraphError> {
    std::fs::create_dir_all(dir)?;
    let files = GraphFiles::in_dir(dir);
    write_json(&files.entities, &graph.entities.values().collect::<Vec<_>>())?;
    write_json(&files.relationships, &graph.relationships.values().collect::<Vec<_>>())?;
    let mut sorted: Vec<&CommunityAssignment> = assignments.iter().collect();
    sorted.sort_by_key(|a| (a.level, a.community_id));
    write_json(&files.communities, &sorted)?;
    Ok(files)
}

/// Reads back what [`export_graph`] wrote and re-checks the graph invariants.
pub fn load_graph(dir: &Path) -> Result<(EntityGraph, Vec<CommunityAssignment>), GraphError> {
    let files = GraphFiles::in_dir(dir);
    let entities: Vec<Entity> = read_json(&files.entities)?;
    let relationships: Vec<Relationship> = read_json(&files.relationships)?;
    let communities: Vec<CommunityAssignment> = read_json(&files.communities)?;
    let graph = EntityGraph {
        entities: entities.into_iter().map(|e| (e.name.clone(), e)).collect(),
        relationships: relationships.into_iter().map(|r| ((r.source.clone(), r.target.clone()), r)).collect(),
    };
    graph.check_invariants().map_err(|reason| GraphError::MalformedArtifact {
        file: files.relationships.display().to_string(),
        reason,
    })?;
    Ok((graph, communities))
}

pub fn save_reports(dir: &Path, reports: &[CommunityReport]) -> Result<PathBuf, GraphError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(REPORTS_FILE);
    let mut sorted: Vec<&CommunityReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (r.level, r.community_id));
    write_json(&path, &sorted)?;
    Ok(path)
}

pub fn load_reports(dir: &Path) -> Result<Vec<CommunityReport>, GraphError> {
    read_json(&dir.join(REPORTS_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (EntityGraph, Vec<CommunityAssignment>) {
        let mut g = EntityGraph::default();
        for name in ["ESN", "RIDGE"] {
            g.entities.insert(
                name.into(),
                Entity {
                    name: name.into(),
                    entity_type: "CONCEPT".into(),
                    description: format!("{name} description"),
                    source_chunk_ids: ["docs/a.md#0..10".to_string()].into(),
                    mention_count: 1,
                },
            );
        }
        g.relationships.insert(
            ("ESN".into(), "RIDGE".into()),
            Relationship {
                source: "ESN".into(),
                target: "RIDGE".into(),
                description: "readout".into(),
                weight: 7.5,
                source_chunk_ids: ["docs/a.md#0..10".to_string()].into(),
                mention_count: 2,
            },
        );
        let c = CommunityAssignment { level: 0, community_id: 0, parent: None, members: ["ESN".to_string(), "RIDGE".to_string()].into() };
        (g, vec![c])
    }

    #[test]
    fn snapshot_of_tiny_graph() {
        let dir = tempfile::tempdir().unwrap();
        let (g, cs) = tiny();
        let files = export_graph(&g, &cs, dir.path()).unwrap();
        let rel = std::fs::read_to_string(files.relationships).unwrap();
        assert_eq!(
            rel,
            "[\n  {\n    \"source\": \"ESN\",\n    \"target\": \"RIDGE\",\n    \"description\": \"readout\",\n    \"weight\": 7.5,\n    \"source_chunk_ids\": [\n      \"docs/a.md#0..10\"\n    ],\n    \"mention_count\": 2\n  }\n]\n"
        );
    }

    #[test]
    fn empty_graph_is_empty_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_graph(&EntityGraph::default(), &[], dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(files.entities).unwrap(), "[]\n");
        assert_eq!(std::fs::read_to_string(files.communities).unwrap(), "[]\n");
    }

    #[test]
    fn reexport_of_reload_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (g, cs) = tiny();
        export_graph(&g, &cs, a.path()).unwrap();
        let (g2, cs2) = load_graph(a.path()).unwrap();
        export_graph(&g2, &cs2, b.path()).unwrap();
        for name in [ENTITIES_FILE, RELATIONSHIPS_FILE, COMMUNITIES_FILE] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn corrupted_artifact_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (g, cs) = tiny();
        export_graph(&g, &cs, dir.path()).unwrap();
        std::fs::write(dir.path().join(ENTITIES_FILE), "[{").unwrap();
        assert!(matches!(load_graph(dir.path()), Err(GraphError::MalformedArtifact { .. })));
    }
}
