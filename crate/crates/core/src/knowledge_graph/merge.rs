use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ordered_pair, Entity, EntityGraph, Extraction, GraphError, Relationship};
use crate::model_client::{complete_chat, CompletionRequest, ModelProvider};
use crate::prompts::PromptTemplates;

pub const STUB_ENTITY_TYPE: &str = "UNKNOWN";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeStats {
    pub summarize_calls: usize,
    pub stub_entities: Vec<String>,
    pub dropped_self_loops: usize,
}

#[derive(Default)]
struct EntityAcc {
    types: BTreeMap<String, usize>,
    first_type: Option<String>,
    descriptions: Vec<String>,
    chunks: BTreeSet<String>,
    mentions: usize,
}

#[derive(Default)]
struct RelAcc {
    descriptions: Vec<String>,
    chunks: BTreeSet<String>,
    weight: f64,
    mentions: usize,
}

fn push_unique(list: &mut Vec<String>, d: &str) {
    let d = d.trim();
    if !d.is_empty() && !list.iter().any(|x| x == d) {
        list.push(d.to_string());
    }
}

/// Merges per-chunk extractions into one graph.
///
/// Entities merge on canonical name, relationships on their unordered
/// endpoint pair; relationship weight is the sum of instance strengths.
/// Merged descriptions longer than `summary_char_budget` characters are
/// condensed with one provider call each.
pub fn merge_elements(
    extractions: &[Extraction],
    provider: &dyn ModelProvider,
    summary_char_budget: usize,
    templates: &PromptTemplates,
    temperature: f64,
) -> Result<(EntityGraph, MergeStats), GraphError> {
    let mut stats = MergeStats::default();
    let mut entities: BTreeMap<String, EntityAcc> = BTreeMap::new();
    let mut rels: BTreeMap<(String, String), RelAcc> = BTreeMap::new();

    for ex in extractions {
        for e in &ex.entities {
            let acc = entities.entry(e.name.clone()).or_default();
            if !e.entity_type.is_empty() {
                *acc.types.entry(e.entity_type.clone()).or_default() += 1;
                acc.first_type.get_or_insert_with(|| e.entity_type.clone());
            }
            push_unique(&mut acc.descriptions, &e.description);
            acc.chunks.insert(ex.chunk_id.clone());
            acc.mentions += 1;
        }
        for r in &ex.relationships {
            if r.source == r.target {
                stats.dropped_self_loops += 1;
                continue;
            }
            let (s, t) = ordered_pair(&r.source, &r.target);
            let acc = rels.entry((s.to_string(), t.to_string())).or_default();
            push_unique(&mut acc.descriptions, &r.description);
            acc.chunks.insert(ex.chunk_id.clone());
            acc.weight += r.strength as f64;
            acc.mentions += 1;
        }
    }

    let mut graph = EntityGraph::default();
    for (name, acc) in entities {
        // Most frequent type; ties go to the one seen first.
        let first = acc.first_type.clone().unwrap_or_default();
        let entity_type = acc
            .types
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| (a.0 == &first).cmp(&(b.0 == &first))))
            .map(|(t, _)| t.clone())
            .unwrap_or_else(|| STUB_ENTITY_TYPE.to_string());
        let description = condense(&name, &acc.descriptions, provider, summary_char_budget, templates, temperature, &mut stats)?;
        graph.entities.insert(
            name.clone(),
            Entity {
                name,
                entity_type,
                description,
                source_chunk_ids: acc.chunks,
                mention_count: acc.mentions,
            },
        );
    }

    for ((s, t), acc) in rels {
        for endpoint in [&s, &t] {
            if !graph.entities.contains_key(endpoint) {
                tracing::warn!(entity = %endpoint, "DanglingEndpoint repaired with a stub entity");
                stats.stub_entities.push(endpoint.clone());
                graph.entities.insert(
                    endpoint.clone(),
                    Entity {
                        name: endpoint.clone(),
                        entity_type: STUB_ENTITY_TYPE.into(),
                        description: String::new(),
                        source_chunk_ids: acc.chunks.clone(),
                        mention_count: 1,
                    },
                );
            }
        }
        let label = format!("{s}, {t}");
        let description = condense(&label, &acc.descriptions, provider, summary_char_budget, templates, temperature, &mut stats)?;
        graph.relationships.insert(
            (s.clone(), t.clone()),
            Relationship {
                source: s,
                target: t,
                description,
                weight: acc.weight,
                source_chunk_ids: acc.chunks,
                mention_count: acc.mentions,
            },
        );
    }
    Ok((graph, stats))
}

fn condense(
    label: &str,
    descriptions: &[String],
    provider: &dyn ModelProvider,
    budget: usize,
    templates: &PromptTemplates,
    temperature: f64,
    stats: &mut MergeStats,
) -> Result<String, GraphError> {
    let joined = descriptions.join("\n");
    if joined.chars().count() <= budget {
        return Ok(joined);
    }
    let list = descriptions.iter().map(|d| format!("- {d}")).collect::<Vec<_>>().join("\n");
    let prompt = templates.render("summarize_descriptions", &[("entity_name", label), ("description_list", &list)]);
    stats.summarize_calls += 1;
    let summary = complete_chat(provider, &CompletionRequest::from_prompt(prompt).temperature(temperature))?;
    let summary = summary.trim();
    Ok(if summary.is_empty() { joined } else { summary.to_string() })
}
