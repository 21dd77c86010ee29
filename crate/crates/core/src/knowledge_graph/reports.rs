use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{CommunityAssignment, CommunityReport, EntityGraph, Relationship};
use crate::model_client::{complete_chat, CompletionRequest, ModelProvider};
use crate::prompts::PromptTemplates;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFailure {
    pub community_id: u32,
    pub level: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryOutcome {
    pub reports: Vec<CommunityReport>,
    pub failures: Vec<ReportFailure>,
}

/// Relationships with both endpoints inside `members`, heaviest first.
fn internal_relationships<'g>(graph: &'g EntityGraph, members: &BTreeSet<String>) -> Vec<&'g Relationship> {
    let mut rels: Vec<&Relationship> = graph
        .relationships
        .values()
        .filter(|r| members.contains(&r.source) && members.contains(&r.target))
        .collect();
    rels.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.id().cmp(&b.id())));
    rels
}

/// Prompt body for one community: relationship lines by descending weight,
/// then entity lines by descending weighted degree, cut at `budget` chars.
pub fn community_context(graph: &EntityGraph, members: &BTreeSet<String>, budget: usize) -> String {
    let rels = internal_relationships(graph, members);
    let degree = |name: &str| -> f64 {
        rels.iter().filter(|r| r.source == name || r.target == name).map(|r| r.weight).sum()
    };
    let mut entities: Vec<&str> = members.iter().map(String::as_str).collect();
    entities.sort_by(|a, b| degree(b).total_cmp(&degree(a)).then_with(|| a.cmp(b)));

    let lines = rels
        .iter()
        .map(|r| format!("relationship|{}|{}|{}|{}", r.source, r.target, r.weight, one_line(&r.description)))
        .chain(entities.iter().filter_map(|name| {
            graph
                .entities
                .get(*name)
                .map(|e| format!("entity|{}|{}|{}", e.name, e.entity_type, one_line(&e.description)))
        }));

    let mut out = String::new();
    let mut used = 0;
    for line in lines {
        let len = line.chars().count() + 1;
        if used + len > budget {
            break;
        }
        used += len;
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Extracts `TITLE:` and `RANK:` lines; everything else is the summary.
pub fn parse_report(reply: &str) -> (Option<String>, Option<f64>, String) {
    let mut title = None;
    let mut rank = None;
    let mut body = Vec::new();
    for line in reply.lines() {
        let trimmed = line.trim().trim_start_matches('#').trim();
        let upper = trimmed.to_ascii_uppercase();
        if title.is_none() && upper.starts_with("TITLE:") {
            title = Some(trimmed[6..].trim().to_string());
        } else if rank.is_none() && upper.starts_with("RANK:") {
            rank = trimmed[5..].trim().split_whitespace().next().and_then(|t| t.trim_end_matches(['.', ',']).parse::<f64>().ok());
            if rank.is_none() {
                body.push(line);
            }
        } else {
            body.push(line);
        }
    }
    let summary = body.join("\n").trim().to_string();
    (title, rank.filter(|r| r.is_finite()).map(|r| r.clamp(0.0, 10.0)), summary)
}

/// One report per community at the requested levels. Provider failures are
/// recorded per community and do not stop the others.
pub fn summarize_communities(
    graph: &EntityGraph,
    assignments: &[CommunityAssignment],
    provider: &dyn ModelProvider,
    levels: &[usize],
    templates: &PromptTemplates,
    temperature: f64,
    context_budget: usize,
) -> SummaryOutcome {
    let mut outcome = SummaryOutcome::default();
    for community in assignments.iter().filter(|a| levels.contains(&a.level)) {
        let data = community_context(graph, &community.members, context_budget);
        let prompt = templates.render("community_report", &[("community_data", &data)]);
        let fail = |reason: String| ReportFailure { community_id: community.community_id, level: community.level, reason };
        let reply = match complete_chat(provider, &CompletionRequest::from_prompt(prompt).temperature(temperature)) {
            Ok(reply) => reply,
            Err(err) => {
                tracing::warn!(community = community.community_id, error = %err, "community report failed");
                outcome.failures.push(fail(err.to_string()));
                continue;
            }
        };
        let (title, rank, summary) = parse_report(&reply);
        if summary.is_empty() {
            outcome.failures.push(fail("empty report".into()));
            continue;
        }
        let member_entities: Vec<String> = community.members.iter().cloned().collect();
        outcome.reports.push(CommunityReport {
            community_id: community.community_id,
            level: community.level,
            title: title.filter(|t| !t.is_empty()).unwrap_or_else(|| default_title(&member_entities)),
            summary,
            member_relationships: internal_relationships(graph, &community.members).iter().map(|r| r.id()).collect(),
            rank: rank.unwrap_or_else(|| (1.0 + member_entities.len() as f64).ln()),
            member_entities,
        });
    }
    outcome
}

fn default_title(members: &[String]) -> String {
    let head: Vec<&str> = members.iter().take(3).map(String::as_str).collect();
    let more = if members.len() > 3 { ", ..." } else { "" };
    format!("Community of {}{more}", head.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge_graph::Entity;
    use crate::model_client::ScriptedMock;

    fn entity(name: &str) -> Entity {
        Entity {
            name: name.into(),
            entity_type: "CONCEPT".into(),
            description: format!("about {name}"),
            source_chunk_ids: ["c".to_string()].into(),
            mention_count: 1,
        }
    }

    fn graph(edges: &[(&str, &str, f64)]) -> EntityGraph {
        let mut g = EntityGraph::default();
        for (s, t, w) in edges {
            g.entities.insert(s.to_string(), entity(s));
            g.entities.insert(t.to_string(), entity(t));
            g.relationships.insert(
                (s.to_string(), t.to_string()),
                Relationship {
                    source: s.to_string(),
                    target: t.to_string(),
                    description: format!("{s} with {t}"),
                    weight: *w,
                    source_chunk_ids: ["c".to_string()].into(),
                    mention_count: 1,
                },
            );
        }
        g
    }

    fn community(level: usize, id: u32, members: &[&str]) -> CommunityAssignment {
        CommunityAssignment { level, community_id: id, parent: None, members: members.iter().map(|m| m.to_string()).collect() }
    }

    #[test]
    fn two_entity_community() {
        let g = graph(&[("ESN", "RESERVOIR", 5.0)]);
        let mock = ScriptedMock::with_default("TITLE: Echo states\nRANK: 7.5\nThe ESN uses a RESERVOIR.");
        let out = summarize_communities(&g, &[community(0, 0, &["ESN", "RESERVOIR"])], &mock, &[0], &PromptTemplates::default(), 0.1, 4000);
        assert_eq!(out.reports.len(), 1);
        let r = &out.reports[0];
        assert_eq!(r.title, "Echo states");
        assert_eq!(r.rank, 7.5);
        assert_eq!(r.member_entities, vec!["ESN", "RESERVOIR"]);
        assert_eq!(r.member_relationships, vec!["ESN|RESERVOIR"]);
        let prompt = &mock.calls()[0].messages[0].content;
        assert!(prompt.contains("ESN") && prompt.contains("RESERVOIR"));
    }

    #[test]
    fn both_levels_reported_and_rank_defaults() {
        let g = graph(&[("A", "B", 1.0), ("C", "D", 1.0)]);
        let mock = ScriptedMock::with_default("plain summary");
        let cs = [community(0, 0, &["A", "B", "C", "D"]), community(1, 1, &["A", "B"]), community(1, 2, &["C", "D"])];
        let out = summarize_communities(&g, &cs, &mock, &[0, 1], &PromptTemplates::default(), 0.1, 4000);
        assert_eq!(out.reports.iter().map(|r| r.level).collect::<Vec<_>>(), vec![0, 1, 1]);
        assert!((out.reports[0].rank - 5f64.ln()).abs() < 1e-12);
        assert!(out.reports[1].title.starts_with("Community of A, B"));
    }

    #[test]
    fn budget_keeps_heaviest_relationships_first() {
        let g = graph(&[("A", "B", 1.0), ("B", "C", 9.0), ("C", "D", 4.0)]);
        let members: BTreeSet<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let full = community_context(&g, &members, usize::MAX);
        let first_line = full.lines().next().unwrap().chars().count() + 1;
        let second = full.lines().nth(1).unwrap().chars().count() + 1;
        let cut = community_context(&g, &members, first_line + second);
        let lines: Vec<&str> = cut.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("relationship|B|C|9"));
        assert!(lines[1].starts_with("relationship|C|D|4"));
    }

    #[test]
    fn provider_failure_recorded_per_community() {
        let g = graph(&[("A", "B", 1.0)]);
        let mock = ScriptedMock::with_default("fine").rule("relationship|A|B", "<|ERROR|> 500 boom");
        let cs = [community(0, 0, &["A", "B"]), community(0, 1, &["A"])];
        let out = summarize_communities(&g, &cs, &mock, &[0], &PromptTemplates::default(), 0.1, 4000);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].community_id, 0);
        assert_eq!(out.reports.len(), 1);
    }

    #[test]
    fn rank_is_clamped() {
        assert_eq!(parse_report("RANK: 42\nbody").1, Some(10.0));
        assert_eq!(parse_report("## TITLE: x\nRANK: n/a\nbody").2, "RANK: n/a\nbody");
    }
}
