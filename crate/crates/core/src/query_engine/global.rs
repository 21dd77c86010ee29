use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{pack_sections, ChatTurn, ContextSection, QueryConfig, QueryError, SourceKind, TraceEntry};
use crate::knowledge_graph::CommunityReport;
use crate::model_client::{complete_chat, ChatMessage, CompletionRequest, ModelProvider};
use crate::prompts::PromptTemplates;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialAnswer {
    pub community_id: u32,
    pub text: String,
    /// 0 (irrelevant) to 100.
    pub helpfulness: f64,
}

/// Reads `("partial"|id|helpfulness|answer)` records for the communities in
/// `batch`. Communities without a parsable record get helpfulness 0.
pub fn parse_partials(reply: &str, batch: &[u32]) -> Vec<PartialAnswer> {
    let mut found: BTreeMap<u32, PartialAnswer> = BTreeMap::new();
    for record in reply.split("##").flat_map(str::lines) {
        let Some(inner) = record.trim().strip_prefix('(').and_then(|r| r.strip_suffix(')')) else {
            continue;
        };
        let fields: Vec<&str> = inner.splitn(4, '|').map(str::trim).collect();
        if fields.len() != 4 || !fields[0].trim_matches('"').eq_ignore_ascii_case("partial") {
            continue;
        }
        let (Ok(id), Ok(score)) = (fields[1].parse::<u32>(), fields[2].parse::<f64>()) else {
            continue;
        };
        if batch.contains(&id) && score.is_finite() {
            found.entry(id).or_insert(PartialAnswer {
                community_id: id,
                text: fields[3].to_string(),
                helpfulness: score.clamp(0.0, 100.0),
            });
        }
    }
    batch
        .iter()
        .map(|id| {
            found.remove(id).unwrap_or(PartialAnswer { community_id: *id, text: String::new(), helpfulness: 0.0 })
        })
        .collect()
}

fn render_report(r: &CommunityReport) -> String {
    format!("-----Report {}-----\nTitle: {}\n{}\n", r.community_id, r.title, r.summary)
}

/// Map over `reports` in batches, then one reduce call over the helpful partials.
pub(crate) fn global_search(
    question: &str,
    reports: &[&CommunityReport],
    provider: &dyn ModelProvider,
    templates: &PromptTemplates,
    cfg: &QueryConfig,
) -> Result<ChatTurn, QueryError> {
    let request = |messages: Vec<ChatMessage>| {
        CompletionRequest::with_messages(messages).temperature(cfg.temperature).max_tokens(cfg.max_tokens)
    };

    let mut partials = Vec::new();
    for batch in reports.chunks(cfg.map_batch.max(1)) {
        let ids: Vec<u32> = batch.iter().map(|r| r.community_id).collect();
        let rendered: String = batch.iter().map(|r| render_report(r)).collect();
        let prompt = templates.render("global_map", &[("reports", &rendered), ("question", question)]);
        let reply = complete_chat(provider, &request(vec![ChatMessage::user(prompt)]))?;
        partials.extend(parse_partials(&reply, &ids));
    }

    partials.retain(|p| p.helpfulness > 0.0);
    if partials.is_empty() {
        return Err(QueryError::NoRelevantCommunities);
    }
    partials.sort_by(|a, b| b.helpfulness.total_cmp(&a.helpfulness).then(a.community_id.cmp(&b.community_id)));
    let sections = partials
        .iter()
        .map(|p| {
            ContextSection::new(
                format!("Community {} (helpfulness {})", p.community_id, p.helpfulness),
                p.text.clone(),
                TraceEntry::new(SourceKind::Report, p.community_id.to_string(), p.helpfulness),
            )
        })
        .collect();
    let packed = pack_sections(sections, cfg.reduce_budget);
    let prompt = templates.render("global_reduce", &[("partials", &packed.render()), ("question", question)]);
    let answer = complete_chat(provider, &request(vec![ChatMessage::system(templates.raw("system")), ChatMessage::user(prompt)]))?;
    Ok(ChatTurn::assistant(answer, packed.trace()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_client::ScriptedMock;

    fn report(id: u32) -> CommunityReport {
        CommunityReport {
            community_id: id,
            level: 0,
            title: format!("T{id}"),
            summary: format!("summary {id}"),
            member_entities: vec![],
            member_relationships: vec![],
            rank: 1.0,
        }
    }

    fn run(reports: &[CommunityReport], mock: &ScriptedMock) -> Result<ChatTurn, QueryError> {
        let refs: Vec<&CommunityReport> = reports.iter().collect();
        global_search("q?", &refs, mock, &PromptTemplates::default(), &QueryConfig::default())
    }

    #[test]
    fn partial_parsing_defaults_to_zero() {
        let got = parse_partials("(\"partial\"|1|80|yes | really)##(\"partial\"|2|lots|x)\n(partial|9|50|not in batch)", &[1, 2, 3]);
        assert_eq!(got[0].helpfulness, 80.0);
        assert_eq!(got[0].text, "yes | really");
        assert_eq!((got[1].helpfulness, got[2].helpfulness), (0.0, 0.0));
    }

    #[test]
    fn reduce_orders_by_helpfulness_and_drops_zero() {
        let mock = ScriptedMock::with_default("final answer").rule(
            "---Reports---",
            "(\"partial\"|0|80|alpha)##(\"partial\"|1|0|beta)##(\"partial\"|2|40|gamma)",
        );
        let turn = run(&[report(0), report(1), report(2)], &mock).unwrap();
        assert_eq!(turn.content, "final answer");
        let ids: Vec<_> = turn.retrieval_trace.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, vec!["0", "2"]);
        let reduce = mock.calls().pop().unwrap();
        let prompt = reduce.last_content();
        assert!(prompt.find("alpha").unwrap() < prompt.find("gamma").unwrap());
        assert!(!prompt.contains("beta"));
    }

    #[test]
    fn single_report() {
        let mock = ScriptedMock::with_default("done").rule("---Reports---", "(\"partial\"|5|90|only)");
        let turn = run(&[report(5)], &mock).unwrap();
        assert_eq!(turn.content, "done");
        assert_eq!(mock.call_count(), 2);
    }

    #[test]
    fn batches_of_ten() {
        let mock = ScriptedMock::with_default("done").rule("---Reports---", "(\"partial\"|0|10|a)");
        let reports: Vec<_> = (0..25).map(report).collect();
        run(&reports, &mock).unwrap();
        assert_eq!(mock.calls_containing("---Reports---"), 3);
    }

    #[test]
    fn all_zero_is_typed() {
        let mock = ScriptedMock::with_default("(\"partial\"|0|0|nothing)");
        assert!(matches!(run(&[report(0)], &mock), Err(QueryError::NoRelevantCommunities)));
    }
}
