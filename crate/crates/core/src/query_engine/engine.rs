use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::context::{pack_sections, ContextSection, QueryContext};
use super::{classify_query, global, render_history, ChatTurn, Mode, QueryConfig, QueryError, QueryKind, SourceKind, TraceEntry};
use crate::corpus::DocumentKind;
use crate::embedding_index::{embed_query, EmbeddingIndex};
use crate::knowledge_graph::{CommunityAssignment, CommunityReport, EntityGraph};
use crate::model_client::{complete_chat, ChatMessage, CompletionRequest, ModelProvider};
use crate::prompts::PromptTemplates;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    pub question: String,
    pub answer: String,
}

/// Artifacts an [`Engine`] answers from. Every index is optional; modes that
/// need a missing one report [`QueryError::Unavailable`] or degrade.
#[derive(Clone, Debug, Default)]
pub struct EngineParts {
    pub graph: EntityGraph,
    pub communities: Vec<CommunityAssignment>,
    pub reports: Vec<CommunityReport>,
    pub chunk_index: Option<EmbeddingIndex>,
    /// chunk id → kind of the document it came from.
    pub chunk_kinds: BTreeMap<String, DocumentKind>,
    /// Item ids are entity names.
    pub entity_index: Option<EmbeddingIndex>,
    /// Item ids are [`QaPair::id`], item texts the stored questions.
    pub qa_index: Option<EmbeddingIndex>,
    pub qa_pairs: Vec<QaPair>,
}

pub struct Engine {
    parts: EngineParts,
    provider: Arc<dyn ModelProvider>,
    templates: PromptTemplates,
    config: QueryConfig,
}

impl Engine {
    pub fn new(parts: EngineParts, provider: Arc<dyn ModelProvider>, templates: PromptTemplates, config: QueryConfig) -> Self {
        Self { parts, provider, templates, config }
    }

    pub fn parts(&self) -> &EngineParts {
        &self.parts
    }

    pub fn config(&self) -> &QueryConfig {
        &self.config
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn provider(&self) -> &dyn ModelProvider {
        self.provider.as_ref()
    }

    pub fn report(&self, community_id: u32) -> Option<&CommunityReport> {
        self.parts.reports.iter().find(|r| r.community_id == community_id)
    }

    /// Answers `question` in `mode`, with `history` holding earlier turns of the session.
    pub fn answer(&self, question: &str, mode: Mode, history: &[ChatTurn]) -> Result<ChatTurn, QueryError> {
        if question.trim().is_empty() {
            return Err(QueryError::EmptyQuestion);
        }
        match mode {
            Mode::Faq => self.faq_answer(question),
            Mode::Rag => self.rag_search(question, history),
            Mode::Local => self.local_search(question, history),
            Mode::Global => self.global_search(question),
        }
    }

    /// Stored answer of the most similar stored question, without generation.
    pub fn faq_answer(&self, question: &str) -> Result<ChatTurn, QueryError> {
        let index = self
            .parts
            .qa_index
            .as_ref()
            .ok_or_else(|| QueryError::Unavailable(Mode::Faq, "no Q&A index was built".into()))?;
        let query = embed_query(self.provider(), question)?;
        let hits = index.top_k(&query, self.config.top_k, self.config.faq_threshold)?;
        let Some(best) = hits.first() else {
            let best = index.top_k(&query, 1, f64::NEG_INFINITY)?.first().map(|h| h.score);
            return Err(QueryError::NoMatch { best });
        };
        let answer = self
            .parts
            .qa_pairs
            .iter()
            .find(|p| p.id == best.item_id)
            .map(|p| p.answer.clone())
            .ok_or_else(|| QueryError::Unavailable(Mode::Faq, format!("Q&A index references unknown pair {}", best.item_id)))?;
        Ok(ChatTurn::assistant(answer, vec![TraceEntry::new(SourceKind::Qa, &best.item_id, best.score)]))
    }

    fn is_code_chunk(&self, id: &str) -> bool {
        self.parts.chunk_kinds.get(id) == Some(&DocumentKind::Code)
    }

    fn chunk_sections(&self, query: &[f64]) -> Result<Vec<ContextSection>, QueryError> {
        let Some(index) = &self.parts.chunk_index else {
            return Ok(Vec::new());
        };
        let hits = index.top_k_filtered(query, self.config.top_k, self.config.chunk_threshold, |item| !self.is_code_chunk(&item.item_id))?;
        Ok(hits
            .iter()
            .filter_map(|h| {
                let item = index.get(&h.item_id)?;
                Some(ContextSection::new(format!("Source {}", h.item_id), &item.text, TraceEntry::new(SourceKind::Chunk, &h.item_id, h.score)))
            })
            .collect())
    }

    /// Code-corpus chunks nearest to the question, regardless of threshold.
    pub fn code_context(&self, query: &[f64]) -> Result<QueryContext, QueryError> {
        let Some(index) = &self.parts.chunk_index else {
            return Ok(QueryContext { budget_chars: self.config.code_budget, sections: Vec::new() });
        };
        if !index.items().iter().any(|i| self.is_code_chunk(&i.item_id)) {
            return Ok(QueryContext { budget_chars: self.config.code_budget, sections: Vec::new() });
        }
        let hits = index.top_k_filtered(query, self.config.code_top_k.max(1), f64::NEG_INFINITY, |item| self.is_code_chunk(&item.item_id))?;
        let sections = hits
            .iter()
            .filter_map(|h| {
                let item = index.get(&h.item_id)?;
                Some(ContextSection::new(format!("Code {}", h.item_id), &item.text, TraceEntry::new(SourceKind::Chunk, &h.item_id, h.score)))
            })
            .collect();
        Ok(pack_sections(sections, self.config.code_budget))
    }

    /// Entities → their relationships → reports of their communities → chunks.
    pub fn build_local_context(&self, query: &[f64]) -> Result<QueryContext, QueryError> {
        let graph = &self.parts.graph;
        let mut sections = Vec::new();
        let mut matched: Vec<String> = Vec::new();
        if let Some(index) = &self.parts.entity_index {
            for hit in index.top_k(query, self.config.top_k, self.config.entity_threshold)? {
                if let Some(e) = graph.entities.get(&hit.item_id) {
                    sections.push(ContextSection::new(
                        format!("Entity {}", e.name),
                        format!("{} ({}): {}", e.name, e.entity_type, e.description),
                        TraceEntry::new(SourceKind::Entity, &e.name, hit.score),
                    ));
                    matched.push(e.name.clone());
                }
            }
        }

        let mut seen = BTreeSet::new();
        let mut rels: Vec<_> = matched.iter().flat_map(|n| graph.incident(n)).filter(|r| seen.insert(r.id())).collect();
        rels.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.id().cmp(&b.id())));
        for r in rels {
            sections.push(ContextSection::new(
                format!("Relationship {}", r.id()),
                format!("{} -- {} (weight {}): {}", r.source, r.target, r.weight, r.description),
                TraceEntry::new(SourceKind::Relationship, r.id(), r.weight),
            ));
        }

        let mut reports: Vec<&CommunityReport> = self
            .parts
            .reports
            .iter()
            .filter(|rep| rep.member_entities.iter().any(|m| matched.contains(m)))
            .collect();
        reports.sort_by(|a, b| b.rank.total_cmp(&a.rank).then(a.community_id.cmp(&b.community_id)));
        for rep in reports {
            sections.push(ContextSection::new(
                format!("Report {}: {}", rep.community_id, rep.title),
                &rep.summary,
                TraceEntry::new(SourceKind::Report, rep.community_id.to_string(), rep.rank),
            ));
        }

        sections.extend(self.chunk_sections(query)?);
        Ok(pack_sections(sections, self.config.context_budget))
    }

    fn generate(&self, question: &str, history: &[ChatTurn], context: QueryContext, query: &[f64]) -> Result<ChatTurn, QueryError> {
        let code = match classify_query(question, &self.config.code_keywords)? {
            QueryKind::Code => self.code_context(query)?,
            QueryKind::Knowledge => QueryContext::default(),
        };
        let or_none = |ctx: &QueryContext, none: &str| if ctx.is_empty() { none.to_string() } else { ctx.render() };
        let prompt = self.templates.render(
            "answer",
            &[
                ("history", &render_history(history, self.config.history_window)),
                ("context", &or_none(&context, "(no relevant context found)")),
                ("code", &or_none(&code, "(none)")),
                ("question", question),
            ],
        );
        let request = CompletionRequest::with_messages(vec![ChatMessage::system(self.templates.raw("system")), ChatMessage::user(prompt)])
            .temperature(self.config.temperature)
            .max_tokens(self.config.max_tokens);
        let answer = complete_chat(self.provider(), &request)?;
        if answer.trim().is_empty() {
            return Err(QueryError::Provider(crate::model_client::ModelError::MalformedResponse("empty answer".into())));
        }
        let mut trace = context.trace();
        trace.extend(code.trace());
        Ok(ChatTurn::assistant(answer, trace))
    }

    pub fn rag_search(&self, question: &str, history: &[ChatTurn]) -> Result<ChatTurn, QueryError> {
        if self.parts.chunk_index.is_none() {
            return Err(QueryError::Unavailable(Mode::Rag, "no chunk index was built".into()));
        }
        let query = embed_query(self.provider(), question)?;
        let context = pack_sections(self.chunk_sections(&query)?, self.config.context_budget);
        self.generate(question, history, context, &query)
    }

    pub fn local_search(&self, question: &str, history: &[ChatTurn]) -> Result<ChatTurn, QueryError> {
        if self.parts.graph.is_empty() || self.parts.entity_index.is_none() {
            tracing::warn!("graph is empty; answering in rag mode");
            return self.rag_search(question, history);
        }
        let query = embed_query(self.provider(), question)?;
        let context = self.build_local_context(&query)?;
        self.generate(question, history, context, &query)
    }

    /// Map-reduce over the reports of the coarsest level.
    pub fn global_search(&self, question: &str) -> Result<ChatTurn, QueryError> {
        let Some(top) = self.parts.reports.iter().map(|r| r.level).min() else {
            return Err(QueryError::NoRelevantCommunities);
        };
        let reports: Vec<&CommunityReport> = self.parts.reports.iter().filter(|r| r.level == top).collect();
        global::global_search(question, &reports, self.provider(), &self.templates, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_index::build_index;
    use crate::knowledge_graph::{Entity, Relationship};
    use crate::model_client::ScriptedMock;

    fn entity(name: &str, description: &str) -> Entity {
        Entity {
            name: name.into(),
            entity_type: "CONCEPT".into(),
            description: description.into(),
            source_chunk_ids: ["d#0..1".to_string()].into(),
            mention_count: 1,
        }
    }

    fn engine(mock: Arc<ScriptedMock>, reports: Vec<CommunityReport>, config: QueryConfig) -> Engine {
        let mut graph = EntityGraph::default();
        graph.entities.insert("ESN".into(), entity("ESN", "echo state network"));
        graph.entities.insert("RIDGE".into(), entity("RIDGE", "linear readout"));
        graph.entities.insert("SPECTRAL RADIUS".into(), entity("SPECTRAL RADIUS", "scale of reservoir weights"));
        graph.relationships.insert(
            ("ESN".into(), "RIDGE".into()),
            Relationship {
                source: "ESN".into(),
                target: "RIDGE".into(),
                description: "readout of an esn".into(),
                weight: 9.0,
                source_chunk_ids: ["d#0..1".to_string()].into(),
                mention_count: 1,
            },
        );
        let entity_entries: Vec<(String, String)> =
            graph.entities.values().map(|e| (e.name.clone(), format!("{}: {}", e.name, e.description))).collect();
        let chunk_entries = vec![
            ("docs.md#0..40".to_string(), "An ESN is an echo state network with a reservoir.".to_string()),
            ("codes.md#0..40".to_string(), "from reservoirpy.nodes import Reservoir, Ridge".to_string()),
        ];
        let mut chunk_kinds = BTreeMap::new();
        chunk_kinds.insert("docs.md#0..40".to_string(), DocumentKind::Documentation);
        chunk_kinds.insert("codes.md#0..40".to_string(), DocumentKind::Code);
        let qa_pairs = vec![
            QaPair { id: "qa-0".into(), question: "What is a reservoir?".into(), answer: "A fixed random recurrent network.".into() },
            QaPair { id: "qa-1".into(), question: "How do I train a readout?".into(), answer: "Fit it with ridge regression.".into() },
        ];
        let qa_entries: Vec<(String, String)> = qa_pairs.iter().map(|p| (p.id.clone(), p.question.clone())).collect();
        let parts = EngineParts {
            entity_index: Some(build_index(&entity_entries, mock.as_ref(), 8).unwrap()),
            chunk_index: Some(build_index(&chunk_entries, mock.as_ref(), 8).unwrap()),
            qa_index: Some(build_index(&qa_entries, mock.as_ref(), 8).unwrap()),
            graph,
            communities: Vec::new(),
            reports,
            chunk_kinds,
            qa_pairs,
        };
        Engine::new(parts, mock, PromptTemplates::default(), config)
    }

    fn loose() -> QueryConfig {
        QueryConfig { chunk_threshold: 0.1, entity_threshold: 0.1, ..QueryConfig::default() }
    }

    #[test]
    fn faq_exact_and_no_match() {
        let mock = Arc::new(ScriptedMock::with_default("unused"));
        let e = engine(mock.clone(), vec![], QueryConfig::default());
        let turn = e.faq_answer("What is a reservoir?").unwrap();
        assert_eq!(turn.content, "A fixed random recurrent network.");
        assert!((turn.retrieval_trace[0].score - 1.0).abs() < 1e-12);
        assert!(matches!(e.faq_answer("zebra quantum lasagna"), Err(QueryError::NoMatch { .. })));
        assert_eq!(mock.call_count(), 0, "faq never generates");
    }

    #[test]
    fn local_search_puts_named_entity_first() {
        let mock = Arc::new(ScriptedMock::with_default("scripted answer"));
        let e = engine(mock.clone(), vec![], loose());
        let turn = e.answer("tell me about ESN", Mode::Local, &[]).unwrap();
        assert_eq!(turn.content, "scripted answer");
        assert_eq!(turn.retrieval_trace[0].source_kind, SourceKind::Entity);
        assert_eq!(turn.retrieval_trace[0].id, "ESN");
        assert!(turn.retrieval_trace.iter().any(|t| t.source_kind == SourceKind::Relationship && t.id == "ESN|RIDGE"));
        assert!(turn.retrieval_trace.iter().all(|t| t.source_kind != SourceKind::Report), "no reports exist");
    }

    #[test]
    fn code_question_includes_code_chunk() {
        let mock = Arc::new(ScriptedMock::with_default("import it"));
        let e = engine(mock.clone(), vec![], loose());
        let turn = e.answer("Code me the initialization of a reservoir", Mode::Local, &[]).unwrap();
        assert!(turn.retrieval_trace.iter().any(|t| t.id == "codes.md#0..40"));
        let knowledge = e.answer("What is an ESN reservoir?", Mode::Local, &[]).unwrap();
        assert!(knowledge.retrieval_trace.iter().all(|t| t.id != "codes.md#0..40"));
    }

    #[test]
    fn history_reaches_the_prompt() {
        let mock = Arc::new(ScriptedMock::with_default("ok"));
        let e = engine(mock.clone(), vec![], loose());
        let history = vec![ChatTurn::user("What is an ESN?"), ChatTurn::assistant("A reservoir model.", vec![])];
        e.answer("how do I train it?", Mode::Rag, &history).unwrap();
        let prompt = mock.calls().pop().unwrap().last_content().to_string();
        assert!(prompt.contains("user: What is an ESN?"));
        assert!(prompt.contains("assistant: A reservoir model."));
    }

    #[test]
    fn reports_of_matched_communities_by_rank() {
        let report = |id, rank, members: &[&str]| CommunityReport {
            community_id: id,
            level: 0,
            title: format!("R{id}"),
            summary: format!("summary {id}"),
            member_entities: members.iter().map(|s| s.to_string()).collect(),
            member_relationships: vec![],
            rank,
        };
        let mock = Arc::new(ScriptedMock::with_default("ok"));
        let e = engine(mock.clone(), vec![report(0, 2.0, &["ESN"]), report(1, 8.0, &["ESN", "RIDGE"]), report(2, 9.0, &["NOPE"])], QueryConfig { top_k: 1, ..loose() });
        let query = mock.embed_one("ESN");
        let ctx = e.build_local_context(&query).unwrap();
        let reports: Vec<_> = ctx.trace().into_iter().filter(|t| t.source_kind == SourceKind::Report).map(|t| t.id).collect();
        assert_eq!(reports, vec!["1", "0"]);
    }

    #[test]
    fn empty_graph_degrades_to_rag() {
        let mock = Arc::new(ScriptedMock::with_default("ok"));
        let mut e = engine(mock.clone(), vec![], loose());
        e.parts.graph = EntityGraph::default();
        let turn = e.answer("ESN reservoir", Mode::Local, &[]).unwrap();
        assert!(turn.retrieval_trace.iter().all(|t| t.source_kind == SourceKind::Chunk));
    }

    #[test]
    fn missing_artifacts_are_typed() {
        let mock = Arc::new(ScriptedMock::with_default("ok"));
        let e = Engine::new(EngineParts::default(), mock, PromptTemplates::default(), QueryConfig::default());
        assert!(matches!(e.answer("q", Mode::Global, &[]), Err(QueryError::NoRelevantCommunities)));
        assert!(matches!(e.answer("q", Mode::Faq, &[]), Err(QueryError::Unavailable(Mode::Faq, _))));
        assert!(matches!(e.answer("", Mode::Rag, &[]), Err(QueryError::EmptyQuestion)));
    }
}
