use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{canonical_name, GraphError};
use crate::corpus::Chunk;
use crate::model_client::{complete_chat, ChatMessage, CompletionRequest, ModelProvider};
use crate::prompts::PromptTemplates;

pub const RECORD_DELIMITER: &str = "##";
pub const COMPLETION_MARKER: &str = "<|COMPLETE|>";
pub const DEFAULT_ENTITY_TYPES: &str = "CONCEPT, LIBRARY, MODULE, FUNCTION, PARAMETER, PERSON, ORGANIZATION, PAPER, TASK";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEntity {
    pub name: String,
    pub entity_type: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRelationship {
    pub source: String,
    pub target: String,
    pub description: String,
    pub strength: u32,
}

/// Everything extracted from one chunk across all gleaning rounds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub chunk_id: String,
    pub entities: Vec<RawEntity>,
    pub relationships: Vec<RawRelationship>,
    pub unparsable: Vec<String>,
    pub rounds: usize,
}

/// Parses `("entity"|...)` / `("relationship"|...)` records.
///
/// Records are separated by `##` or newlines; the completion marker is
/// ignored. Lines that are not well-formed records are returned in the third
/// slot rather than failing the whole reply.
pub fn parse_records(reply: &str) -> (Vec<RawEntity>, Vec<RawRelationship>, Vec<String>) {
    let mut entities = Vec::new();
    let mut relationships = Vec::new();
    let mut unparsable = Vec::new();
    let cleaned = reply.replace(COMPLETION_MARKER, "");
    for piece in cleaned.split(RECORD_DELIMITER).flat_map(str::lines) {
        let record = piece.trim();
        if record.is_empty() {
            continue;
        }
        match parse_record(record) {
            Some(Record::Entity(e)) => entities.push(e),
            Some(Record::Relationship(r)) => relationships.push(r),
            None => unparsable.push(record.to_string()),
        }
    }
    (entities, relationships, unparsable)
}

enum Record {
    Entity(RawEntity),
    Relationship(RawRelationship),
}

fn parse_record(record: &str) -> Option<Record> {
    let inner = record.strip_prefix('(')?.strip_suffix(')')?;
    let fields: Vec<&str> = inner.split('|').map(str::trim).collect();
    let tag = fields.first()?.trim_matches('"').to_ascii_lowercase();
    match tag.as_str() {
        "entity" if fields.len() >= 4 => {
            let name = canonical_name(fields[1]);
            if name.is_empty() {
                return None;
            }
            Some(Record::Entity(RawEntity {
                name,
                entity_type: canonical_name(fields[2]),
                description: fields[3..].join("|").trim().to_string(),
            }))
        }
        "relationship" if fields.len() >= 5 => {
            let source = canonical_name(fields[1]);
            let target = canonical_name(fields[2]);
            let strength: u32 = fields[fields.len() - 1].parse().ok()?;
            if source.is_empty() || target.is_empty() || !(1..=10).contains(&strength) {
                return None;
            }
            Some(Record::Relationship(RawRelationship {
                source,
                target,
                description: fields[3..fields.len() - 1].join("|").trim().to_string(),
                strength,
            }))
        }
        _ => None,
    }
}

fn wants_more(answer: &str) -> bool {
    answer.trim().trim_start_matches(|c: char| !c.is_alphabetic()).to_ascii_uppercase().starts_with("YES")
}

/// Runs the initial extraction and up to `max_gleanings` follow-up rounds.
///
/// Before every follow-up the provider is asked whether entities are still
/// missing; anything but a YES ends the loop.
pub fn extract_elements(
    chunk: &Chunk,
    provider: &dyn ModelProvider,
    max_gleanings: usize,
    templates: &PromptTemplates,
    temperature: f64,
) -> Result<Extraction, GraphError> {
    let prompt = templates.render(
        "extract",
        &[("input_text", chunk.text.as_str()), ("entity_types", DEFAULT_ENTITY_TYPES)],
    );
    let mut messages = vec![ChatMessage::user(prompt)];
    let ask = |messages: &[ChatMessage]| {
        complete_chat(provider, &CompletionRequest::with_messages(messages.to_vec()).temperature(temperature))
    };

    let mut out = Extraction {
        chunk_id: chunk.chunk_id.clone(),
        ..Extraction::default()
    };
    let mut reply = ask(&messages)?;
    absorb(&mut out, &reply);
    out.rounds = 1;

    for _ in 0..max_gleanings {
        messages.push(ChatMessage::assistant(non_empty(&reply)));
        messages.push(ChatMessage::user(templates.raw("glean_check")));
        let answer = ask(&messages)?;
        if !wants_more(&answer) {
            break;
        }
        messages.push(ChatMessage::assistant(non_empty(&answer)));
        messages.push(ChatMessage::user(templates.raw("glean")));
        reply = ask(&messages)?;
        absorb(&mut out, &reply);
        out.rounds += 1;
    }
    Ok(out)
}

fn non_empty(s: &str) -> String {
    if s.trim().is_empty() {
        COMPLETION_MARKER.to_string()
    } else {
        s.to_string()
    }
}

fn absorb(out: &mut Extraction, reply: &str) {
    let (entities, relationships, unparsable) = parse_records(reply);
    for line in &unparsable {
        tracing::warn!(chunk = %out.chunk_id, record = %line, "UnparsableRecord skipped");
    }
    out.entities.extend(entities);
    out.relationships.extend(relationships);
    out.unparsable.extend(unparsable);
}

/// Extracts every chunk with at most `workers` concurrent conversations.
/// Output order follows `chunks`.
pub fn extract_all(
    chunks: &[Chunk],
    provider: &dyn ModelProvider,
    max_gleanings: usize,
    templates: &PromptTemplates,
    temperature: f64,
    workers: usize,
) -> Result<Vec<Extraction>, GraphError> {
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<Extraction, GraphError>>> = (0..chunks.len()).map(|_| None).collect();
    let results = parking_lot::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, chunks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= chunks.len() {
                    break;
                }
                let r = extract_elements(&chunks[i], provider, max_gleanings, templates, temperature);
                results.lock()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every chunk processed")).collect()
}
