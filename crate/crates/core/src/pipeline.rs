//! End-to-end build steps over one output directory.
//!
//! `ingest` writes the chunk set and its embedding index (plus the optional
//! Q&A index); `build_graph` reads the chunk set back and writes the graph
//! artifacts, the entity index and `manifest.json`; [`load_engine`] turns
//! whatever is present into an [`Engine`].

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{AppConfig, ConfigError, ProviderKind};
use crate::corpus::{chunk_corpus, load_corpus, tag_code_corpus, Chunk, CorpusError, DocumentKind};
use crate::embedding_index::{build_index, EmbeddingIndex, IndexError};
use crate::knowledge_graph::{
    export_graph, extract_all, leiden_partition, load_graph, load_reports, merge_elements, save_reports,
    summarize_communities, GraphError, LeidenConfig, MergeStats, PhaseQuality, ReportFailure, ENTITIES_FILE, REPORTS_FILE,
};
use crate::model_client::{HttpProvider, MockScript, ModelError, ModelProvider, ScriptedMock};
use crate::prompts::PromptTemplates;
use crate::query_engine::{Engine, EngineParts, QaPair, QueryConfig};

pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const CHUNK_INDEX_FILE: &str = "chunk_index.csv";
pub const QA_PAIRS_FILE: &str = "qa_pairs.jsonl";
pub const QA_INDEX_FILE: &str = "qa_index.csv";
pub const ENTITY_INDEX_FILE: &str = "entity_index.csv";
pub const BUILD_MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Provider(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("chunk set is empty; run ingest on a non-empty corpus first")]
    EmptyChunkSet,
    #[error("nothing built in {0}: run ingest first")]
    NotBuilt(PathBuf),
}

impl PipelineError {
    /// True when the failure came from the model provider.
    pub fn is_provider(&self) -> bool {
        matches!(
            self,
            PipelineError::Provider(_) | PipelineError::Index(IndexError::Provider(_)) | PipelineError::Graph(GraphError::Provider(_))
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Provider selected by the `[provider]` section.
pub fn provider_from_config(cfg: &AppConfig) -> Result<Arc<dyn ModelProvider>, PipelineError> {
    Ok(match cfg.provider.kind {
        ProviderKind::Mock => {
            let script = match &cfg.provider.mock_script {
                Some(path) => MockScript::load(path)?,
                None => MockScript::default(),
            };
            Arc::new(ScriptedMock::new(script))
        }
        ProviderKind::Http => Arc::new(HttpProvider::new(cfg.provider.http.clone())?),
    })
}

/// Built-in templates, overridden by `templates_dir` when configured.
pub fn templates_from_config(cfg: &AppConfig) -> Result<PromptTemplates, PipelineError> {
    match &cfg.templates_dir {
        Some(dir) => PromptTemplates::load_dir(dir).map_err(io_err(dir)),
        None => Ok(PromptTemplates::default()),
    }
}

/// One line of `chunks.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRecord {
    #[serde(flatten)]
    pub chunk: Chunk,
    pub kind: DocumentKind,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| PipelineError::Malformed { path: path.to_path_buf(), reason: e.to_string() })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| PipelineError::Malformed {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(rows)
}

fn write_pretty_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Malformed { path: path.to_path_buf(), reason: e.to_string() })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    /// Relative paths to load; everything under the root when absent.
    pub manifest: Option<Vec<String>>,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub code_patterns: Vec<String>,
    pub embed_batch: usize,
    /// JSON-lines file of `{id, question, answer}` records for faq mode.
    pub qa_file: Option<PathBuf>,
}

impl IngestOptions {
    pub fn from_config(cfg: &AppConfig) -> Self {
        Self {
            manifest: None,
            chunk_size: cfg.corpus.chunk_size,
            chunk_overlap: cfg.corpus.chunk_overlap,
            code_patterns: cfg.corpus.code_patterns.clone(),
            embed_batch: cfg.corpus.embed_batch,
            qa_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents: usize,
    pub chunks: usize,
    pub code_chunks: usize,
    pub qa_pairs: usize,
}

pub fn ingest(corpus_root: &Path, opts: &IngestOptions, provider: &dyn ModelProvider, out: &Path) -> Result<IngestReport, PipelineError> {
    // Validate parameters before touching the corpus.
    if opts.chunk_size == 0 || opts.chunk_overlap >= opts.chunk_size {
        return Err(CorpusError::InvalidChunkParams { size: opts.chunk_size, overlap: opts.chunk_overlap }.into());
    }
    let docs = load_corpus(corpus_root, opts.manifest.as_deref())?;
    let docs = tag_code_corpus(docs, &opts.code_patterns)?;
    let kinds: BTreeMap<&str, DocumentKind> = docs.iter().map(|d| (d.doc_id.as_str(), d.kind)).collect();
    let chunks = chunk_corpus(&docs, opts.chunk_size, opts.chunk_overlap)?;
    let records: Vec<ChunkRecord> = chunks.into_iter().map(|c| ChunkRecord { kind: kinds[c.doc_id.as_str()], chunk: c }).collect();
    tracing::info!(documents = docs.len(), chunks = records.len(), "corpus chunked");

    let entries: Vec<(String, String)> = records.iter().map(|r| (r.chunk.chunk_id.clone(), r.chunk.text.clone())).collect();
    let index = build_index(&entries, provider, opts.embed_batch)?;

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_jsonl(&out.join(CHUNKS_FILE), &records)?;
    index.save_csv(&out.join(CHUNK_INDEX_FILE))?;

    let mut qa_count = 0;
    if let Some(qa_path) = &opts.qa_file {
        let pairs: Vec<QaPair> = read_jsonl(qa_path)?;
        if !pairs.is_empty() {
            let entries: Vec<(String, String)> = pairs.iter().map(|p| (p.id.clone(), p.question.clone())).collect();
            build_index(&entries, provider, opts.embed_batch)?.save_csv(&out.join(QA_INDEX_FILE))?;
            write_jsonl(&out.join(QA_PAIRS_FILE), &pairs)?;
        }
        qa_count = pairs.len();
    }

    Ok(IngestReport {
        documents: docs.len(),
        chunks: records.len(),
        code_chunks: records.iter().filter(|r| r.kind == DocumentKind::Code).count(),
        qa_pairs: qa_count,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOptions {
    pub max_gleanings: usize,
    pub leiden: LeidenConfig,
    pub report_levels: Vec<usize>,
    pub summary_char_budget: usize,
    pub report_context_chars: usize,
    pub workers: usize,
    pub temperature: f64,
    pub embed_batch: usize,
}

impl BuildOptions {
    pub fn from_config(cfg: &AppConfig) -> Self {
        Self {
            max_gleanings: cfg.graph.max_gleanings,
            leiden: cfg.graph.leiden(),
            report_levels: cfg.graph.report_levels.clone(),
            summary_char_budget: cfg.graph.summary_char_budget,
            report_context_chars: cfg.graph.report_context_chars,
            workers: cfg.graph.extract_workers,
            temperature: cfg.graph.temperature,
            embed_batch: cfg.corpus.embed_batch,
        }
    }
}

/// Everything needed to reproduce or audit a graph build. Contains no
/// timestamps so identical inputs give an identical file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub seed: u64,
    pub resolution: f64,
    pub max_levels: usize,
    pub max_gleanings: usize,
    pub template_version: String,
    pub chat_model: String,
    pub documents: Vec<String>,
    pub chunk_count: usize,
    pub entity_count: usize,
    pub relationship_count: usize,
    /// Community count per level, coarsest first.
    pub communities_per_level: Vec<usize>,
    pub modularity: f64,
    pub quality_log: Vec<PhaseQuality>,
    pub report_count: usize,
    pub report_failures: Vec<ReportFailure>,
    pub unparsable_records: usize,
    pub merge: MergeStats,
}

pub fn build_graph(
    out: &Path,
    opts: &BuildOptions,
    provider: &dyn ModelProvider,
    templates: &PromptTemplates,
) -> Result<BuildManifest, PipelineError> {
    let chunks_path = out.join(CHUNKS_FILE);
    if !chunks_path.is_file() {
        return Err(PipelineError::NotBuilt(out.to_path_buf()));
    }
    let records: Vec<ChunkRecord> = read_jsonl(&chunks_path)?;
    if records.is_empty() {
        return Err(PipelineError::EmptyChunkSet);
    }
    let chunks: Vec<Chunk> = records.iter().map(|r| r.chunk.clone()).collect();

    let extractions = extract_all(&chunks, provider, opts.max_gleanings, templates, opts.temperature, opts.workers)?;
    let unparsable_records = extractions.iter().map(|e| e.unparsable.len()).sum();
    let (graph, merge) = merge_elements(&extractions, provider, opts.summary_char_budget, templates, opts.temperature)?;
    tracing::info!(entities = graph.entities.len(), relationships = graph.relationships.len(), "graph merged");

    let hierarchy = leiden_partition(&graph, &opts.leiden);
    let outcome = summarize_communities(
        &graph,
        &hierarchy.assignments,
        provider,
        &opts.report_levels,
        templates,
        opts.temperature,
        opts.report_context_chars,
    );
    for failure in &outcome.failures {
        tracing::warn!(community = failure.community_id, reason = %failure.reason, "no report for community");
    }

    export_graph(&graph, &hierarchy.assignments, out)?;
    save_reports(out, &outcome.reports)?;

    let entity_index_path = out.join(ENTITY_INDEX_FILE);
    if graph.is_empty() {
        if entity_index_path.exists() {
            std::fs::remove_file(&entity_index_path).map_err(io_err(&entity_index_path))?;
        }
    } else {
        let entries: Vec<(String, String)> =
            graph.entities.values().map(|e| (e.name.clone(), format!("{}: {}", e.name, e.description))).collect();
        build_index(&entries, provider, opts.embed_batch)?.save_csv(&entity_index_path)?;
    }

    let mut documents: Vec<String> = records.iter().map(|r| r.chunk.doc_id.clone()).collect();
    documents.dedup();
    let manifest = BuildManifest {
        seed: opts.leiden.seed,
        resolution: opts.leiden.resolution,
        max_levels: opts.leiden.max_levels,
        max_gleanings: opts.max_gleanings,
        template_version: templates.version(),
        chat_model: provider.chat_model_id().to_string(),
        documents,
        chunk_count: records.len(),
        entity_count: graph.entities.len(),
        relationship_count: graph.relationships.len(),
        communities_per_level: hierarchy.run.levels.iter().map(|l| l.iter().max().map_or(0, |m| m + 1)).collect(),
        modularity: hierarchy.run.quality,
        quality_log: hierarchy.run.quality_log.clone(),
        report_count: outcome.reports.len(),
        report_failures: outcome.failures,
        unparsable_records,
        merge,
    };
    write_pretty_json(&out.join(BUILD_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(out: &Path) -> Result<Option<BuildManifest>, PipelineError> {
    let path = out.join(BUILD_MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map(Some).map_err(|e| PipelineError::Malformed { path, reason: e.to_string() })
}

fn optional_index(path: PathBuf) -> Result<Option<EmbeddingIndex>, PipelineError> {
    if path.is_file() {
        Ok(Some(EmbeddingIndex::load_csv(&path)?))
    } else {
        Ok(None)
    }
}

/// Loads the artifacts under `out`. Requires at least an ingested chunk set;
/// graph artifacts and the Q&A index are picked up when present.
pub fn load_engine_parts(out: &Path) -> Result<EngineParts, PipelineError> {
    let chunks_path = out.join(CHUNKS_FILE);
    if !chunks_path.is_file() || !out.join(CHUNK_INDEX_FILE).is_file() {
        return Err(PipelineError::NotBuilt(out.to_path_buf()));
    }
    let records: Vec<ChunkRecord> = read_jsonl(&chunks_path)?;
    let chunk_kinds = records.into_iter().map(|r| (r.chunk.chunk_id, r.kind)).collect();

    let (graph, communities, reports) = if out.join(ENTITIES_FILE).is_file() {
        let (graph, communities) = load_graph(out)?;
        let reports = if out.join(REPORTS_FILE).is_file() { load_reports(out)? } else { Vec::new() };
        (graph, communities, reports)
    } else {
        Default::default()
    };
    let qa_pairs_path = out.join(QA_PAIRS_FILE);
    let qa_pairs = if qa_pairs_path.is_file() { read_jsonl(&qa_pairs_path)? } else { Vec::new() };

    Ok(EngineParts {
        graph,
        communities,
        reports,
        chunk_index: optional_index(out.join(CHUNK_INDEX_FILE))?,
        chunk_kinds,
        entity_index: optional_index(out.join(ENTITY_INDEX_FILE))?,
        qa_index: optional_index(out.join(QA_INDEX_FILE))?,
        qa_pairs,
    })
}

pub fn load_engine(
    out: &Path,
    provider: Arc<dyn ModelProvider>,
    templates: PromptTemplates,
    config: QueryConfig,
) -> Result<Engine, PipelineError> {
    Ok(Engine::new(load_engine_parts(out)?, provider, templates, config))
}
