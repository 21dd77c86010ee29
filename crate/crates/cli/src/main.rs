//! `reservoirchat` — ingest a corpus, build the graph, query it, run the MCQ
//! benchmark and serve the HTTP API.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 typed domain outcome
//! (no match, no relevant communities, mismatched question sets, ...),
//! 3 model provider failure.

mod bench;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use reservoirchat_core::benchmark::BenchmarkError;
use reservoirchat_core::config::{AppConfig, ConfigError};
use reservoirchat_core::corpus::{parse_manifest, CorpusError};
use reservoirchat_core::model_client::ModelError;
use reservoirchat_core::pipeline::{
    build_graph, ingest, load_engine, provider_from_config, templates_from_config, BuildOptions, IngestOptions,
    PipelineError,
};
use reservoirchat_core::query_engine::{Mode, QueryError};
use reservoirchat_service::{AppState, ServiceError};

#[derive(Parser)]
#[command(name = "reservoirchat", version, about = "Graph-based documentation assistant and MCQ benchmark harness")]
struct Cli {
    /// TOML configuration file; every key can also be set as RCHAT__SECTION__KEY.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every artifact this tool writes.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a corpus and build its embedding index.
    Ingest {
        corpus_dir: PathBuf,
        /// File listing the relative paths to load, one per line.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        /// JSON-lines `{id, question, answer}` pairs for faq mode.
        #[arg(long)]
        qa: Option<PathBuf>,
    },
    /// Extract entities, detect communities and write reports.
    BuildGraph {
        #[arg(long)]
        gleanings: Option<usize>,
        #[arg(long)]
        resolution: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Answer one question; the answer goes to stdout, the trace to stderr.
    Query {
        question: String,
        #[arg(long, default_value = "local")]
        mode: Mode,
    },
    /// Run or analyse the multiple-choice benchmark.
    #[command(subcommand)]
    Bench(bench::BenchCommand),
    /// Serve the HTTP API over the build in --out.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                _ if e.is_provider() => 3,
                PipelineError::EmptyChunkSet | PipelineError::NotBuilt(_) => 2,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<QueryError>() {
            return match e {
                QueryError::Provider(_) => 3,
                QueryError::EmptyQuestion | QueryError::Index(_) => 1,
                QueryError::NoMatch { .. } | QueryError::NoRelevantCommunities | QueryError::Unavailable(..) => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<BenchmarkError>() {
            return match e {
                BenchmarkError::Io { .. } | BenchmarkError::Parse { .. } | BenchmarkError::InvalidParameter(_) => 1,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<ServiceError>() {
            return match e {
                ServiceError::Provider(_) => 3,
                ServiceError::Pipeline(p) if p.is_provider() => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<ModelError>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<ConfigError>().is_some() || cause.downcast_ref::<CorpusError>().is_some() {
            return 1;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let cfg = AppConfig::load(cli.config.as_deref())?;
    let out = cli.out;
    match cli.command {
        Command::Ingest { corpus_dir, manifest, size, overlap, qa } => cmd_ingest(&cfg, &out, &corpus_dir, manifest, size, overlap, qa),
        Command::BuildGraph { gleanings, resolution, seed, levels } => {
            let mut opts = BuildOptions::from_config(&cfg);
            opts.max_gleanings = gleanings.unwrap_or(opts.max_gleanings);
            opts.leiden.resolution = resolution.unwrap_or(opts.leiden.resolution);
            opts.leiden.seed = seed.unwrap_or(opts.leiden.seed);
            opts.leiden.max_levels = levels.unwrap_or(opts.leiden.max_levels);
            if !(opts.leiden.resolution > 0.0) {
                anyhow::bail!(ConfigError::Invalid("--resolution must be positive".into()));
            }
            let provider = provider_from_config(&cfg)?;
            let manifest = build_graph(&out, &opts, provider.as_ref(), &templates_from_config(&cfg)?)?;
            println!(
                "built graph: {} entities, {} relationships, communities per level {:?}, {} reports (seed {}, modularity {:.4})",
                manifest.entity_count,
                manifest.relationship_count,
                manifest.communities_per_level,
                manifest.report_count,
                manifest.seed,
                manifest.modularity
            );
            Ok(())
        }
        Command::Query { question, mode } => {
            let provider = provider_from_config(&cfg)?;
            let engine = load_engine(&out, provider, templates_from_config(&cfg)?, cfg.query.clone())?;
            let turn = engine.answer(&question, mode, &[])?;
            println!("{}", turn.content);
            for t in &turn.retrieval_trace {
                eprintln!("trace\t{:?}\t{}\t{:.4}", t.source_kind, t.id, t.score);
            }
            Ok(())
        }
        Command::Bench(cmd) => bench::run(&cfg, &out, cmd),
        Command::Serve { listen } => {
            let listen = listen.unwrap_or_else(|| cfg.service.listen.clone());
            let state = AppState::from_config(&cfg, &out)?;
            let runtime = tokio::runtime::Runtime::new().context("cannot start async runtime")?;
            runtime.block_on(reservoirchat_service::serve(state, &listen))?;
            Ok(())
        }
    }
}

fn cmd_ingest(
    cfg: &AppConfig,
    out: &Path,
    corpus_dir: &Path,
    manifest: Option<PathBuf>,
    size: Option<usize>,
    overlap: Option<usize>,
    qa: Option<PathBuf>,
) -> Result<()> {
    let mut opts = IngestOptions::from_config(cfg);
    opts.chunk_size = size.unwrap_or(opts.chunk_size);
    opts.chunk_overlap = overlap.unwrap_or(opts.chunk_overlap);
    opts.qa_file = qa;
    if let Some(path) = manifest {
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        opts.manifest = Some(parse_manifest(&text));
    }
    let provider: Arc<dyn reservoirchat_core::model_client::ModelProvider> = provider_from_config(cfg)?;
    let report = ingest(corpus_dir, &opts, provider.as_ref(), out)?;
    println!(
        "ingested {} documents into {} chunks ({} from code documents, {} Q&A pairs)",
        report.documents, report.chunks, report.code_chunks, report.qa_pairs
    );
    Ok(())
}
