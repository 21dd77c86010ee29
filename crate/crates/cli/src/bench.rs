use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Subcommand, ValueEnum};
use reservoirchat_core::benchmark::{
    apply_key_overrides, difference_table, display_total, load_benchmark, pearson_matrix, percentage_table,
    render_percent_1dp, render_truncated, run_model_benchmark, scale_relative_table, similarity_rate, variability, BenchResults,
    BenchmarkError, Category, Choice, ComparisonTable, Encoding, EngineTarget, McqQuestion, ModelScorecard,
    ProviderTarget, Score,
};
use reservoirchat_core::config::AppConfig;
use reservoirchat_core::pipeline::{load_engine, provider_from_config, templates_from_config};
use reservoirchat_core::query_engine::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Target {
    /// The configured model provider, asked directly.
    Provider,
    /// The engine built in --out, answering through a query mode.
    #[value(name = "self")]
    SelfEngine,
}

#[derive(Subcommand)]
pub enum BenchCommand {
    /// Ask every question several times and save a results file.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        target: Target,
        #[arg(long)]
        reps: Option<u32>,
        #[arg(long)]
        temp: Option<f64>,
        /// Name recorded in the results; defaults to the model id or "ReservoirChat".
        #[arg(long)]
        name: Option<String>,
        /// Query mode used with --target self.
        #[arg(long, default_value = "local")]
        mode: Mode,
        /// Supply or replace an answer key, e.g. --key K2=A.
        #[arg(long = "key", value_parser = parse_key)]
        keys: Vec<(String, Choice)>,
    },
    /// Compare saved results: totals, difference/percentage tables,
    /// variability, Pearson matrix and similarity rate.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        results: Vec<PathBuf>,
        /// Model treated as ours (rows of the comparison tables); defaults to the first file.
        #[arg(long)]
        ours: Option<String>,
        /// Re-score every file against this dataset instead of the questions stored in it.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long = "key", value_parser = parse_key)]
        keys: Vec<(String, Choice)>,
        #[arg(long, default_value = "correctness")]
        encoding: Encoding,
    },
}

fn parse_key(raw: &str) -> Result<(String, Choice), String> {
    let (qid, letter) = raw.split_once('=').ok_or_else(|| format!("expected QID=LETTER, got {raw:?}"))?;
    Ok((qid.trim().to_string(), letter.parse()?))
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

pub fn run(cfg: &AppConfig, out: &Path, cmd: BenchCommand) -> Result<()> {
    match cmd {
        BenchCommand::Run { dataset, target, reps, temp, name, mode, keys } => {
            let mut questions = load_benchmark(&dataset)?;
            apply_key_overrides(&mut questions, &keys.into_iter().collect())?;
            let reps = reps.unwrap_or(cfg.bench.repetitions);
            let temp = temp.unwrap_or(cfg.bench.temperature);
            let provider = provider_from_config(cfg)?;
            let card = match target {
                Target::Provider => {
                    let name = name.unwrap_or_else(|| provider.chat_model_id().to_string());
                    let target = ProviderTarget { name, provider: provider.as_ref() };
                    run_model_benchmark(&target, &questions, reps, temp, cfg.bench.workers)?
                }
                Target::SelfEngine => {
                    let engine = load_engine(out, provider.clone(), templates_from_config(cfg)?, cfg.query.clone())?;
                    let name = name.unwrap_or_else(|| "ReservoirChat".to_string());
                    let target = EngineTarget { name, engine: &engine, mode };
                    run_model_benchmark(&target, &questions, reps, temp, cfg.bench.workers)?
                }
            };
            let results = BenchResults::from_scorecard(&card, &questions, temp);
            let dir = out.join("bench");
            std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
            let path = dir.join(format!("{}.results.json", file_stem(&card.model_name)));
            results.save(&path)?;
            let summary = serde_json::to_string_pretty(&card.summary())?;
            write_out(&dir, &format!("{}.summary.json", file_stem(&card.model_name)), &(summary + "\n"))?;

            println!("model: {}", card.model_name);
            for c in Category::ALL {
                println!("{c}: {}", render_truncated(card.total(c), 2));
            }
            if !card.excluded.is_empty() {
                println!("excluded (no answer key): {}", card.excluded.join(", "));
            }
            println!("results: {}", path.display());
            Ok(())
        }
        BenchCommand::Report { results, ours, dataset, keys, encoding } => {
            let mut runs: Vec<BenchResults> = results.iter().map(|p| BenchResults::load(p)).collect::<Result<_, _>>()?;
            let keys: BTreeMap<String, Choice> = keys.into_iter().collect();
            if let Some(path) = &dataset {
                let questions = load_benchmark(path)?;
                for r in &mut runs {
                    r.questions = questions.clone();
                }
            }
            for r in &mut runs {
                apply_key_overrides(&mut r.questions, &keys)?;
            }
            check_same_questions(&runs)?;
            let cards: Vec<ModelScorecard> = runs.iter().map(BenchResults::scorecard).collect::<Result<_, _>>()?;
            let text = report(&cards, ours.as_deref(), encoding, &runs[0].questions, &out.join("report"))?;
            print!("{text}");
            Ok(())
        }
    }
}

fn check_same_questions(runs: &[BenchResults]) -> Result<(), BenchmarkError> {
    let ids = |r: &BenchResults| r.questions.iter().map(|q| q.qid.clone()).collect::<BTreeSet<_>>();
    let first = ids(&runs[0]);
    for r in &runs[1..] {
        let other = ids(r);
        if other != first {
            let diff: Vec<String> = first.symmetric_difference(&other).cloned().collect();
            return Err(BenchmarkError::MismatchedQuestionSets(format!(
                "{} and {} differ on {}",
                runs[0].model,
                r.model,
                diff.join(", ")
            )));
        }
    }
    let mut names = BTreeSet::new();
    for r in runs {
        if !names.insert(r.model.as_str()) {
            return Err(BenchmarkError::InvalidParameter(format!("model {} appears twice", r.model)));
        }
    }
    Ok(())
}

fn keyed_count(questions: &[McqQuestion], category: Category) -> i64 {
    questions.iter().filter(|q| q.category == category && q.correct.is_some()).count() as i64
}

fn table_section(title: &str, table: &ComparisonTable) -> String {
    format!("== {title} ==\n{}\n", table.to_text())
}

fn report(
    cards: &[ModelScorecard],
    ours: Option<&str>,
    encoding: Encoding,
    questions: &[McqQuestion],
    dir: &Path,
) -> Result<String> {
    let ours_name = ours.unwrap_or(&cards[0].model_name);
    let Some(ours_card) = cards.iter().find(|c| c.model_name == ours_name) else {
        bail!(BenchmarkError::InvalidParameter(format!("--ours {ours_name} matches no results file")));
    };
    let others: Vec<&ModelScorecard> = cards.iter().filter(|c| c.model_name != ours_name).collect();
    let mut text = String::new();

    let mut totals_csv = String::from("model,category,total,total_exact,variability\n");
    text.push_str("== Totals ==\n");
    for card in cards {
        let mut line = card.model_name.clone();
        for c in Category::ALL {
            let v = variability(card, c);
            totals_csv.push_str(&format!(
                "{},{c},{},{},{}\n",
                card.model_name,
                render_truncated(display_total(card.total(c)), 2),
                card.total(c),
                render_truncated(v, 3)
            ));
            line.push_str(&format!(
                "  {c} {} (variability {})",
                render_truncated(card.total(c), 2),
                render_percent_1dp(v)
            ));
        }
        text.push_str(&line);
        text.push('\n');
    }
    text.push('\n');
    write_out(dir, "totals.csv", &totals_csv)?;

    if !others.is_empty() {
        for c in Category::ALL {
            let diff = difference_table(&[ours_card], &others, c)?;
            let pct = percentage_table(&[ours_card], &others, c)?;
            let scale = scale_relative_table(&[ours_card], &others, c, keyed_count(questions, c).max(1))?;
            write_out(dir, &format!("difference_{c}.csv"), &diff.to_csv())?;
            write_out(dir, &format!("percentage_{c}.csv"), &pct.to_csv())?;
            write_out(dir, &format!("scale_relative_{c}.csv"), &scale.to_csv())?;
            text.push_str(&table_section(&format!("Difference ({c})"), &diff));
            text.push_str(&table_section(&format!("Percentage ({c})"), &pct));
            text.push_str(&table_section(&format!("Relative to scale ({c})"), &scale));
        }

        let sim = similarity_rate(ours_card, &others, None)?;
        let fmt = |s: Option<Score>| s.map_or("n/a".to_string(), |v| format!("{v} ({})", render_truncated(v, 4)));
        text.push_str(&format!(
            "== Similarity rate vs {} ==\nmean {}\nmedian {}\nexcluded (our score 0): {}\n\n",
            ours_name,
            fmt(sim.mean),
            fmt(sim.median),
            if sim.excluded_zero.is_empty() { "none".to_string() } else { sim.excluded_zero.join(", ") }
        ));
        let mut sim_csv = String::from("qid,ratio\n");
        for (qid, r) in &sim.ratios {
            sim_csv.push_str(&format!("{qid},{r}\n"));
        }
        write_out(dir, "similarity.csv", &sim_csv)?;
    }

    let refs: Vec<&ModelScorecard> = cards.iter().collect();
    if refs.len() >= 2 {
        let matrix = pearson_matrix(&refs, encoding, None)?;
        write_out(dir, "pearson.csv", &matrix.to_csv())?;
        text.push_str(&format!("== Pearson ({encoding:?}) ==\n"));
        for (name, row) in matrix.models.iter().zip(&matrix.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            text.push_str(&format!("{name}: {}\n", cells.join(" ")));
        }
        text.push_str(&format!("({})\n", matrix.degenerate_rule));
    }
    Ok(text)
}
