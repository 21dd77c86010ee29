use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{parse_choice, render_prompt, BenchmarkError, Category, Choice, McqQuestion, Score};
use crate::model_client::{complete_chat, CompletionRequest, ModelProvider};
use crate::query_engine::{Engine, Mode};

/// Something that can be asked a benchmark prompt with no prior context.
pub trait BenchTarget: Sync {
    fn name(&self) -> &str;
    fn ask(&self, prompt: &str, temperature: f64) -> Result<String, String>;
}

pub struct ProviderTarget<'a> {
    pub name: String,
    pub provider: &'a dyn ModelProvider,
}

impl BenchTarget for ProviderTarget<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn ask(&self, prompt: &str, temperature: f64) -> Result<String, String> {
        complete_chat(self.provider, &CompletionRequest::from_prompt(prompt).temperature(temperature)).map_err(|e| e.to_string())
    }
}

/// The engine itself, answering through one query mode with an empty history.
/// The engine's own sampling temperature applies.
pub struct EngineTarget<'a> {
    pub name: String,
    pub engine: &'a Engine,
    pub mode: Mode,
}

impl BenchTarget for EngineTarget<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn ask(&self, prompt: &str, _temperature: f64) -> Result<String, String> {
        self.engine.answer(prompt, self.mode, &[]).map(|t| t.content).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub model: String,
    pub qid: String,
    /// 1-based.
    pub repetition: u32,
    pub raw_reply: String,
    pub parsed: Choice,
    pub is_correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-question and per-category exact scores of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelScorecard {
    pub model_name: String,
    pub repetitions: u32,
    /// Attempts ordered by dataset question order, then repetition.
    pub records: Vec<AttemptRecord>,
    /// Keyed questions only, in dataset order.
    pub per_question: Vec<(String, Category, Score)>,
    pub totals: BTreeMap<Category, Score>,
    /// Questions without a key: attempted but not scored.
    pub excluded: Vec<String>,
    /// Category of every attempted question, keyed or not.
    pub categories: BTreeMap<String, Category>,
}

impl ModelScorecard {
    /// Scores `records` against `questions`. Correctness is recomputed from
    /// the parsed letter and the current key, so key overrides apply to old runs.
    pub fn from_records(
        model_name: &str,
        questions: &[McqQuestion],
        repetitions: u32,
        records: &[AttemptRecord],
    ) -> Result<Self, BenchmarkError> {
        if repetitions == 0 {
            return Err(BenchmarkError::InvalidParameter("repetitions must be at least 1".into()));
        }
        let mut by_q: BTreeMap<&str, Vec<&AttemptRecord>> = BTreeMap::new();
        for r in records {
            by_q.entry(r.qid.as_str()).or_default().push(r);
        }
        if let Some(unknown) = by_q.keys().find(|qid| !questions.iter().any(|q| q.qid == **qid)) {
            return Err(BenchmarkError::MismatchedQuestionSets(format!("attempts mention unknown question {unknown}")));
        }

        let mut ordered = Vec::with_capacity(records.len());
        let mut per_question = Vec::new();
        let mut totals: BTreeMap<Category, Score> = Category::ALL.iter().map(|c| (*c, Score::from_integer(0))).collect();
        let mut excluded = Vec::new();
        for q in questions {
            let mut attempts: Vec<AttemptRecord> = by_q.get(q.qid.as_str()).map(|v| v.iter().map(|r| (*r).clone()).collect()).unwrap_or_default();
            attempts.sort_by_key(|r| r.repetition);
            let reps: Vec<u32> = attempts.iter().map(|r| r.repetition).collect();
            if reps != (1..=repetitions).collect::<Vec<_>>() {
                return Err(BenchmarkError::MismatchedQuestionSets(format!(
                    "question {} has repetitions {reps:?}, expected 1..={repetitions}",
                    q.qid
                )));
            }
            for a in attempts.iter_mut() {
                a.model = model_name.to_string();
                a.is_correct = q.correct.is_some() && Some(a.parsed) == q.correct;
            }
            match q.correct {
                Some(_) => {
                    let hits = attempts.iter().filter(|a| a.is_correct).count() as i64;
                    let score = Score::new(hits, repetitions as i64);
                    *totals.get_mut(&q.category).expect("all categories present") += score;
                    per_question.push((q.qid.clone(), q.category, score));
                }
                None => excluded.push(q.qid.clone()),
            }
            ordered.extend(attempts);
        }
        let categories = questions.iter().map(|q| (q.qid.clone(), q.category)).collect();
        Ok(Self { model_name: model_name.to_string(), repetitions, records: ordered, per_question, totals, excluded, categories })
    }

    pub fn total(&self, category: Category) -> Score {
        self.totals.get(&category).copied().unwrap_or_else(|| Score::from_integer(0))
    }

    pub fn score(&self, qid: &str) -> Option<Score> {
        self.per_question.iter().find(|(q, _, _)| q == qid).map(|(_, _, s)| *s)
    }

    pub fn summary(&self) -> ScorecardSummary {
        let render = |s: &Score| super::render_truncated(*s, 2);
        ScorecardSummary {
            model: self.model_name.clone(),
            repetitions: self.repetitions,
            attempts: self.records.len(),
            invalid_attempts: self.records.iter().filter(|r| r.parsed == Choice::Invalid).count(),
            totals: self.totals.iter().map(|(c, s)| (c.to_string(), render(s))).collect(),
            totals_exact: self.totals.iter().map(|(c, s)| (c.to_string(), s.to_string())).collect(),
            per_question: self.per_question.iter().map(|(q, _, s)| (q.clone(), render(s))).collect(),
            variability: Category::ALL
                .iter()
                .map(|c| (c.to_string(), super::render_percent_1dp(super::variability(self, *c))))
                .collect(),
            excluded_without_key: self.excluded.clone(),
        }
    }
}

/// Serializable digest written next to the attempt log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorecardSummary {
    pub model: String,
    pub repetitions: u32,
    pub attempts: usize,
    pub invalid_attempts: usize,
    pub totals: BTreeMap<String, String>,
    pub totals_exact: BTreeMap<String, String>,
    pub per_question: BTreeMap<String, String>,
    pub variability: BTreeMap<String, String>,
    pub excluded_without_key: Vec<String>,
}

/// Asks every question `repetitions` times, each attempt without history.
///
/// Different questions run on up to `workers` threads; repetitions of one
/// question run in order. Failed attempts count as INVALID.
pub fn run_model_benchmark(
    target: &dyn BenchTarget,
    questions: &[McqQuestion],
    repetitions: u32,
    temperature: f64,
    workers: usize,
) -> Result<ModelScorecard, BenchmarkError> {
    if repetitions == 0 {
        return Err(BenchmarkError::InvalidParameter("repetitions must be at least 1".into()));
    }
    let excluded: Vec<&str> = questions.iter().filter(|q| q.correct.is_none()).map(|q| q.qid.as_str()).collect();
    if !excluded.is_empty() {
        tracing::warn!(questions = ?excluded, "no answer key; attempted but excluded from totals");
    }

    let next = AtomicUsize::new(0);
    let slots = parking_lot::Mutex::new(vec![Vec::new(); questions.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, questions.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(q) = questions.get(i) else { break };
                let prompt = render_prompt(q);
                let attempts: Vec<AttemptRecord> = (1..=repetitions)
                    .map(|repetition| {
                        let (raw_reply, error) = match target.ask(&prompt, temperature) {
                            Ok(reply) => (reply, None),
                            Err(e) => {
                                tracing::warn!(qid = %q.qid, repetition, error = %e, "attempt failed; recorded as INVALID");
                                (String::new(), Some(e))
                            }
                        };
                        let parsed = if error.is_some() { Choice::Invalid } else { parse_choice(&raw_reply) };
                        AttemptRecord {
                            model: target.name().to_string(),
                            qid: q.qid.clone(),
                            repetition,
                            raw_reply,
                            parsed,
                            is_correct: false,
                            error,
                        }
                    })
                    .collect();
                slots.lock()[i] = attempts;
            });
        }
    });
    let records: Vec<AttemptRecord> = slots.into_inner().into_iter().flatten().collect();
    ModelScorecard::from_records(target.name(), questions, repetitions, &records)
}

pub fn write_attempts(path: &Path, records: &[AttemptRecord]) -> Result<(), BenchmarkError> {
    let io = |source| BenchmarkError::Io { path: path.display().to_string(), source };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("attempt records serialize");
        writeln!(file, "{line}").map_err(io)?;
    }
    file.flush().map_err(io)
}

pub fn read_attempts(path: &Path) -> Result<Vec<AttemptRecord>, BenchmarkError> {
    let io = |source| BenchmarkError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BenchmarkError::Parse {
            path: format!("{}:{}", path.display(), i + 1),
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// A self-contained run: the questions as asked, the settings and every
/// attempt. This is what `bench run` saves and `bench report` reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResults {
    pub model: String,
    pub repetitions: u32,
    pub temperature: f64,
    pub questions: Vec<McqQuestion>,
    pub records: Vec<AttemptRecord>,
}

impl BenchResults {
    pub fn from_scorecard(card: &ModelScorecard, questions: &[McqQuestion], temperature: f64) -> Self {
        Self {
            model: card.model_name.clone(),
            repetitions: card.repetitions,
            temperature,
            questions: questions.to_vec(),
            records: card.records.clone(),
        }
    }

    pub fn scorecard(&self) -> Result<ModelScorecard, BenchmarkError> {
        ModelScorecard::from_records(&self.model, &self.questions, self.repetitions, &self.records)
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchmarkError> {
        let mut text = serde_json::to_string_pretty(self).expect("results serialize");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| BenchmarkError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, BenchmarkError> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchmarkError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|e| BenchmarkError::Parse { path: path.display().to_string(), reason: e.to_string() })
    }
}
