//! Multiple-choice benchmark: dataset handling, repeated scored attempts
//! against a provider or the engine, and the comparison analyses.
//!
//! Scores are exact rationals throughout. Rendering truncates toward zero,
//! so a total of 56/3 shows as `18.66`.

mod analysis;
mod run;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analysis::{
    difference_table, display_total, pearson, pearson_matrix, percentage_cell, percentage_table, render_percent_1dp,
    render_truncated, scale_relative_table, similarity_rate, variability, ComparisonTable, Encoding, PearsonMatrix,
    SimilarityReport, DEGENERATE_RULE, UNDEFINED_CELL,
};
pub use run::{
    read_attempts, run_model_benchmark, write_attempts, AttemptRecord, BenchResults, BenchTarget, EngineTarget, ModelScorecard,
    ProviderTarget, ScorecardSummary,
};

pub use num_rational::Rational64 as Score;

pub const DEFAULT_REPETITIONS: u32 = 3;
pub const DEFAULT_BENCH_TEMPERATURE: f64 = 0.1;

/// Instruction block prepended to every question.
pub const MCQ_INSTRUCTIONS: &str = "You will be given a question with four answer options labeled A, B, C, and D. Please respond using the library ReservoirPy with only the letter (A, B, C, or D) that is the correct answer.";

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("schema error in question {qid}: {reason}")]
    SchemaError { qid: String, reason: String },
    #[error("duplicate question id {0}")]
    DuplicateQid(String),
    #[error("scorecards cover different question sets: {0}")]
    MismatchedQuestionSets(String),
    #[error("attempt vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Knowledge,
    Code,
}

impl Category {
    pub const ALL: [Category; 2] = [Category::Knowledge, Category::Code];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Knowledge => "knowledge",
            Category::Code => "code",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subcategory {
    Beginner,
    Intermediate,
    Advanced,
    Expert,
    CodePlain,
    CodeDebug,
}

impl Subcategory {
    pub fn category(self) -> Category {
        match self {
            Subcategory::CodePlain | Subcategory::CodeDebug => Category::Code,
            _ => Category::Knowledge,
        }
    }
}

/// A parsed reply: one of the four letters or `INVALID`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    C,
    D,
    #[serde(rename = "INVALID")]
    Invalid,
}

impl Choice {
    pub const LETTERS: [Choice; 4] = [Choice::A, Choice::B, Choice::C, Choice::D];

    /// A..D → 1..4, INVALID → 0.
    pub fn ordinal(self) -> i64 {
        match self {
            Choice::A => 1,
            Choice::B => 2,
            Choice::C => 3,
            Choice::D => 4,
            Choice::Invalid => 0,
        }
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Choice::A => "A",
            Choice::B => "B",
            Choice::C => "C",
            Choice::D => "D",
            Choice::Invalid => "INVALID",
        })
    }
}

impl FromStr for Choice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Choice::A),
            "B" => Ok(Choice::B),
            "C" => Ok(Choice::C),
            "D" => Ok(Choice::D),
            other => Err(format!("{other:?} is not one of A, B, C, D")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqQuestion {
    pub qid: String,
    pub category: Category,
    pub subcategory: Subcategory,
    pub stem: String,
    pub options: BTreeMap<Choice, String>,
    pub correct: Option<Choice>,
}

impl McqQuestion {
    pub fn validate(&self) -> Result<(), BenchmarkError> {
        let err = |reason: String| BenchmarkError::SchemaError { qid: self.qid.clone(), reason };
        if self.qid.trim().is_empty() {
            return Err(err("empty qid".into()));
        }
        if self.stem.trim().is_empty() {
            return Err(err("empty stem".into()));
        }
        let keys: Vec<Choice> = self.options.keys().copied().collect();
        if keys != Choice::LETTERS {
            return Err(err(format!("expected options A, B, C, D, found {} option(s)", keys.len())));
        }
        if let Some((letter, _)) = self.options.iter().find(|(_, text)| text.trim().is_empty()) {
            return Err(err(format!("option {letter} is empty")));
        }
        if self.correct == Some(Choice::Invalid) {
            return Err(err("correct must be A, B, C or D".into()));
        }
        if self.subcategory.category() != self.category {
            return Err(err(format!("subcategory {:?} does not belong to {}", self.subcategory, self.category)));
        }
        Ok(())
    }
}

/// Parses and validates a dataset (JSON array of questions).
pub fn parse_benchmark(json: &str, origin: &str) -> Result<Vec<McqQuestion>, BenchmarkError> {
    let raw: Vec<serde_json::Value> =
        serde_json::from_str(json).map_err(|e| BenchmarkError::Parse { path: origin.into(), reason: e.to_string() })?;
    let mut seen = BTreeSet::new();
    let mut questions = Vec::with_capacity(raw.len());
    for (i, value) in raw.into_iter().enumerate() {
        let qid = value.get("qid").and_then(|q| q.as_str()).map_or_else(|| format!("#{}", i + 1), str::to_string);
        let q: McqQuestion =
            serde_json::from_value(value).map_err(|e| BenchmarkError::SchemaError { qid: qid.clone(), reason: e.to_string() })?;
        q.validate()?;
        if !seen.insert(q.qid.clone()) {
            return Err(BenchmarkError::DuplicateQid(q.qid));
        }
        questions.push(q);
    }
    let unkeyed: Vec<&str> = questions.iter().filter(|q| q.correct.is_none()).map(|q| q.qid.as_str()).collect();
    if !unkeyed.is_empty() {
        tracing::warn!(questions = ?unkeyed, "questions without an answer key are excluded from totals");
    }
    Ok(questions)
}

pub fn load_benchmark(path: &Path) -> Result<Vec<McqQuestion>, BenchmarkError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| BenchmarkError::Io { path: path.display().to_string(), source })?;
    parse_benchmark(&text, &path.display().to_string())
}

/// Question counts per category.
pub fn category_counts(questions: &[McqQuestion]) -> BTreeMap<Category, usize> {
    let mut counts = BTreeMap::new();
    for q in questions {
        *counts.entry(q.category).or_insert(0) += 1;
    }
    counts
}

/// Sets answer keys from `QID=LETTER` overrides; unknown qids are an error.
pub fn apply_key_overrides(questions: &mut [McqQuestion], overrides: &BTreeMap<String, Choice>) -> Result<(), BenchmarkError> {
    for (qid, letter) in overrides {
        let q = questions
            .iter_mut()
            .find(|q| &q.qid == qid)
            .ok_or_else(|| BenchmarkError::InvalidParameter(format!("key override for unknown question {qid}")))?;
        q.correct = Some(*letter);
    }
    Ok(())
}

/// Instruction block, blank line, stem, blank line, then one `X. option` line per letter.
pub fn render_prompt(question: &McqQuestion) -> String {
    let mut out = format!("{MCQ_INSTRUCTIONS}\n\n{}\n\n", question.stem.trim_end());
    for (letter, text) in &question.options {
        out.push_str(&format!("{letter}. {}\n", text.trim_end()));
    }
    out
}

/// The first whitespace-separated token that, stripped of surrounding
/// punctuation, is a single letter A–D in either case. Nothing found → INVALID.
pub fn parse_choice(raw_reply: &str) -> Choice {
    raw_reply
        .split_whitespace()
        .map(|token| token.trim_matches(|c: char| !c.is_alphanumeric()))
        .find_map(|token| token.parse::<Choice>().ok().filter(|_| token.len() == 1))
        .unwrap_or(Choice::Invalid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<McqQuestion> {
        parse_benchmark(include_str!("../../fixtures/benchmark.json"), "fixture").unwrap()
    }

    #[test]
    fn shipped_fixture_counts() {
        let qs = fixture();
        let counts = category_counts(&qs);
        assert_eq!(counts[&Category::Knowledge], 20);
        assert_eq!(counts[&Category::Code], 14);
        assert_eq!(qs.iter().filter(|q| q.subcategory == Subcategory::CodeDebug).count(), 8);
        assert_eq!(qs[0].qid, "K1");
        assert_eq!(qs[0].correct, Some(Choice::B));
        assert_eq!(qs.iter().filter(|q| q.correct.is_none()).map(|q| q.qid.as_str()).collect::<Vec<_>>(), vec!["K2"]);
    }

    #[test]
    fn three_options_is_schema_error() {
        let json = r#"[{"qid":"X1","category":"knowledge","subcategory":"beginner","stem":"?","options":{"A":"a","B":"b","C":"c"},"correct":"A"}]"#;
        assert!(matches!(parse_benchmark(json, "t"), Err(BenchmarkError::SchemaError { qid, .. }) if qid == "X1"));
    }

    #[test]
    fn duplicate_qid_rejected() {
        let one = r#"{"qid":"X1","category":"code","subcategory":"code_plain","stem":"?","options":{"A":"a","B":"b","C":"c","D":"d"},"correct":null}"#;
        assert!(matches!(parse_benchmark(&format!("[{one},{one}]"), "t"), Err(BenchmarkError::DuplicateQid(_))));
    }

    #[test]
    fn prompt_layout() {
        let qs = fixture();
        let p = render_prompt(&qs[0]);
        assert!(p.starts_with(MCQ_INSTRUCTIONS));
        assert!(p.contains("labeled A, B, C, and D"));
        let positions: Vec<usize> = ["\nA. ", "\nB. ", "\nC. ", "\nD. "].iter().map(|m| p.find(m).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        let code = qs.iter().find(|q| q.stem.contains("```python")).unwrap();
        assert!(render_prompt(code).contains(code.stem.trim_end()));
    }

    #[test]
    fn choice_parsing() {
        assert_eq!(parse_choice("B"), Choice::B);
        assert_eq!(parse_choice("The answer is C."), Choice::C);
        assert_eq!(parse_choice("Both A and B seem right"), Choice::A);
        assert_eq!(parse_choice("**(d)**"), Choice::D);
        assert_eq!(parse_choice("E"), Choice::Invalid);
        assert_eq!(parse_choice("AB"), Choice::Invalid);
        assert_eq!(parse_choice(""), Choice::Invalid);
    }

    #[test]
    fn key_override() {
        let mut qs = fixture();
        let overrides = BTreeMap::from([("K2".to_string(), Choice::A)]);
        apply_key_overrides(&mut qs, &overrides).unwrap();
        assert_eq!(qs[1].correct, Some(Choice::A));
        assert!(apply_key_overrides(&mut qs, &BTreeMap::from([("Z9".to_string(), Choice::A)])).is_err());
    }
}
