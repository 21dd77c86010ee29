use serde::{Deserialize, Serialize};

use num_traits::{Signed, Zero};

use super::{BenchmarkError, Category, ModelScorecard, Score};

/// Cell text when a percentage would divide by zero.
pub const UNDEFINED_CELL: &str = "n/a";

pub const DEGENERATE_RULE: &str =
    "if both vectors are constant and equal r = 1; if either vector is constant otherwise r = 0";

/// Decimal rendering truncated toward zero: 56/3 → "18.66", −4/3 → "-1.33".
pub fn render_truncated(value: Score, decimals: u32) -> String {
    render_scaled((value * Score::from_integer(10i64.pow(decimals))).trunc().to_integer(), decimals)
}

fn render_rounded(value: Score, decimals: u32) -> String {
    render_scaled((value * Score::from_integer(10i64.pow(decimals))).round().to_integer(), decimals)
}

fn render_scaled(scaled: i64, decimals: u32) -> String {
    let scale = 10i64.pow(decimals);
    let sign = if scaled < 0 { "-" } else { "" };
    let abs = scaled.abs();
    if decimals == 0 {
        return format!("{sign}{abs}");
    }
    format!("{sign}{}.{:0width$}", abs / scale, abs % scale, width = decimals as usize)
}

fn signed(text: String, value: Score) -> String {
    if value.is_positive() && !text.chars().all(|c| c == '0' || c == '.') {
        format!("+{text}")
    } else {
        text
    }
}

/// A total as it is displayed: truncated to hundredths.
pub fn display_total(value: Score) -> Score {
    (value * Score::from_integer(100)).trunc() / Score::from_integer(100)
}

/// `100·(ours − other)/other` computed on the displayed (truncated) totals;
/// `None` when the other total displays as zero.
pub fn percentage_cell(ours: Score, other: Score) -> Option<Score> {
    let (o, t) = (display_total(ours), display_total(other));
    if t.is_zero() {
        None
    } else {
        Some(Score::from_integer(100) * (o - t) / t)
    }
}

/// A fraction rendered as a percentage with one rounded decimal: 3/14 → "21.4%".
pub fn render_percent_1dp(fraction: Score) -> String {
    format!("{}%", render_rounded(fraction * Score::from_integer(100), 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    /// ours − other, in points.
    Difference,
    /// 100·(ours − other)/other on displayed totals.
    Percentage,
    /// 100·(ours − other)/scale, relative to the category's maximum score.
    ScaleRelative,
}

/// Rows are our models, columns the models compared against.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub kind: TableKind,
    pub category: Category,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<Option<Score>>>,
}

impl ComparisonTable {
    pub fn render_cell(&self, value: Option<Score>) -> String {
        match (self.kind, value) {
            (_, None) => UNDEFINED_CELL.to_string(),
            (TableKind::Difference, Some(v)) => signed(render_truncated(v, 2), v),
            (TableKind::Percentage, Some(v)) => format!("{}%", signed(render_truncated(v, 2), v)),
            (TableKind::ScaleRelative, Some(v)) => format!("{}%", signed(render_rounded(v, 1), v)),
        }
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<String> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.render_cell(self.cells[r][c]))
    }

    fn rendered(&self) -> Vec<Vec<String>> {
        let mut out = vec![std::iter::once(String::new()).chain(self.columns.iter().cloned()).collect::<Vec<_>>()];
        for (name, row) in self.rows.iter().zip(&self.cells) {
            out.push(std::iter::once(name.clone()).chain(row.iter().map(|v| self.render_cell(*v))).collect());
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        for row in self.rendered() {
            writer.write_record(&row).expect("in-memory csv write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
    }

    /// Plain text with right-aligned columns.
    pub fn to_text(&self) -> String {
        let rows = self.rendered();
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        rows.iter()
            .map(|r| {
                r.iter().zip(&widths).enumerate().map(|(i, (cell, w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") }).collect::<Vec<_>>().join("  ").trim_end().to_string() + "\n"
            })
            .collect()
    }
}

fn question_set(card: &ModelScorecard) -> Vec<String> {
    let mut qids: Vec<String> = card.records.iter().map(|r| r.qid.clone()).collect();
    qids.dedup();
    qids
}

fn check_same_questions(cards: &[&ModelScorecard]) -> Result<(), BenchmarkError> {
    let Some(first) = cards.first() else {
        return Ok(());
    };
    let reference = question_set(first);
    for card in &cards[1..] {
        if question_set(card) != reference || card.repetitions != first.repetitions {
            return Err(BenchmarkError::MismatchedQuestionSets(format!(
                "{} and {} were not run on the same questions and repetitions",
                first.model_name, card.model_name
            )));
        }
    }
    Ok(())
}

fn table(
    kind: TableKind,
    ours: &[&ModelScorecard],
    others: &[&ModelScorecard],
    category: Category,
    cell: impl Fn(Score, Score) -> Option<Score>,
) -> Result<ComparisonTable, BenchmarkError> {
    let all: Vec<&ModelScorecard> = ours.iter().chain(others).copied().collect();
    check_same_questions(&all)?;
    Ok(ComparisonTable {
        kind,
        category,
        rows: ours.iter().map(|c| c.model_name.clone()).collect(),
        columns: others.iter().map(|c| c.model_name.clone()).collect(),
        cells: ours
            .iter()
            .map(|o| others.iter().map(|t| cell(o.total(category), t.total(category))).collect())
            .collect(),
    })
}

/// Exact `ours − other` per category total.
pub fn difference_table(ours: &[&ModelScorecard], others: &[&ModelScorecard], category: Category) -> Result<ComparisonTable, BenchmarkError> {
    table(TableKind::Difference, ours, others, category, |o, t| Some(o - t))
}

pub fn percentage_table(ours: &[&ModelScorecard], others: &[&ModelScorecard], category: Category) -> Result<ComparisonTable, BenchmarkError> {
    table(TableKind::Percentage, ours, others, category, percentage_cell)
}

/// Differences as a share of the category's maximum score `scale_max`.
pub fn scale_relative_table(
    ours: &[&ModelScorecard],
    others: &[&ModelScorecard],
    category: Category,
    scale_max: i64,
) -> Result<ComparisonTable, BenchmarkError> {
    if scale_max <= 0 {
        return Err(BenchmarkError::InvalidParameter("scale maximum must be positive".into()));
    }
    table(TableKind::ScaleRelative, ours, others, category, |o, t| {
        Some(Score::from_integer(100) * (o - t) / Score::from_integer(scale_max))
    })
}

/// Fraction of the category's questions whose repeated parsed letters are
/// not all identical.
pub fn variability(card: &ModelScorecard, category: Category) -> Score {
    let mut total = 0i64;
    let mut varying = 0i64;
    let mut i = 0;
    while i < card.records.len() {
        let qid = &card.records[i].qid;
        let j = i + card.records[i..].iter().take_while(|r| &r.qid == qid).count();
        let in_category = card.categories.get(qid).copied();
        if in_category == Some(category) {
            total += 1;
            if card.records[i..j].iter().any(|r| r.parsed != card.records[i].parsed) {
                varying += 1;
            }
        }
        i = j;
    }
    if total == 0 {
        Score::zero()
    } else {
        Score::new(varying, total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// 1 for a correct attempt, 0 otherwise.
    Correctness,
    /// A..D → 1..4, INVALID → 0.
    LetterOrdinal,
}

impl std::str::FromStr for Encoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "correctness" => Ok(Encoding::Correctness),
            "letter_ordinal" | "letter-ordinal" => Ok(Encoding::LetterOrdinal),
            other => Err(format!("unknown encoding {other:?} (expected correctness or letter_ordinal)")),
        }
    }
}

fn encode(card: &ModelScorecard, encoding: Encoding, category: Option<Category>) -> Vec<i64> {
    let keep: Vec<&str> = match category {
        None => Vec::new(),
        Some(c) => card.per_question.iter().filter(|(_, cat, _)| *cat == c).map(|(q, _, _)| q.as_str()).collect(),
    };
    card.records
        .iter()
        .filter(|r| category.is_none() || keep.contains(&r.qid.as_str()))
        .map(|r| match encoding {
            Encoding::Correctness => i64::from(r.is_correct),
            Encoding::LetterOrdinal => r.parsed.ordinal(),
        })
        .collect()
}

/// Pearson r of two integer vectors, computed from exact integer sums.
pub fn pearson(x: &[i64], y: &[i64]) -> Result<f64, BenchmarkError> {
    if x.len() != y.len() {
        return Err(BenchmarkError::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(BenchmarkError::InvalidParameter("empty vectors".into()));
    }
    let n = x.len() as i128;
    let (sx, sy): (i128, i128) = (x.iter().map(|&v| v as i128).sum(), y.iter().map(|&v| v as i128).sum());
    let sxx: i128 = x.iter().map(|&v| (v as i128) * (v as i128)).sum();
    let syy: i128 = y.iter().map(|&v| (v as i128) * (v as i128)).sum();
    let sxy: i128 = x.iter().zip(y).map(|(&a, &b)| (a as i128) * (b as i128)).sum();
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    let cov = n * sxy - sx * sy;
    if vx == 0 || vy == 0 {
        return Ok(if vx == 0 && vy == 0 && x == y { 1.0 } else { 0.0 });
    }
    if vx == vy {
        return Ok((cov as f64 / vx as f64).clamp(-1.0, 1.0));
    }
    Ok((cov as f64 / ((vx as f64) * (vy as f64)).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonMatrix {
    pub models: Vec<String>,
    pub encoding: Encoding,
    pub category: Option<Category>,
    pub values: Vec<Vec<f64>>,
    pub degenerate_rule: String,
}

impl PearsonMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = format!(",{}\n", self.models.join(","));
        for (name, row) in self.models.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

/// Pairwise Pearson correlation of the models' attempt vectors (attempts
/// concatenated in question order, repetitions in order).
pub fn pearson_matrix(cards: &[&ModelScorecard], encoding: Encoding, category: Option<Category>) -> Result<PearsonMatrix, BenchmarkError> {
    if cards.len() < 2 {
        return Err(BenchmarkError::InvalidParameter("pearson matrix needs at least two models".into()));
    }
    check_same_questions(cards)?;
    let vectors: Vec<Vec<i64>> = cards.iter().map(|c| encode(c, encoding, category)).collect();
    let n = cards.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        values[i][i] = 1.0;
        for j in i + 1..n {
            let r = pearson(&vectors[i], &vectors[j])?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(PearsonMatrix {
        models: cards.iter().map(|c| c.model_name.clone()).collect(),
        encoding,
        category,
        values,
        degenerate_rule: DEGENERATE_RULE.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    /// (qid, mean of the others' scores / our score).
    pub ratios: Vec<(String, Score)>,
    /// Questions where our score is 0, left out of the ratios.
    pub excluded_zero: Vec<String>,
    pub mean: Option<Score>,
    pub median: Option<Score>,
}

/// Per keyed question: mean of the other models' scores divided by ours.
pub fn similarity_rate(
    ours: &ModelScorecard,
    others: &[&ModelScorecard],
    category: Option<Category>,
) -> Result<SimilarityReport, BenchmarkError> {
    if others.is_empty() {
        return Err(BenchmarkError::InvalidParameter("similarity rate needs at least one other model".into()));
    }
    let all: Vec<&ModelScorecard> = std::iter::once(ours).chain(others.iter().copied()).collect();
    check_same_questions(&all)?;
    let mut ratios = Vec::new();
    let mut excluded_zero = Vec::new();
    for (qid, cat, our) in &ours.per_question {
        if category.is_some_and(|c| c != *cat) {
            continue;
        }
        if our.is_zero() {
            excluded_zero.push(qid.clone());
            continue;
        }
        let sum: Score = others.iter().map(|o| o.score(qid).unwrap_or_else(Score::zero)).sum();
        let mean = sum / Score::from_integer(others.len() as i64);
        ratios.push((qid.clone(), mean / our));
    }
    let (mean, median) = if ratios.is_empty() {
        (None, None)
    } else {
        let total: Score = ratios.iter().map(|(_, r)| *r).sum();
        let mut sorted: Vec<Score> = ratios.iter().map(|(_, r)| *r).collect();
        sorted.sort();
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[mid] } else { (sorted[mid - 1] + sorted[mid]) / Score::from_integer(2) };
        (Some(total / Score::from_integer(ratios.len() as i64)), Some(median))
    };
    Ok(SimilarityReport { ratios, excluded_zero, mean, median })
}
