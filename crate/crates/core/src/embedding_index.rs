//! Exact cosine-similarity index with CSV persistence.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_client::{embed_texts, ModelError, ModelProvider};

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_THRESHOLD: f64 = 0.75;
pub const DEFAULT_EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("io error: {0}")]
    IoError(#[from] std::io::Error),
    #[error("malformed row at line {line_no}: {reason}")]
    MalformedRow { line_no: u64, reason: String },
    #[error("inconsistent dimension at line {line_no}")]
    InconsistentDimension { line_no: u64 },
    #[error("duplicate item id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Provider(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexedItem {
    pub item_id: String,
    pub text: String,
    pub vector: Vec<f64>,
    pub norm: f64,
}

impl IndexedItem {
    pub fn new(item_id: impl Into<String>, text: impl Into<String>, vector: Vec<f64>) -> Self {
        let norm = l2_norm(&vector);
        Self {
            item_id: item_id.into(),
            text: text.into(),
            vector,
            norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHit {
    pub item_id: String,
    pub score: f64,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, IndexError> {
    if a.len() != b.len() {
        return Err(IndexError::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Descending score, then ascending id.
pub fn hit_order(a: &SimilarityHit, b: &SimilarityHit) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.item_id.cmp(&b.item_id))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    dim: usize,
    items: Vec<IndexedItem>,
}

impl EmbeddingIndex {
    pub fn from_items(items: Vec<IndexedItem>) -> Result<Self, IndexError> {
        let dim = items.first().map(|i| i.vector.len()).unwrap_or(0);
        let mut seen = std::collections::HashSet::new();
        for item in &items {
            if item.vector.len() != dim {
                return Err(IndexError::DimensionMismatch { expected: dim, found: item.vector.len() });
            }
            if !seen.insert(item.item_id.as_str()) {
                return Err(IndexError::DuplicateId(item.item_id.clone()));
            }
        }
        Ok(Self { dim, items })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[IndexedItem] {
        &self.items
    }

    pub fn get(&self, item_id: &str) -> Option<&IndexedItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    /// The `k` best items scoring at least `threshold`, by full linear scan.
    pub fn top_k(&self, query: &[f64], k: usize, threshold: f64) -> Result<Vec<SimilarityHit>, IndexError> {
        self.top_k_filtered(query, k, threshold, |_| true)
    }

    /// Like [`top_k`](Self::top_k) but only over items accepted by `keep`.
    pub fn top_k_filtered(
        &self,
        query: &[f64],
        k: usize,
        threshold: f64,
        keep: impl Fn(&IndexedItem) -> bool,
    ) -> Result<Vec<SimilarityHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.items.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, found: query.len() });
        }
        let query_norm = l2_norm(query);
        if query_norm == 0.0 {
            return Err(IndexError::ZeroVector);
        }
        let mut hits: Vec<SimilarityHit> = self
            .items
            .iter()
            .filter(|item| item.norm > 0.0 && keep(item))
            .map(|item| SimilarityHit {
                item_id: item.item_id.clone(),
                score: (dot(query, &item.vector) / (query_norm * item.norm)).clamp(-1.0, 1.0),
            })
            .filter(|hit| hit.score >= threshold)
            .collect();
        hits.sort_by(hit_order);
        hits.truncate(k);
        Ok(hits)
    }

    /// Writes `item_id,text,dim,v0..v{d-1}` rows.
    pub fn save_csv(&self, path: &Path) -> Result<(), IndexError> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(File::create(path)?));
        let mut header = vec!["item_id".to_string(), "text".to_string(), "dim".to_string()];
        header.extend((0..self.dim).map(|i| format!("v{i}")));
        writer.write_record(&header).map_err(csv_io)?;
        for item in &self.items {
            let mut row = Vec::with_capacity(3 + self.dim);
            row.push(item.item_id.clone());
            row.push(item.text.clone());
            row.push(item.vector.len().to_string());
            row.extend(item.vector.iter().map(|x| x.to_string()));
            writer.write_record(&row).map_err(csv_io)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self, IndexError> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(true)
            .from_reader(BufReader::new(File::open(path)?));
        let header = reader.headers().map_err(csv_row(1))?.clone();
        if header.len() < 3 || &header[0] != "item_id" || &header[1] != "text" || &header[2] != "dim" {
            return Err(IndexError::MalformedRow { line_no: 1, reason: "unexpected header".into() });
        }
        let dim = header.len() - 3;
        let mut items = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_row(0))?;
            let line_no = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() < 3 {
                return Err(IndexError::MalformedRow { line_no, reason: "too few columns".into() });
            }
            let declared: usize = record[2]
                .parse()
                .map_err(|_| IndexError::MalformedRow { line_no, reason: format!("bad dim {:?}", &record[2]) })?;
            if declared != dim || record.len() - 3 != dim {
                return Err(IndexError::InconsistentDimension { line_no });
            }
            let vector = record
                .iter()
                .skip(3)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| IndexError::MalformedRow { line_no, reason: format!("bad number {v:?}") })
                })
                .collect::<Result<Vec<_>, _>>()?;
            items.push(IndexedItem::new(&record[0], &record[1], vector));
        }
        Self::from_items(items)
    }
}

fn csv_io(e: csv::Error) -> IndexError {
    IndexError::IoError(std::io::Error::new(std::io::ErrorKind::Other, e))
}

fn csv_row(fallback_line: u64) -> impl Fn(csv::Error) -> IndexError {
    move |e| {
        let line_no = e.position().map(|p| p.line()).unwrap_or(fallback_line);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => IndexError::IoError(io),
            other => IndexError::MalformedRow { line_no, reason: format!("{other:?}") },
        }
    }
}

/// Embeds `(id, text)` pairs in fixed-size batches, preserving input order.
pub fn build_index(
    entries: &[(String, String)],
    provider: &dyn ModelProvider,
    batch_size: usize,
) -> Result<EmbeddingIndex, IndexError> {
    if entries.is_empty() {
        return Err(IndexError::EmptyIndex);
    }
    let mut items = Vec::with_capacity(entries.len());
    for batch in entries.chunks(batch_size.max(1)) {
        let texts: Vec<String> = batch.iter().map(|(_, t)| t.clone()).collect();
        let vectors = embed_texts(provider, &texts)?;
        for ((id, text), vector) in batch.iter().zip(vectors) {
            items.push(IndexedItem::new(id, text, vector));
        }
    }
    EmbeddingIndex::from_items(items)
}

/// Embeds a single query string.
pub fn embed_query(provider: &dyn ModelProvider, text: &str) -> Result<Vec<f64>, IndexError> {
    Ok(embed_texts(provider, &[text.to_string()])?.remove(0))
}
