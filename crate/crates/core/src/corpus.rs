//! Corpus loading and overlapping character-window chunking.
//!
//! Documents are read as strict UTF-8 so that chunk offsets (counted in
//! `char`s) map back to the source text exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use glob::Pattern;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CHUNK_SIZE: usize = 1200;
pub const DEFAULT_CHUNK_OVERLAP: usize = 100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus root does not exist: {0}")]
    MissingRoot(PathBuf),
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("InvalidChunkParams: size={size} overlap={overlap} (need size > overlap and size >= 1)")]
    InvalidChunkParams { size: usize, overlap: usize },
    #[error("invalid path pattern {pattern:?}: {reason}")]
    InvalidPattern { pattern: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentKind {
    Documentation,
    Paper,
    Code,
    QaPairs,
    Issues,
}

impl fmt::Display for DocumentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DocumentKind::Documentation => "documentation",
            DocumentKind::Paper => "paper",
            DocumentKind::Code => "code",
            DocumentKind::QaPairs => "qa_pairs",
            DocumentKind::Issues => "issues",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    /// Relative path with `/` separators.
    pub doc_id: String,
    pub kind: DocumentKind,
    pub text: String,
    pub byte_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    /// Character offsets, half-open.
    pub start: usize,
    pub end: usize,
    pub index: usize,
}

/// Ordered list of `(glob, kind)` rules; the first matching rule wins.
///
/// A pattern without `/` is matched against the file name only, otherwise
/// against the whole relative path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KindPatterns {
    pub rules: Vec<(String, DocumentKind)>,
    pub fallback: DocumentKind,
}

impl Default for KindPatterns {
    fn default() -> Self {
        Self {
            rules: vec![
                ("codes.md".into(), DocumentKind::Code),
                ("*.py".into(), DocumentKind::Code),
                ("*.ipynb".into(), DocumentKind::Code),
                ("issues/**".into(), DocumentKind::Issues),
                ("papers/**".into(), DocumentKind::Paper),
                ("qa/**".into(), DocumentKind::QaPairs),
            ],
            fallback: DocumentKind::Documentation,
        }
    }
}

impl KindPatterns {
    pub fn classify(&self, doc_id: &str) -> Result<DocumentKind, CorpusError> {
        for (pattern, kind) in &self.rules {
            if path_matches(pattern, doc_id)? {
                return Ok(*kind);
            }
        }
        Ok(self.fallback)
    }
}

fn path_matches(pattern: &str, doc_id: &str) -> Result<bool, CorpusError> {
    let compiled = Pattern::new(pattern).map_err(|e| CorpusError::InvalidPattern {
        pattern: pattern.to_string(),
        reason: e.to_string(),
    })?;
    let target = if pattern.contains('/') {
        doc_id
    } else {
        doc_id.rsplit('/').next().unwrap_or(doc_id)
    };
    Ok(compiled.matches(target))
}

/// Parses a manifest file: one relative path per line, `#` starts a comment.
pub fn parse_manifest(contents: &str) -> Vec<String> {
    contents
        .lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|line| !line.is_empty())
        .map(str::to_string)
        .collect()
}

/// Loads every regular file under `root` (or only the manifest entries).
///
/// Documents come back sorted by `doc_id`. Kinds are assigned with
/// [`KindPatterns::default`]; use [`load_corpus_with`] for custom rules.
pub fn load_corpus(root: &Path, manifest: Option<&[String]>) -> Result<Vec<SourceDocument>, CorpusError> {
    load_corpus_with(root, manifest, &KindPatterns::default())
}

pub fn load_corpus_with(
    root: &Path,
    manifest: Option<&[String]>,
    patterns: &KindPatterns,
) -> Result<Vec<SourceDocument>, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::MissingRoot(root.to_path_buf()));
    }
    let mut rel_paths: Vec<String> = match manifest {
        Some(entries) => entries.iter().map(|e| e.replace('\\', "/")).collect(),
        None => {
            let mut found = Vec::new();
            walk(root, root, &mut found)?;
            found
        }
    };
    rel_paths.sort();
    rel_paths.dedup();

    let mut docs = Vec::with_capacity(rel_paths.len());
    for rel in rel_paths {
        let path = root.join(&rel);
        let bytes = fs::read(&path).map_err(|e| CorpusError::UnreadableFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if bytes.is_empty() {
            return Err(CorpusError::UnreadableFile {
                path,
                reason: "file is empty".into(),
            });
        }
        let byte_len = bytes.len();
        let text = String::from_utf8(bytes).map_err(|e| CorpusError::UnreadableFile {
            path: path.clone(),
            reason: format!("invalid UTF-8 at byte {}", e.utf8_error().valid_up_to()),
        })?;
        let kind = patterns.classify(&rel)?;
        docs.push(SourceDocument {
            doc_id: rel,
            kind,
            text,
            byte_len,
        });
    }
    if docs.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(docs)
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), CorpusError> {
    let entries = fs::read_dir(dir).map_err(|e| CorpusError::UnreadableFile {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    for entry in entries {
        let entry = entry.map_err(|e| CorpusError::UnreadableFile {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        let path = entry.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else if path.is_file() {
            let rel = path.strip_prefix(root).expect("walked path is under root");
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.push(rel);
        }
    }
    Ok(())
}

/// Splits a document into windows of `size` chars advancing by
/// `size - overlap`. The final window ends exactly at the document end.
pub fn chunk_document(doc: &SourceDocument, size: usize, overlap: usize) -> Result<Vec<Chunk>, CorpusError> {
    if size == 0 || size <= overlap {
        return Err(CorpusError::InvalidChunkParams { size, overlap });
    }
    // Byte offset of every char boundary, plus the end.
    let mut boundaries: Vec<usize> = doc.text.char_indices().map(|(i, _)| i).collect();
    let char_len = boundaries.len();
    boundaries.push(doc.text.len());

    let stride = size - overlap;
    let mut chunks = Vec::new();
    let mut start = 0usize;
    loop {
        let end = (start + size).min(char_len);
        chunks.push(Chunk {
            chunk_id: format!("{}#{}..{}", doc.doc_id, start, end),
            doc_id: doc.doc_id.clone(),
            text: doc.text[boundaries[start]..boundaries[end]].to_string(),
            start,
            end,
            index: chunks.len(),
        });
        if end == char_len {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

/// Chunks every document, preserving document order.
pub fn chunk_corpus(docs: &[SourceDocument], size: usize, overlap: usize) -> Result<Vec<Chunk>, CorpusError> {
    let mut all = Vec::new();
    for doc in docs {
        all.extend(chunk_document(doc, size, overlap)?);
    }
    Ok(all)
}

/// Marks documents matching any of `code_patterns` as [`DocumentKind::Code`].
pub fn tag_code_corpus(docs: Vec<SourceDocument>, code_patterns: &[String]) -> Result<Vec<SourceDocument>, CorpusError> {
    docs.into_iter()
        .map(|mut doc| {
            for pattern in code_patterns {
                if path_matches(pattern, &doc.doc_id)? {
                    doc.kind = DocumentKind::Code;
                    break;
                }
            }
            Ok(doc)
        })
        .collect()
}

/// doc_id → kind lookup, used to tell code chunks apart at query time.
pub fn kinds_by_doc(docs: &[SourceDocument]) -> BTreeMap<String, DocumentKind> {
    docs.iter().map(|d| (d.doc_id.clone(), d.kind)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, text: &str) -> SourceDocument {
        SourceDocument {
            doc_id: id.into(),
            kind: DocumentKind::Documentation,
            text: text.into(),
            byte_len: text.len(),
        }
    }

    fn ranges(chunks: &[Chunk]) -> Vec<(usize, usize)> {
        chunks.iter().map(|c| (c.start, c.end)).collect()
    }

    // Independent oracle: drop the first `overlap` chars of every chunk but the first.
    fn reassemble(chunks: &[Chunk], overlap: usize) -> String {
        let mut out = String::new();
        for (i, c) in chunks.iter().enumerate() {
            if i == 0 {
                out.push_str(&c.text);
            } else {
                out.extend(c.text.chars().skip(overlap));
            }
        }
        out
    }

    #[test]
    fn stride_three_windows() {
        let chunks = chunk_document(&doc("a.md", "0123456789"), 4, 1).unwrap();
        assert_eq!(ranges(&chunks), vec![(0, 4), (3, 7), (6, 10)]);
        assert_eq!(chunks[1].chunk_id, "a.md#3..7");
        assert_eq!(chunks[2].text, "6789");
    }

    #[test]
    fn short_document_single_chunk() {
        let chunks = chunk_document(&doc("a.md", "abcd"), 10, 2).unwrap();
        assert_eq!(ranges(&chunks), vec![(0, 4)]);
    }

    #[test]
    fn rejects_overlap_not_below_size() {
        let err = chunk_document(&doc("a.md", "abcd"), 3, 3).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidChunkParams { size: 3, overlap: 3 }));
        assert!(err.to_string().contains("InvalidChunkParams"));
        assert!(chunk_document(&doc("a.md", "abcd"), 0, 0).is_err());
    }

    #[test]
    fn offsets_are_characters_not_bytes() {
        let chunks = chunk_document(&doc("u.md", "héllo wörld"), 4, 1).unwrap();
        assert_eq!(chunks[0].text, "héll");
        assert_eq!(reassemble(&chunks, 1), "héllo wörld");
    }

    #[test]
    fn manifest_comments_and_blanks() {
        let m = parse_manifest("# tier: basic\na.md\n\n  b.py  # code\n");
        assert_eq!(m, vec!["a.md", "b.py"]);
    }

    #[test]
    fn code_tagging() {
        let docs = vec![doc("x.py", "x"), doc("y.md", "y"), doc("docs/codes.md", "z")];
        let tagged = tag_code_corpus(docs, &["*.py".into(), "codes.md".into()]).unwrap();
        let code: Vec<_> = tagged.iter().filter(|d| d.kind == DocumentKind::Code).map(|d| d.doc_id.as_str()).collect();
        assert_eq!(code, vec!["x.py", "docs/codes.md"]);

        let untouched = tag_code_corpus(vec![doc("a.md", "a")], &["*.py".into()]).unwrap();
        assert_eq!(untouched[0].kind, DocumentKind::Documentation);
    }

    proptest! {
        #[test]
        fn chunking_covers_and_reconstructs(
            text in "[a-zé ]{1,300}",
            size in 1usize..60,
            overlap_frac in 0.0f64..1.0,
        ) {
            let overlap = ((size as f64) * overlap_frac) as usize;
            prop_assume!(overlap < size);
            let d = doc("p.md", &text);
            let chunks = chunk_document(&d, size, overlap).unwrap();
            let n = text.chars().count();
            prop_assert_eq!(chunks[0].start, 0);
            prop_assert_eq!(chunks.last().unwrap().end, n);
            for w in chunks.windows(2) {
                prop_assert_eq!(w[0].end - w[1].start, overlap);
                prop_assert_eq!(w[0].end - w[0].start, size);
            }
            prop_assert_eq!(reassemble(&chunks, overlap), text.clone());
            prop_assert_eq!(chunk_document(&d, size, overlap).unwrap(), chunks);
        }
    }
}
