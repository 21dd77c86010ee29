use serde::{Deserialize, Serialize};

use super::TraceEntry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSection {
    pub label: String,
    pub text: String,
    pub provenance: Vec<TraceEntry>,
}

impl ContextSection {
    pub fn new(label: impl Into<String>, text: impl Into<String>, provenance: TraceEntry) -> Self {
        Self { label: label.into(), text: text.into(), provenance: vec![provenance] }
    }

    fn header(&self) -> String {
        format!("-----{}-----\n", self.label)
    }

    pub fn render(&self) -> String {
        format!("{}{}\n", self.header(), self.text)
    }

    pub fn rendered_len(&self) -> usize {
        self.header().chars().count() + self.text.chars().count() + 1
    }
}

/// Sections selected for a prompt, in the order they were offered.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryContext {
    pub budget_chars: usize,
    pub sections: Vec<ContextSection>,
}

impl QueryContext {
    pub fn render(&self) -> String {
        self.sections.iter().map(ContextSection::render).collect()
    }

    pub fn rendered_len(&self) -> usize {
        self.sections.iter().map(ContextSection::rendered_len).sum()
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.sections.iter().flat_map(|s| s.provenance.iter().cloned()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }
}

/// Greedy packing: each candidate is taken if it still fits, otherwise
/// skipped. When not even the first candidate fits, its text is cut so the
/// context holds one truncated section instead of nothing.
pub fn pack_sections(candidates: Vec<ContextSection>, budget: usize) -> QueryContext {
    let mut ctx = QueryContext { budget_chars: budget, sections: Vec::new() };
    let mut used = 0;
    let mut first = true;
    for mut section in candidates {
        let len = section.rendered_len();
        if used + len <= budget {
            used += len;
            ctx.sections.push(section);
        } else if first {
            let overhead = section.rendered_len() - section.text.chars().count();
            if overhead <= budget {
                section.text = section.text.chars().take(budget - overhead).collect();
                used += section.rendered_len();
                ctx.sections.push(section);
            }
        }
        first = false;
    }
    debug_assert!(used <= budget);
    ctx
}
