//! Prompt templates with `{name}` placeholders.
//!
//! Defaults ship with the crate; any subset can be overridden by dropping
//! `<name>.txt` files into a directory and calling [`PromptTemplates::load_dir`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model_client::hex;

pub const TEMPLATE_NAMES: [&str; 9] = [
    "extract",
    "glean",
    "glean_check",
    "summarize_descriptions",
    "community_report",
    "system",
    "answer",
    "global_map",
    "global_reduce",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    templates: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let pairs = [
            ("extract", include_str!("../templates/extract.txt")),
            ("glean", include_str!("../templates/glean.txt")),
            ("glean_check", include_str!("../templates/glean_check.txt")),
            ("summarize_descriptions", include_str!("../templates/summarize_descriptions.txt")),
            ("community_report", include_str!("../templates/community_report.txt")),
            ("system", include_str!("../templates/system.txt")),
            ("answer", include_str!("../templates/answer.txt")),
            ("global_map", include_str!("../templates/global_map.txt")),
            ("global_reduce", include_str!("../templates/global_reduce.txt")),
        ];
        Self {
            templates: pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl PromptTemplates {
    /// Defaults overridden by whichever `<name>.txt` files exist in `dir`.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::default();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                set.templates.insert(name.to_string(), std::fs::read_to_string(path)?);
            }
        }
        Ok(set)
    }

    pub fn raw(&self, name: &str) -> &str {
        self.templates.get(name).map(String::as_str).unwrap_or("")
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        render(self.raw(name), vars)
    }

    /// Short content hash identifying this template set.
    pub fn version(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, body) in &self.templates {
            hasher.update(name.as_bytes());
            hasher.update([0]);
            hasher.update(body.as_bytes());
            hasher.update([0]);
        }
        hex(&hasher.finalize())[..12].to_string()
    }
}

/// Single pass substitution; inserted values are never re-scanned and
/// unknown placeholders are left as they are.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match replaced {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution_is_single_pass() {
        let out = render("a {x} b {y} {unknown}", &[("x", "{y}"), ("y", "2")]);
        assert_eq!(out, "a {y} b 2 {unknown}");
    }

    #[test]
    fn directory_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("system.txt"), "custom").unwrap();
        let set = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(set.raw("system"), "custom");
        assert_eq!(set.raw("answer"), PromptTemplates::default().raw("answer"));
        assert_ne!(set.version(), PromptTemplates::default().version());
    }
}
