use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionRequest, ModelError, ModelProvider};

pub const ERROR_MARKER: &str = "<|ERROR|>";

/// A substring rule: fires when the last message of a request contains `contains`.
///
/// With several `replies`, successive hits walk the list and then stick to the
/// last entry. A single reply keeps the mock a pure function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub contains: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replies: Vec<String>,
}

/// On-disk script format for [`ScriptedMock`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub default_reply: String,
    pub embed_dim: usize,
    pub seed: u64,
    /// Request fingerprint (see [`CompletionRequest::fingerprint`]) → reply.
    pub fingerprints: BTreeMap<String, String>,
    pub rules: Vec<ScriptRule>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            default_reply: "NO".into(),
            embed_dim: 64,
            seed: 7,
            fingerprints: BTreeMap::new(),
            rules: Vec::new(),
        }
    }
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ModelError::InvalidRequest(format!("cannot read mock script {}: {e}", path.display())))?;
        serde_json::from_str(&raw).map_err(|e| ModelError::InvalidRequest(format!("bad mock script: {e}")))
    }
}

struct CompiledRule {
    rule: ScriptRule,
    hits: AtomicUsize,
}

/// Deterministic offline provider.
///
/// Chat replies resolve by exact fingerprint, then by the first matching
/// substring rule, then fall back to `default_reply`. Embeddings are a
/// seeded bag-of-words hash projection: every lower-cased alphanumeric token
/// maps to a fixed pseudo-random vector and a text embeds to the sum of its
/// token vectors, so texts sharing words are close and identical texts are
/// identical. Every chat request is recorded for inspection.
///
/// A reply of the form `<|ERROR|> <status> <body>` is not returned but raised
/// as a provider error, which lets scripts exercise failure paths.
pub struct ScriptedMock {
    default_reply: String,
    dim: usize,
    seed: u64,
    fingerprints: BTreeMap<String, String>,
    rules: Vec<CompiledRule>,
    calls: Mutex<Vec<CompletionRequest>>,
    embed_calls: AtomicUsize,
}

impl ScriptedMock {
    pub fn new(script: MockScript) -> Self {
        Self {
            default_reply: script.default_reply,
            dim: script.embed_dim.max(1),
            seed: script.seed,
            fingerprints: script.fingerprints,
            rules: script
                .rules
                .into_iter()
                .map(|rule| CompiledRule { rule, hits: AtomicUsize::new(0) })
                .collect(),
            calls: Mutex::new(Vec::new()),
            embed_calls: AtomicUsize::new(0),
        }
    }

    /// Convenience: fingerprint map plus default, dimension 64, seed 7.
    pub fn scripted(fingerprints: BTreeMap<String, String>, default_reply: impl Into<String>) -> Self {
        Self::new(MockScript {
            default_reply: default_reply.into(),
            fingerprints,
            ..MockScript::default()
        })
    }

    pub fn with_default(default_reply: impl Into<String>) -> Self {
        Self::scripted(BTreeMap::new(), default_reply)
    }

    pub fn rule(mut self, contains: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push(CompiledRule {
            rule: ScriptRule { contains: contains.into(), reply: Some(reply.into()), replies: vec![] },
            hits: AtomicUsize::new(0),
        });
        self
    }

    pub fn sequence(mut self, contains: impl Into<String>, replies: Vec<String>) -> Self {
        self.rules.push(CompiledRule {
            rule: ScriptRule { contains: contains.into(), reply: None, replies },
            hits: AtomicUsize::new(0),
        });
        self
    }

    pub fn dimension(mut self, dim: usize) -> Self {
        self.dim = dim.max(1);
        self
    }

    pub fn calls(&self) -> Vec<CompletionRequest> {
        self.calls.lock().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().len()
    }

    /// Number of chat calls whose last message contains `needle`.
    pub fn calls_containing(&self, needle: &str) -> usize {
        self.calls.lock().iter().filter(|r| r.last_content().contains(needle)).count()
    }

    pub fn embed_call_count(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let lowered = text.to_lowercase();
        let mut tokens: Vec<&str> = lowered.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect();
        if tokens.is_empty() {
            tokens.push(&lowered);
        }
        for token in tokens {
            let mut rng = ChaCha8Rng::seed_from_u64(self.token_seed(token));
            for x in out.iter_mut() {
                *x += rng.gen_range(-1.0..1.0);
            }
        }
        out
    }

    fn token_seed(&self, token: &str) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }

    fn reply_for(&self, req: &CompletionRequest) -> String {
        if let Some(reply) = self.fingerprints.get(&req.fingerprint()) {
            return reply.clone();
        }
        let last = req.last_content();
        for compiled in &self.rules {
            if !last.contains(&compiled.rule.contains) {
                continue;
            }
            if compiled.rule.replies.is_empty() {
                return compiled.rule.reply.clone().unwrap_or_default();
            }
            let hit = compiled.hits.fetch_add(1, Ordering::SeqCst);
            let replies = &compiled.rule.replies;
            return replies[hit.min(replies.len() - 1)].clone();
        }
        self.default_reply.clone()
    }
}

impl ModelProvider for ScriptedMock {
    fn chat(&self, req: &CompletionRequest) -> Result<String, ModelError> {
        let reply = self.reply_for(req);
        self.calls.lock().push(req.clone());
        if let Some(rest) = reply.strip_prefix(ERROR_MARKER) {
            let rest = rest.trim();
            let (status, body) = rest.split_once(' ').unwrap_or((rest, ""));
            return Err(ModelError::ProviderError { status: status.parse().unwrap_or(500), body: body.to_string() });
        }
        Ok(reply)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn chat_model_id(&self) -> &str {
        "scripted-mock"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_client::{complete_chat, embed_texts};

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn fingerprint_lookup_and_fallback() {
        let req = CompletionRequest::from_prompt("which letter?");
        let mut script = BTreeMap::new();
        script.insert(req.fingerprint(), "B".to_string());
        let mock = ScriptedMock::scripted(script, "fallback");
        assert_eq!(complete_chat(&mock, &req).unwrap(), "B");
        assert_eq!(complete_chat(&mock, &req).unwrap(), "B");
        assert_eq!(complete_chat(&mock, &CompletionRequest::from_prompt("other")).unwrap(), "fallback");
        assert_eq!(mock.call_count(), 3);
    }

    #[test]
    fn error_marker_raises() {
        let mock = ScriptedMock::with_default("<|ERROR|> 503 overloaded");
        match mock.chat(&CompletionRequest::from_prompt("q")) {
            Err(ModelError::ProviderError { status, body }) => assert_eq!((status, body.as_str()), (503, "overloaded")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sequences_advance_then_stick() {
        let mock = ScriptedMock::with_default("x").sequence("more?", vec!["YES".into(), "NO".into()]);
        let req = CompletionRequest::from_prompt("any more?");
        let got: Vec<_> = (0..3).map(|_| mock.chat(&req).unwrap()).collect();
        assert_eq!(got, vec!["YES", "NO", "NO"]);
    }

    #[test]
    fn embeddings_are_deterministic_and_distinct() {
        let mock = ScriptedMock::with_default("").dimension(4);
        let same = embed_texts(&mock, &["a".into(), "a".into()]).unwrap();
        assert_eq!(same[0], same[1]);
        assert!((cosine(&same[0], &same[1]) - 1.0).abs() < 1e-12);
        let diff = embed_texts(&mock, &["a".into(), "b".into()]).unwrap();
        assert_eq!(diff[0].len(), 4);
        assert_ne!(diff[0], diff[1]);

        let again = ScriptedMock::with_default("").dimension(4);
        assert_eq!(again.embed_one("a"), mock.embed_one("a"), "stable across instances");
    }

    #[test]
    fn thousand_texts_keep_order() {
        let mock = ScriptedMock::with_default("");
        let texts: Vec<String> = (0..1000).map(|i| format!("item {i}")).collect();
        let vectors = embed_texts(&mock, &texts).unwrap();
        assert_eq!(vectors.len(), 1000);
        for (i, v) in vectors.iter().enumerate() {
            assert_eq!(v, &mock.embed_one(&format!("item {i}")), "vector {i} out of place");
        }
    }

    #[test]
    fn shared_words_raise_similarity() {
        let mock = ScriptedMock::with_default("");
        let q = mock.embed_one("what is an echo state network");
        let near = mock.embed_one("echo state network");
        let far = mock.embed_one("tank trucks rollover");
        assert!(cosine(&q, &near) > cosine(&q, &far));
    }
}
