use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, Completion, KeywordLearner, LmError, LmRequest, TokenDistribution};

const DEFAULT_EMBEDDING_DIM: usize = 64;

/// Substrings are either a single string or a list (all must occur).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    Contains(OneOrMany),
    /// SHA-256 hex of the prompt text.
    Hash(String),
    Default,
}

impl Matcher {
    pub fn contains_all(parts: Vec<String>) -> Matcher {
        Matcher::Contains(OneOrMany::Many(parts))
    }

    fn matches(&self, prompt: &str, hash: &str) -> bool {
        match self {
            Matcher::Contains(OneOrMany::One(s)) => prompt.contains(s.as_str()),
            Matcher::Contains(OneOrMany::Many(v)) => v.iter().all(|s| prompt.contains(s.as_str())),
            Matcher::Hash(h) => h.eq_ignore_ascii_case(hash),
            Matcher::Default => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<TokenDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl MockRule {
    pub fn new(matcher: Matcher, response: impl Into<String>) -> Self {
        MockRule {
            matcher,
            response: response.into(),
            logprobs: None,
            embedding: None,
        }
    }
}

/// Ordered rules, first match wins. The last rule must be a `default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    /// When set, learner and evaluator prompts are answered by keyword coverage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_learner: Option<KeywordLearner>,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

fn default_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>) -> Self {
        MockScript {
            rules,
            keyword_learner: None,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let text = fs::read_to_string(path)
            .map_err(|e| LmError::Config(format!("mock script {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| LmError::Config(format!("mock script {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), LmError> {
        match self.rules.last() {
            Some(r) if r.matcher == Matcher::Default => {}
            _ => {
                return Err(LmError::Config(
                    "mock script must end with a default rule".into(),
                ))
            }
        }
        for r in &self.rules {
            if let Some(d) = &r.logprobs {
                d.validate()?;
            }
        }
        if self.embedding_dim == 0 {
            return Err(LmError::Config("embedding_dim must be positive".into()));
        }
        Ok(())
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Deterministic scripted backend with an atomic call counter.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    identity: String,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, LmError> {
        script.validate()?;
        let canonical = serde_json::to_vec(&script).expect("script serializes");
        let identity = format!("mock:{}", &hex::encode(Sha256::digest(&canonical))[..16]);
        Ok(MockBackend {
            script,
            identity,
            calls: AtomicU64::new(0),
        })
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn rule_for(&self, prompt: &str) -> &MockRule {
        let hash = prompt_hash(prompt);
        self.script
            .rules
            .iter()
            .find(|r| r.matcher.matches(prompt, &hash))
            .expect("validated script ends with a default rule")
    }
}

impl Backend for MockBackend {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn complete(&self, request: &LmRequest) -> Result<Completion, LmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = request.prompt_text();
        if let Some(text) = self
            .script
            .keyword_learner
            .as_ref()
            .and_then(|k| k.respond(&prompt))
        {
            return Ok(Completion {
                text,
                first_token_distribution: None,
            });
        }
        let rule = self.rule_for(&prompt);
        Ok(Completion {
            text: rule.response.clone(),
            first_token_distribution: if request.want_logprobs {
                rule.logprobs.clone()
            } else {
                None
            },
        })
    }

    fn embed(&self, _model_id: &str, text: &str) -> Result<Vec<f64>, LmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let rule = self.rule_for(text);
        if rule.matcher != Matcher::Default {
            if let Some(v) = &rule.embedding {
                return Ok(v.clone());
            }
        }
        Ok(hash_embedding(text, self.script.embedding_dim))
    }
}

/// Unit vector seeded from the SHA-256 of `text`.
fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}
