//! Indirect question metrics and the statistics used to compare them.

mod entropy;
mod rank;
mod rouge;

pub use entropy::{entropy, entropy_of, EigResult};
pub use rank::{average_ranks, pearson, spearman, CorrelationResult};
pub use rouge::{lcs_len, rouge_l, tokenize};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Bloom, Exam};
use crate::lm::{retry_parse, Attempt, CallSettings, Gateway, LmError, MAX_TOP_K_LOGPROBS};
use crate::prompts;

pub const PARSE_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("statistics error: {0}")]
    Stat(String),
    #[error("metric unavailable: {0}")]
    Unavailable(String),
    #[error("unusable metric response: {0}")]
    Parse(String),
    #[error(transparent)]
    Lm(#[from] LmError),
}

pub fn bloom_depth(category: Bloom) -> u8 {
    category.depth()
}

/// Cosine similarity; `None` for mismatched lengths or a zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// First integer appearing in `text`.
pub fn parse_leading_integer(text: &str) -> Option<i64> {
    let start = text.find(|c: char| c.is_ascii_digit())?;
    let digits: String = text[start..]
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    let value: i64 = digits.parse().ok()?;
    let negative = text[..start].ends_with('-');
    Some(if negative { -value } else { value })
}

/// Likert 1-5 judgement of how much `question` needs answering given `article`.
pub fn salience(
    gateway: &Gateway,
    settings: &CallSettings,
    article: &str,
    question: &str,
) -> Result<u8, MetricError> {
    if article.trim().is_empty() || question.trim().is_empty() {
        return Err(MetricError::Parse(
            "salience needs article and question".into(),
        ));
    }
    let req = settings.request(prompts::salience(article, question));
    let parsed = retry_parse(
        gateway,
        &req,
        PARSE_ATTEMPTS,
        |c| match parse_leading_integer(&c.text) {
            Some(v @ 1..=5) => Attempt::Done(v as u8),
            Some(v) => Attempt::Retry(format!("salience {v} outside 1..=5")),
            None => Attempt::Retry(format!("no integer in {:?}", c.text)),
        },
    )?;
    parsed.map_err(MetricError::Parse)
}

/// First whitespace-delimited word of an answer, used as its first token.
pub fn first_token(answer: &str) -> Option<&str> {
    answer.split_whitespace().next()
}

/// Entropy drop at the first answer position after conditioning on the
/// answer's first token.
pub fn eig(
    gateway: &Gateway,
    settings: &CallSettings,
    article: &str,
    question: &str,
    answer_first_token: &str,
) -> Result<EigResult, MetricError> {
    let prior = first_token_distribution(gateway, settings, prompts::eig_prior(article, question))?;
    let posterior = first_token_distribution(
        gateway,
        settings,
        prompts::eig_posterior(article, question, answer_first_token),
    )?;
    EigResult::from_distributions(&prior, &posterior)
}

fn first_token_distribution(
    gateway: &Gateway,
    settings: &CallSettings,
    prompt: String,
) -> Result<crate::lm::TokenDistribution, MetricError> {
    let req = settings
        .request(prompt)
        .with_max_tokens(1)
        .with_logprobs(MAX_TOP_K_LOGPROBS);
    gateway
        .complete(&req)?
        .first_token_distribution
        .ok_or_else(|| MetricError::Unavailable("backend returned no logprobs".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    /// `None` when embeddings were unavailable.
    pub max_cosine: Option<f64>,
    pub max_rouge_l: f64,
}

pub fn similarity_to_exam(
    gateway: &Gateway,
    embedding_model: &str,
    question: &str,
    exam: &Exam,
) -> Result<Similarity, MetricError> {
    if exam.is_empty() {
        return Err(MetricError::Stat("exam has no questions".into()));
    }
    let max_rouge_l = exam
        .questions
        .iter()
        .map(|q| rouge_l(question, &q.text))
        .fold(f64::NEG_INFINITY, f64::max);
    let max_cosine = match max_embedding_cosine(gateway, embedding_model, question, exam) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("embedding similarity unavailable: {e}");
            None
        }
    };
    Ok(Similarity {
        max_cosine,
        max_rouge_l,
    })
}

fn max_embedding_cosine(
    gateway: &Gateway,
    model: &str,
    question: &str,
    exam: &Exam,
) -> Result<Option<f64>, LmError> {
    let q = gateway.embed(model, question)?;
    let mut best: Option<f64> = None;
    for e in &exam.questions {
        let v = gateway.embed(model, &e.text)?;
        if let Some(c) = cosine(&q, &v) {
            best = Some(best.map_or(c, |b| b.max(c)));
        }
    }
    Ok(best)
}

/// Per-question metric values joined with its utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub qa_id: String,
    pub chapter_id: String,
    pub utility: f64,
    pub salience: Option<u8>,
    pub eig: Option<f64>,
    pub max_cosine: Option<f64>,
    pub max_rouge_l: f64,
    pub bloom_depth: Option<u8>,
}

/// One row of a correlation table. `rho` and `p` are absent when undefined
/// (fewer than 3 points or zero variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric1: String,
    pub metric2: String,
    pub rho: Option<f64>,
    pub p: Option<f64>,
    pub n: usize,
}

fn column(records: &[MetricRecord], name: &str) -> Vec<Option<f64>> {
    records
        .iter()
        .map(|r| match name {
            "utility" => Some(r.utility),
            "salience" => r.salience.map(f64::from),
            "eig" => r.eig,
            "max_cosine" => r.max_cosine,
            "max_rouge_l" => Some(r.max_rouge_l),
            "bloom_depth" => r.bloom_depth.map(f64::from),
            other => panic!("unknown metric column {other}"),
        })
        .collect()
}

/// Spearman correlation between two metric columns over records where both
/// are present.
pub fn correlate(records: &[MetricRecord], a: &str, b: &str) -> CorrelationRow {
    let (x, y): (Vec<f64>, Vec<f64>) = column(records, a)
        .into_iter()
        .zip(column(records, b))
        .filter_map(|(x, y)| Some((x?, y?)))
        .unzip();
    let n = x.len();
    let (rho, p) = match spearman(&x, &y) {
        Ok(r) => (Some(r.rho), Some(r.p_value)),
        Err(e) => {
            log::info!("{a} vs {b}: correlation undefined ({e})");
            (None, None)
        }
    };
    CorrelationRow {
        metric1: a.into(),
        metric2: b.into(),
        rho,
        p,
        n,
    }
}

pub const METRIC_PAIRS: [(&str, &str); 3] = [
    ("utility", "salience"),
    ("utility", "eig"),
    ("salience", "eig"),
];

pub const SIMILARITY_PAIRS: [(&str, &str); 3] = [
    ("utility", "max_cosine"),
    ("utility", "max_rouge_l"),
    ("utility", "bloom_depth"),
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ExamQuestion;
    use crate::lm::{MockBackend, MockScript};
    use serde_json::json;
    use std::sync::Arc;

    fn gateway(rules: serde_json::Value) -> Gateway {
        let s: MockScript = serde_json::from_value(json!({ "rules": rules })).unwrap();
        Gateway::in_memory(Arc::new(MockBackend::new(s).unwrap()))
    }

    fn judge() -> CallSettings {
        CallSettings::new("judge", 0.0, 0)
    }

    #[test]
    fn bloom_scale() {
        assert_eq!(bloom_depth(Bloom::Remembering), 1);
        assert_eq!(bloom_depth(Bloom::Analyzing), 4);
        assert_eq!(bloom_depth(Bloom::Creating), 6);
    }

    #[test]
    fn salience_parses_and_retries() {
        let gw = gateway(json!([{"match": "default", "response": "Score: 5"}]));
        assert_eq!(salience(&gw, &judge(), "art", "q?").unwrap(), 5);
        let gw = gateway(json!([{"match": "default", "response": "0"}]));
        assert!(matches!(
            salience(&gw, &judge(), "art", "q?"),
            Err(MetricError::Parse(_))
        ));
        assert_eq!(gw.backend_calls(), 3);
    }

    #[test]
    fn eig_from_scripted_logprobs() {
        let gw = gateway(json!([
            {"match": {"contains": "Answer: Paris"}, "response": "",
             "logprobs": {"token_labels": ["x"], "probs": [1.0]}},
            {"match": "default", "response": "",
             "logprobs": {"token_labels": ["a","b","c","d"], "probs": [0.25,0.25,0.25,0.25]}}
        ]));
        let r = eig(&gw, &judge(), "art", "Capital?", "Paris").unwrap();
        assert!((r.eig - 4f64.ln()).abs() < 1e-9);
        let no_lp = gateway(json!([{"match": "default", "response": "x"}]));
        assert!(matches!(
            eig(&no_lp, &judge(), "a", "q", "t"),
            Err(MetricError::Unavailable(_))
        ));
    }

    #[test]
    fn similarity_against_exam() {
        let gw = gateway(json!([{"match": "default", "response": ""}]));
        let exam = Exam {
            questions: vec![ExamQuestion {
                id: "e1".into(),
                text: "the cat ran".into(),
                reference_answer: None,
                bloom: None,
                aligned_sections: vec![],
            }],
        };
        let s = similarity_to_exam(&gw, "emb", "the cat sat", &exam).unwrap();
        assert!((s.max_rouge_l - 2.0 / 3.0).abs() < 1e-12);
        let c = s.max_cosine.unwrap();
        assert!((-1.0..=1.0).contains(&c));
        let same = similarity_to_exam(&gw, "emb", "the cat ran", &exam).unwrap();
        assert_eq!(same.max_rouge_l, 1.0);
        assert!((same.max_cosine.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn leading_integer() {
        assert_eq!(parse_leading_integer("Score: 4."), Some(4));
        assert_eq!(parse_leading_integer("-2"), Some(-2));
        assert_eq!(parse_leading_integer("none"), None);
    }

    #[test]
    fn correlation_rows_handle_missing_values() {
        let rec = |u: f64, s: Option<u8>| MetricRecord {
            qa_id: "x".into(),
            chapter_id: "c".into(),
            utility: u,
            salience: s,
            eig: None,
            max_cosine: None,
            max_rouge_l: 0.0,
            bloom_depth: None,
        };
        let rs = vec![
            rec(0.1, Some(1)),
            rec(0.2, Some(2)),
            rec(0.3, None),
            rec(0.4, Some(5)),
        ];
        let row = correlate(&rs, "utility", "salience");
        assert_eq!(row.n, 3);
        assert_eq!(row.rho, Some(1.0));
        let row = correlate(&rs, "utility", "eig");
        assert_eq!((row.n, row.rho, row.p), (0, None, None));
    }
}
