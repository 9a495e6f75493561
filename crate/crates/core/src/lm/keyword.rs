//! Keyword learner: a deterministic stand-in for the learner and evaluator.
//!
//! Exam question `i` carries keyword `k_i` (the first configured keyword that
//! occurs in its text). The learner answers it correctly iff some studied
//! question contains `k_i`; the evaluator awards 1 for an answer naming the
//! question's keyword and 0 otherwise. Exam scores are therefore a pure,
//! monotone function of keyword coverage, which makes utilities computable
//! by brute force.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::prompts::{
    EVALUATOR_ANSWER_MARK, EVALUATOR_PREAMBLE, EVALUATOR_QUESTION_MARK, EVALUATOR_TAIL_MARK,
    EVALUATOR_TRUTH_MARK, EXAM_CLOSE, EXAM_OPEN, LEARNING_MATERIALS_CLOSE, LEARNING_MATERIALS_OPEN,
    REFUSAL,
};

pub const KEYWORD_ANSWER_PREFIX: &str = "From my study materials: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordLearner {
    pub keywords: Vec<String>,
}

impl KeywordLearner {
    pub fn new(keywords: Vec<String>) -> Self {
        KeywordLearner { keywords }
    }

    pub fn keyword_of(&self, text: &str) -> Option<&str> {
        self.keywords
            .iter()
            .map(String::as_str)
            .find(|k| text.contains(k))
    }

    /// Responds to learner and evaluator prompts; `None` for anything else.
    pub fn respond(&self, prompt: &str) -> Option<String> {
        if prompt.starts_with(EVALUATOR_PREAMBLE) {
            return self.evaluate(prompt);
        }
        let materials = between(
            prompt,
            &format!("\n{LEARNING_MATERIALS_OPEN}\n"),
            &format!("\n{LEARNING_MATERIALS_CLOSE}"),
        )?;
        let exam = between(
            prompt,
            &format!("\n{EXAM_OPEN}\n"),
            &format!("\n{EXAM_CLOSE}"),
        )?;
        let studied: Vec<&str> = materials
            .lines()
            .filter_map(|l| {
                let rest = l.strip_prefix('Q')?;
                let colon = rest.find(": ")?;
                rest[..colon]
                    .chars()
                    .all(|c| c.is_ascii_digit())
                    .then(|| &rest[colon + 2..])
            })
            .collect();
        let mut answers = BTreeMap::new();
        for (number, text) in numbered_items(exam) {
            let answer = match self.keyword_of(&text) {
                Some(k) if studied.iter().any(|q| q.contains(k)) => {
                    format!("{KEYWORD_ANSWER_PREFIX}{k}")
                }
                _ => REFUSAL.to_string(),
            };
            answers.insert(number, answer);
        }
        Some(serde_json::to_string(&answers).expect("map serializes"))
    }

    fn evaluate(&self, prompt: &str) -> Option<String> {
        let question = between(prompt, EVALUATOR_QUESTION_MARK, EVALUATOR_TRUTH_MARK)?;
        let prediction = between(prompt, EVALUATOR_ANSWER_MARK, EVALUATOR_TAIL_MARK)?;
        let correct = match self.keyword_of(question) {
            Some(k) => prediction.trim() != REFUSAL && prediction.contains(k),
            None => false,
        };
        let score = if correct { 1.0 } else { 0.0 };
        Some(format!(
            "{{\"score\": {score:.1}, \"feedback\": \"keyword check\"}}"
        ))
    }
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = start + text[start..].find(close)?;
    Some(&text[start..end])
}

/// Splits "1. foo\n   bar\n2. baz" into (key, text) items.
fn numbered_items(exam: &str) -> Vec<(String, String)> {
    let mut items: Vec<(String, String)> = Vec::new();
    for line in exam.lines() {
        let digits: String = line.chars().take_while(|c| c.is_ascii_digit()).collect();
        if !digits.is_empty() && line[digits.len()..].starts_with(". ") {
            items.push((digits.clone(), line[digits.len() + 2..].to_string()));
        } else if let Some(last) = items.last_mut() {
            last.1.push('\n');
            last.1.push_str(line);
        }
    }
    items
}
