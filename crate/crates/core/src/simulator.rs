//! Simulated learner and evaluator.
//!
//! The learner sees only the study set; the evaluator is the only role that
//! sees chapter text.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{
    content_hash, exam_score, join_sections, Chapter, Exam, ExamAttempt, ExamQuestion, QAPair,
};
use crate::lm::{extract_json, retry_parse, Attempt, CallSettings, Gateway, LmError};
use crate::prompts;

pub const PARSE_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("exam has no questions")]
    EmptyExam,
    #[error("study set contains pair {0} twice")]
    DuplicatePair(String),
    #[error("learner response unusable: {0}")]
    Simulation(String),
    #[error("question {question_id}: evaluator response unusable: {reason}")]
    Scoring { question_id: String, reason: String },
    #[error("trial {trial}: {source}")]
    Trial {
        trial: u32,
        #[source]
        source: Box<SimError>,
    },
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// QA pairs a learner studies, in canonical order (anchor section, then id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySet {
    pub id: String,
    pub pairs: Vec<QAPair>,
}

impl StudySet {
    pub fn new(mut pairs: Vec<QAPair>) -> Result<Self, SimError> {
        pairs.sort_by(|a, b| (a.anchor_section, &a.id).cmp(&(b.anchor_section, &b.id)));
        let mut seen = BTreeSet::new();
        for p in &pairs {
            if !seen.insert(p.id.as_str()) {
                return Err(SimError::DuplicatePair(p.id.clone()));
            }
        }
        let mut parts = vec!["study-set"];
        parts.extend(seen.iter().copied());
        let id = format!("ss-{}", &content_hash(&parts)[..16]);
        Ok(StudySet { id, pairs })
    }

    pub fn empty() -> Self {
        StudySet::new(Vec::new()).expect("empty set has no duplicates")
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub learner: CallSettings,
    pub evaluator: CallSettings,
    /// Chapters longer than this (in characters) are replaced by the
    /// question's aligned sections in evaluator prompts.
    pub document_budget: usize,
}

pub fn learner_prompt(exam: &Exam, study: &StudySet) -> String {
    prompts::learner(
        &prompts::render_materials(&study.pairs),
        &prompts::render_exam(&exam.questions),
    )
}

fn parse_responses(raw: &str, exam: &Exam) -> Result<BTreeMap<String, String>, String> {
    let v = extract_json(raw).map_err(|e| e.to_string())?;
    let map = v.as_object().ok_or("response is not an object")?;
    let mut out = BTreeMap::new();
    for (i, q) in exam.questions.iter().enumerate() {
        let answer = match map.get(&(i + 1).to_string()) {
            Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
            Some(Value::Null) | None => prompts::REFUSAL.to_string(),
            Some(Value::String(_)) => prompts::REFUSAL.to_string(),
            Some(other) => other.to_string(),
        };
        out.insert(q.id.clone(), answer);
    }
    Ok(out)
}

/// Learner answers keyed by question id; missing answers become the refusal.
pub fn take_exam(
    gateway: &Gateway,
    learner: &CallSettings,
    exam: &Exam,
    study: &StudySet,
) -> Result<BTreeMap<String, String>, SimError> {
    if exam.is_empty() {
        return Err(SimError::EmptyExam);
    }
    let req = learner.request(learner_prompt(exam, study));
    retry_parse(gateway, &req, PARSE_ATTEMPTS, |c| {
        match parse_responses(&c.text, exam) {
            Ok(r) => Attempt::Done(r),
            Err(e) => Attempt::Retry(e),
        }
    })?
    .map_err(SimError::Simulation)
}

/// The chapter text, or the question's aligned sections when the chapter
/// exceeds `budget` characters and an alignment exists.
pub fn evaluator_document(chapter: &Chapter, question: &ExamQuestion, budget: usize) -> String {
    let full = chapter.full_text();
    if full.chars().count() <= budget || question.aligned_sections.is_empty() {
        return full;
    }
    join_sections(
        chapter
            .sections
            .iter()
            .filter(|s| question.aligned_sections.contains(&s.index)),
    )
}

fn parse_score(raw: &str) -> Result<f64, String> {
    let v = extract_json(raw).map_err(|e| e.to_string())?;
    let score = match v.get("score") {
        Some(Value::Number(n)) => n.as_f64(),
        Some(Value::String(s)) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or("missing numeric \"score\"")?;
    if score.is_finite() {
        Ok(score)
    } else {
        Err(format!("score {score} is not finite"))
    }
}

/// An evaluator score outside [0, 1] that was clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampEvent {
    pub question_id: String,
    pub raw: f64,
    pub stored: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAttempt {
    pub attempt: ExamAttempt,
    pub clamps: Vec<ClampEvent>,
}

pub fn score_attempt(
    gateway: &Gateway,
    evaluator: &CallSettings,
    chapter: &Chapter,
    study_set_id: &str,
    responses: BTreeMap<String, String>,
    document_budget: usize,
) -> Result<ScoredAttempt, SimError> {
    let mut scores = BTreeMap::new();
    let mut clamps = Vec::new();
    for q in &chapter.exam.questions {
        let prediction = responses
            .get(&q.id)
            .map_or(prompts::REFUSAL, String::as_str);
        let prompt = prompts::evaluator(
            &evaluator_document(chapter, q, document_budget),
            &q.text,
            q.reference_answer.as_deref(),
            prediction,
        );
        let raw =
            retry_parse(
                gateway,
                &evaluator.request(prompt),
                PARSE_ATTEMPTS,
                |c| match parse_score(&c.text) {
                    Ok(s) => Attempt::Done(s),
                    Err(e) => Attempt::Retry(e),
                },
            )?
            .map_err(|reason| SimError::Scoring {
                question_id: q.id.clone(),
                reason,
            })?;
        let stored = raw.clamp(0.0, 1.0);
        if stored != raw {
            log::warn!("{}: evaluator score {raw} clamped to {stored}", q.id);
            clamps.push(ClampEvent {
                question_id: q.id.clone(),
                raw,
                stored,
            });
        }
        scores.insert(q.id.clone(), stored);
    }
    let exam_score = exam_score(&scores).map_err(|e| SimError::Scoring {
        question_id: String::new(),
        reason: e.to_string(),
    })?;
    let mut responses = responses;
    for q in &chapter.exam.questions {
        responses
            .entry(q.id.clone())
            .or_insert_with(|| prompts::REFUSAL.to_string());
    }
    Ok(ScoredAttempt {
        attempt: ExamAttempt {
            study_set_id: study_set_id.to_string(),
            responses,
            per_question_scores: scores,
            exam_score,
        },
        clamps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialAggregate {
    pub trial_scores: Vec<f64>,
    pub mean: f64,
    pub count: usize,
}

impl TrialAggregate {
    pub fn from_scores(trial_scores: Vec<f64>) -> Self {
        let count = trial_scores.len();
        let mean = if count == 0 {
            0.0
        } else {
            trial_scores.iter().sum::<f64>() / count as f64
        };
        TrialAggregate {
            trial_scores,
            mean,
            count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub aggregate: TrialAggregate,
    /// One scored attempt per trial, in trial order.
    pub attempts: Vec<ScoredAttempt>,
}

/// Runs `trials` exam attempts with seeds `base_seed + trial`, concurrently.
pub fn simulate(
    gateway: &Gateway,
    settings: &SimSettings,
    chapter: &Chapter,
    study: &StudySet,
    trials: u32,
    base_seed: u64,
) -> Result<SimulationOutcome, SimError> {
    if chapter.exam.is_empty() {
        return Err(SimError::EmptyExam);
    }
    let attempts: Vec<ScoredAttempt> = (0..trials.max(1))
        .into_par_iter()
        .map(|t| {
            let seed = base_seed.wrapping_add(u64::from(t));
            let wrap = |e: SimError| SimError::Trial {
                trial: t,
                source: Box::new(e),
            };
            let responses = take_exam(
                gateway,
                &settings.learner.with_seed(seed),
                &chapter.exam,
                study,
            )
            .map_err(wrap)?;
            score_attempt(
                gateway,
                &settings.evaluator.with_seed(seed),
                chapter,
                &study.id,
                responses,
                settings.document_budget,
            )
            .map_err(wrap)
        })
        .collect::<Result<_, _>>()?;
    let aggregate =
        TrialAggregate::from_scores(attempts.iter().map(|a| a.attempt.exam_score).collect());
    Ok(SimulationOutcome {
        aggregate,
        attempts,
    })
}
