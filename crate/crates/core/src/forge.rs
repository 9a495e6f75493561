//! Question generation strategies and the independent answer generator.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{
    content_hash, join_sections, Bloom, Chapter, Provenance, QAPair, Section, Split, Strategy,
};
use crate::lm::{extract_json, retry_parse, Attempt, CallSettings, Gateway, LmError, Message};
use crate::prompts;

pub const PARSE_ATTEMPTS: u32 = 3;
pub const MIN_FEW_SHOT_EXEMPLARS: usize = 5;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("{chapter} section {section}: question generation failed: {reason}")]
    Generation {
        chapter: String,
        section: usize,
        reason: String,
    },
    #[error("few-shot generation needs {MIN_FEW_SHOT_EXEMPLARS} exemplars for {subject}, found {available}")]
    Exemplar { subject: String, available: usize },
    #[error("{chapter}: answer generation failed: {reason}")]
    Answer { chapter: String, reason: String },
    #[error("invalid Bloom sampler: {0}")]
    Sampler(String),
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Deterministic child seed for a labelled stream.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let h = content_hash(&[&base.to_string(), label]);
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

/// The anchor section and the (possibly left-truncated) sections before it.
#[derive(Debug, Clone, Copy)]
pub struct GenerationContext<'a> {
    pub chapter: &'a Chapter,
    pub anchor: &'a Section,
    pub preceding: &'a [Section],
}

impl<'a> GenerationContext<'a> {
    /// Context for `anchor`, keeping as many of the most recent preceding
    /// sections as fit in `budget` characters. The anchor is never cut.
    pub fn new(chapter: &'a Chapter, anchor: usize, budget: usize) -> Option<Self> {
        let pos = chapter.sections.iter().position(|s| s.index == anchor)?;
        let before = &chapter.sections[..pos];
        let contents: Vec<&str> = before.iter().map(|s| s.content.as_str()).collect();
        let kept = prompts::truncate_left(&contents, budget).len();
        Some(GenerationContext {
            chapter,
            anchor: &chapter.sections[pos],
            preceding: &before[before.len() - kept..],
        })
    }

    pub fn preceding_text(&self) -> String {
        join_sections(self.preceding)
    }

    /// Preceding sections followed by the anchor.
    pub fn through_anchor(&self) -> String {
        join_sections(self.preceding.iter().chain(std::iter::once(self.anchor)))
    }
}

/// How questions are produced.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSetup {
    pub strategy: Strategy,
    /// Model and temperature; for fine-tuned passthrough the model is the tuned one.
    pub settings: CallSettings,
    /// (section, exam question) demonstrations for few-shot generation.
    pub exemplars: Vec<(String, String)>,
    pub context_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuestion {
    pub question: String,
    /// The exact prompt whose completion produced the question.
    pub prompt: String,
    pub provenance: Provenance,
}

fn parse_field(raw: &str, field: &str) -> Result<String, String> {
    let v = extract_json(raw).map_err(|e| e.to_string())?;
    match v.get(field).and_then(Value::as_str).map(str::trim) {
        Some(s) if !s.is_empty() => Ok(s.to_string()),
        _ => Err(format!("missing or empty \"{field}\"")),
    }
}

fn ask(
    gateway: &Gateway,
    settings: &CallSettings,
    prompt: &str,
    field: &str,
) -> Result<Result<String, String>, LmError> {
    let req = settings.request(prompt);
    retry_parse(gateway, &req, PARSE_ATTEMPTS, |c| {
        match parse_field(&c.text, field) {
            Ok(q) => Attempt::Done(q),
            Err(e) => Attempt::Retry(e),
        }
    })
}

/// One question for the context's anchor section.
pub fn generate_question(
    gateway: &Gateway,
    setup: &GeneratorSetup,
    ctx: &GenerationContext<'_>,
    trial: u32,
    seed: u64,
    bloom_level: Option<Bloom>,
) -> Result<GeneratedQuestion, ForgeError> {
    let settings = setup.settings.with_seed(seed);
    let preceding = ctx.preceding_text();
    let anchor = ctx.anchor.content.as_str();
    let fail = |reason: String| ForgeError::Generation {
        chapter: ctx.chapter.id.clone(),
        section: ctx.anchor.index,
        reason,
    };
    let (prompt, question) = match setup.strategy {
        Strategy::ZeroShot | Strategy::FineTuned => {
            let p = prompts::question_zero_shot(&preceding, anchor);
            let q = ask(gateway, &settings, &p, "question")?.map_err(fail)?;
            (p, q)
        }
        Strategy::FewShot => {
            if setup.exemplars.len() < MIN_FEW_SHOT_EXEMPLARS {
                return Err(ForgeError::Exemplar {
                    subject: ctx.chapter.subject.name().to_string(),
                    available: setup.exemplars.len(),
                });
            }
            let p = prompts::question_few_shot(&setup.exemplars, &preceding, anchor);
            let q = ask(gateway, &settings, &p, "question")?.map_err(fail)?;
            (p, q)
        }
        Strategy::CoT => {
            // the reasoning field is requested but not kept
            let p = prompts::question_cot(&preceding, anchor);
            let q = ask(gateway, &settings, &p, "question")?.map_err(fail)?;
            (p, q)
        }
        Strategy::BloomBased => {
            let level = bloom_level
                .ok_or_else(|| ForgeError::Setup("Bloom-based generation needs a level".into()))?;
            let context = ctx.through_anchor();
            let step1 = prompts::bloom_next_paragraph(level, &context);
            let next = ask(gateway, &settings, &step1, "next_paragraph")?.map_err(&fail)?;
            let p = prompts::bloom_bridge_question(&context, &next);
            let q = ask(gateway, &settings, &p, "question")?.map_err(fail)?;
            (p, q)
        }
    };
    Ok(GeneratedQuestion {
        question,
        prompt,
        provenance: Provenance {
            strategy: setup.strategy,
            model_id: settings.model_id.clone(),
            trial,
            seed,
            bloom_level: if setup.strategy == Strategy::BloomBased {
                bloom_level
            } else {
                None
            },
        },
    })
}

fn parse_answers(raw: &str, expected: usize) -> Result<Vec<String>, String> {
    let v = extract_json(raw).map_err(|e| e.to_string())?;
    let items = v
        .get("qa_pairs")
        .and_then(Value::as_array)
        .ok_or("missing \"qa_pairs\" array")?;
    if items.len() != expected {
        return Err(format!("expected {expected} answers, got {}", items.len()));
    }
    items
        .iter()
        .map(|item| match item.get("answer") {
            Some(Value::String(s)) => Ok(s.trim().to_string()),
            Some(Value::Number(n)) => Ok(n.to_string()),
            Some(Value::Bool(b)) => Ok(b.to_string()),
            _ => Err("qa_pairs entry without answer".to_string()),
        })
        .collect()
}

/// Answers `questions` in one call. The prompt carries only the questions.
pub fn generate_answers(
    gateway: &Gateway,
    settings: &CallSettings,
    chapter_id: &str,
    questions: &[String],
) -> Result<Vec<String>, ForgeError> {
    if questions.is_empty() {
        return Err(ForgeError::Answer {
            chapter: chapter_id.to_string(),
            reason: "no questions".into(),
        });
    }
    let req = settings.request(prompts::answers(questions));
    retry_parse(gateway, &req, PARSE_ATTEMPTS, |c| {
        match parse_answers(&c.text, questions.len()) {
            Ok(a) => Attempt::Done(a),
            Err(e) => Attempt::Retry(e),
        }
    })?
    .map_err(|reason| ForgeError::Answer {
        chapter: chapter_id.to_string(),
        reason,
    })
}

/// A generated pair with the context needed downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPair {
    pub chapter_id: String,
    pub ordinal: u32,
    pub pair: QAPair,
    pub prompt: String,
}

/// One question per section for one trial, then one batched answer call.
/// `bloom_levels[i]` is the level for the i-th section (Bloom-based only).
pub fn generate_for_chapter(
    gateway: &Gateway,
    setup: &GeneratorSetup,
    answerer: &CallSettings,
    chapter: &Chapter,
    trial: u32,
    seed: u64,
    bloom_levels: &[Option<Bloom>],
) -> Result<Vec<GeneratedPair>, ForgeError> {
    let questions: Vec<GeneratedQuestion> = chapter
        .sections
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let ctx = GenerationContext::new(chapter, s.index, setup.context_budget)
                .expect("section belongs to chapter");
            generate_question(
                gateway,
                setup,
                &ctx,
                trial,
                seed,
                bloom_levels.get(i).copied().flatten(),
            )
        })
        .collect::<Result<_, _>>()?;
    let texts: Vec<String> = questions.iter().map(|q| q.question.clone()).collect();
    let answers = generate_answers(gateway, &answerer.with_seed(seed), &chapter.id, &texts)?;
    Ok(questions
        .into_iter()
        .zip(answers)
        .zip(&chapter.sections)
        .map(|((q, a), s)| GeneratedPair {
            chapter_id: chapter.id.clone(),
            ordinal: chapter.ordinal,
            pair: QAPair::new(&chapter.id, q.question, a, s.index, q.provenance),
            prompt: q.prompt,
        })
        .collect())
}

/// Categorical sampler over Bloom levels with its own seeded stream.
#[derive(Debug, Clone)]
pub struct BloomSampler {
    distribution: Vec<(Bloom, f64)>,
    rng: ChaCha8Rng,
}

impl BloomSampler {
    pub fn new(distribution: BTreeMap<Bloom, f64>, seed: u64) -> Result<Self, ForgeError> {
        if distribution.values().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(ForgeError::Sampler(
                "probabilities must be finite and >= 0".into(),
            ));
        }
        let total: f64 = distribution.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ForgeError::Sampler(format!("probabilities sum to {total}")));
        }
        Ok(BloomSampler {
            distribution: distribution.into_iter().filter(|(_, p)| *p > 0.0).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Normalized label frequencies of the train-split exam questions.
    pub fn from_chapters(chapters: &[Chapter], seed: u64) -> Result<Self, ForgeError> {
        let mut counts: BTreeMap<Bloom, usize> = BTreeMap::new();
        for q in chapters
            .iter()
            .filter(|c| c.split == Split::Train)
            .flat_map(|c| &c.exam.questions)
        {
            if let Some(b) = q.bloom {
                *counts.entry(b).or_default() += 1;
            }
        }
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(ForgeError::Sampler("no labelled train questions".into()));
        }
        let dist = counts
            .into_iter()
            .map(|(b, n)| (b, n as f64 / total as f64))
            .collect();
        BloomSampler::new(dist, seed)
    }

    pub fn distribution(&self) -> &[(Bloom, f64)] {
        &self.distribution
    }

    pub fn sample(&mut self) -> Bloom {
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        for &(b, p) in &self.distribution {
            acc += p;
            if u < acc {
                return b;
            }
        }
        self.distribution.last().expect("non-empty distribution").0
    }
}

/// `k` (section, exam question) pairs drawn uniformly without replacement
/// from the subject's aligned train questions.
pub fn sample_exemplars(
    chapters: &[Chapter],
    subject: &str,
    k: usize,
    seed: u64,
) -> Result<Vec<(String, String)>, ForgeError> {
    let mut pool = Vec::new();
    for c in chapters
        .iter()
        .filter(|c| c.split == Split::Train && c.subject.name() == subject)
    {
        for q in &c.exam.questions {
            for &s in &q.aligned_sections {
                if let Some(sec) = c.section(s) {
                    pool.push((sec.content.clone(), q.text.clone()));
                }
            }
        }
    }
    if pool.len() < k.max(MIN_FEW_SHOT_EXEMPLARS) {
        return Err(ForgeError::Exemplar {
            subject: subject.to_string(),
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, subject));
    let mut picked: Vec<usize> = sample(&mut rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftPair {
    pub chapter_id: String,
    pub section: usize,
    pub prompt: String,
    pub target: String,
}

impl SftPair {
    pub fn messages(&self) -> Vec<Message> {
        vec![
            Message::system(prompts::GENERATOR_SYSTEM),
            Message::user(self.prompt.clone()),
            Message::assistant(self.target.clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SftDataset {
    pub pairs: Vec<SftPair>,
    /// Exam questions with no aligned section.
    pub skipped: usize,
}

/// One (zero-shot prompt, exam question) pair per aligned section.
pub fn build_sft_dataset(chapters: &[Chapter], context_budget: usize) -> SftDataset {
    let mut out = SftDataset::default();
    for c in chapters {
        for q in &c.exam.questions {
            if q.aligned_sections.is_empty() {
                out.skipped += 1;
                continue;
            }
            for &s in &q.aligned_sections {
                let Some(ctx) = GenerationContext::new(c, s, context_budget) else {
                    continue;
                };
                out.pairs.push(SftPair {
                    chapter_id: c.id.clone(),
                    section: s,
                    prompt: prompts::question_zero_shot(&ctx.preceding_text(), &ctx.anchor.content),
                    target: q.text.clone(),
                });
            }
        }
    }
    out
}
