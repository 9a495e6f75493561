//! Shared vocabulary: chapters, sections, exams, QA pairs and scores.
//!
//! Every value here is immutable once built and serializes to the on-disk
//! chapter / record schemas with field names exactly as declared.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Absolute tolerance used by every score invariant check.
pub const SCORE_TOLERANCE: f64 = 1e-12;

/// Curated exams must have at least this many questions.
pub const MIN_EXAM_QUESTIONS: usize = 10;
/// Curated exams are capped at this many questions.
pub const MAX_EXAM_QUESTIONS: usize = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("exam has no scored questions")]
    EmptyExam,
    #[error("score {value} for question {question_id} is outside [0, 1]")]
    InvalidScore { question_id: String, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subject {
    Microbiology,
    Chemistry,
    Economics,
    Sociology,
    USHistory,
    Other(String),
}

impl Subject {
    /// Parses a directory or config name. Unknown names map to `Other`.
    pub fn from_name(name: &str) -> Subject {
        let norm: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "microbiology" => Subject::Microbiology,
            "chemistry" => Subject::Chemistry,
            "economics" => Subject::Economics,
            "sociology" => Subject::Sociology,
            "ushistory" => Subject::USHistory,
            _ => Subject::Other(name.to_string()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Subject::Microbiology => "Microbiology",
            Subject::Chemistry => "Chemistry",
            Subject::Economics => "Economics",
            Subject::Sociology => "Sociology",
            Subject::USHistory => "USHistory",
            Subject::Other(n) => n,
        }
    }

    /// Human label used in report tables.
    pub fn display_name(&self) -> &str {
        match self {
            Subject::USHistory => "US History",
            other => other.name(),
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Subject {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Subject {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Subject::from_name(&s))
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

/// The six revised-taxonomy cognitive levels, in increasing depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bloom {
    Remembering,
    Understanding,
    Applying,
    Analyzing,
    Evaluating,
    Creating,
}

impl Bloom {
    pub const ALL: [Bloom; 6] = [
        Bloom::Remembering,
        Bloom::Understanding,
        Bloom::Applying,
        Bloom::Analyzing,
        Bloom::Evaluating,
        Bloom::Creating,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Bloom::Remembering => "Remembering",
            Bloom::Understanding => "Understanding",
            Bloom::Applying => "Applying",
            Bloom::Analyzing => "Analyzing",
            Bloom::Evaluating => "Evaluating",
            Bloom::Creating => "Creating",
        }
    }

    /// Case-insensitive exact label match; anything else is `None`.
    pub fn parse(label: &str) -> Option<Bloom> {
        let l = label
            .trim()
            .trim_matches(|c: char| c == '*' || c == '"' || c == '.');
        Bloom::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(l))
    }

    /// Depth on a 1..=6 scale.
    pub fn depth(self) -> u8 {
        match self {
            Bloom::Remembering => 1,
            Bloom::Understanding => 2,
            Bloom::Applying => 3,
            Bloom::Analyzing => 4,
            Bloom::Evaluating => 5,
            Bloom::Creating => 6,
        }
    }

    pub fn definition(self) -> &'static str {
        match self {
            Bloom::Remembering => {
                "Producing or retrieving definitions, facts, or lists, or reciting previously learned information."
            }
            Bloom::Understanding => {
                "Grasping the meaning of information by interpreting and translating what has been learned."
            }
            Bloom::Applying => "Using learned information in new and concrete situations.",
            Bloom::Analyzing => "Breaking down or distinguishing the parts of learned information.",
            Bloom::Evaluating => {
                "Making judgments about information, validity of ideas, or quality of work based on a set of criteria."
            }
            Bloom::Creating => "Using information to generate new ideas or products.",
        }
    }
}

impl fmt::Display for Bloom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub index: usize,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamQuestion {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub reference_answer: Option<String>,
    #[serde(default)]
    pub bloom: Option<Bloom>,
    #[serde(default)]
    pub aligned_sections: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Exam {
    pub questions: Vec<ExamQuestion>,
}

impl Exam {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chapter {
    pub id: String,
    pub subject: Subject,
    pub title: String,
    /// Position in curriculum order within the subject.
    #[serde(default)]
    pub ordinal: u32,
    pub sections: Vec<Section>,
    pub exam: Exam,
    #[serde(default)]
    pub split: Split,
}

impl Chapter {
    pub fn section(&self, index: usize) -> Option<&Section> {
        self.sections.iter().find(|s| s.index == index)
    }

    /// All section contents joined in order, separated by blank lines.
    pub fn full_text(&self) -> String {
        join_sections(self.sections.iter())
    }
}

pub fn join_sections<'a>(sections: impl IntoIterator<Item = &'a Section>) -> String {
    sections
        .into_iter()
        .map(|s| s.content.as_str())
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    ZeroShot,
    FewShot,
    #[serde(rename = "cot")]
    CoT,
    BloomBased,
    FineTuned,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero-shot",
            Strategy::FewShot => "few-shot",
            Strategy::CoT => "cot",
            Strategy::BloomBased => "bloom-based",
            Strategy::FineTuned => "fine-tuned",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        match s.to_ascii_lowercase().as_str() {
            "zero-shot" | "zeroshot" => Some(Strategy::ZeroShot),
            "few-shot" | "fewshot" => Some(Strategy::FewShot),
            "cot" | "chain-of-thought" => Some(Strategy::CoT),
            "bloom" | "bloom-based" => Some(Strategy::BloomBased),
            "fine-tuned" | "finetuned" => Some(Strategy::FineTuned),
            _ => None,
        }
    }
}

/// Where a question came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: Strategy,
    pub model_id: String,
    pub trial: u32,
    pub seed: u64,
    /// Sampled cognitive level, only for Bloom-based generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bloom_level: Option<Bloom>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub anchor_section: usize,
    pub generator: Provenance,
}

impl QAPair {
    /// Builds a pair whose id is the content hash of chapter, anchor, trial,
    /// question and answer.
    pub fn new(
        chapter_id: &str,
        question: String,
        answer: String,
        anchor_section: usize,
        generator: Provenance,
    ) -> QAPair {
        let id = qa_id(
            chapter_id,
            &question,
            &answer,
            anchor_section,
            generator.trial,
        );
        QAPair {
            id,
            question,
            answer,
            anchor_section,
            generator,
        }
    }
}

pub fn qa_id(chapter_id: &str, question: &str, answer: &str, anchor: usize, trial: u32) -> String {
    let digest = content_hash(&[
        chapter_id,
        question,
        answer,
        &anchor.to_string(),
        &trial.to_string(),
    ]);
    format!("qa-{}", &digest[..16])
}

/// SHA-256 over length-prefixed parts, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn content_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamAttempt {
    pub study_set_id: String,
    pub responses: BTreeMap<String, String>,
    pub per_question_scores: BTreeMap<String, f64>,
    pub exam_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRecord {
    pub qa_id: String,
    pub s_empty: f64,
    pub s_full: f64,
    pub s_single: f64,
    pub s_all_but_one: f64,
    pub utility: f64,
}

impl UtilityRecord {
    pub fn new(
        qa_id: String,
        s_empty: f64,
        s_full: f64,
        s_single: f64,
        s_all_but_one: f64,
    ) -> Self {
        let utility = averaged_gain(s_empty, s_full, s_single, s_all_but_one);
        UtilityRecord {
            qa_id,
            s_empty,
            s_full,
            s_single,
            s_all_but_one,
            utility,
        }
    }

    /// True when `utility` matches the averaged-gain formula over the stored scores.
    pub fn is_consistent(&self) -> bool {
        let expected = averaged_gain(self.s_empty, self.s_full, self.s_single, self.s_all_but_one);
        (self.utility - expected).abs() <= SCORE_TOLERANCE
    }
}

/// Mean of the single-one gain and the all-but-one gain.
pub fn averaged_gain(s_empty: f64, s_full: f64, s_single: f64, s_all_but_one: f64) -> f64 {
    ((s_single - s_empty) + (s_full - s_all_but_one)) / 2.0
}

/// Arithmetic mean of per-question scores, each required to lie in [0, 1].
pub fn exam_score(per_question: &BTreeMap<String, f64>) -> Result<f64, ScoreError> {
    if per_question.is_empty() {
        return Err(ScoreError::EmptyExam);
    }
    for (id, &v) in per_question {
        if !(0.0..=1.0).contains(&v) {
            return Err(ScoreError::InvalidScore {
                question_id: id.clone(),
                value: v,
            });
        }
    }
    Ok(per_question.values().sum::<f64>() / per_question.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "detail")]
pub enum Violation {
    NoSections,
    DuplicateSectionIndex(usize),
    NonContiguousSections { expected: usize, found: usize },
    EmptySectionContent(usize),
    ExamTooSmall(usize),
    ExamTooLarge(usize),
    DuplicateQuestionId(String),
    EmptyQuestionText(String),
    AlignmentOutOfRange { question_id: String, section: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSections => write!(f, "sections: must be non-empty"),
            Violation::DuplicateSectionIndex(i) => write!(f, "sections.index: duplicate index {i}"),
            Violation::NonContiguousSections { expected, found } => {
                write!(f, "sections.index: expected {expected}, found {found}")
            }
            Violation::EmptySectionContent(i) => write!(f, "sections[{i}].content: empty"),
            Violation::ExamTooSmall(n) => write!(f, "exam.questions: {n} < {MIN_EXAM_QUESTIONS}"),
            Violation::ExamTooLarge(n) => write!(f, "exam.questions: {n} > {MAX_EXAM_QUESTIONS}"),
            Violation::DuplicateQuestionId(id) => write!(f, "exam.questions.id: duplicate {id}"),
            Violation::EmptyQuestionText(id) => write!(f, "exam.questions[{id}].text: empty"),
            Violation::AlignmentOutOfRange {
                question_id,
                section,
            } => write!(
                f,
                "exam.questions[{question_id}].aligned_sections: {section} not a section"
            ),
        }
    }
}

/// Checks every chapter invariant. `curated` enables the exam size bounds.
pub fn validate_chapter(chapter: &Chapter, curated: bool) -> Vec<Violation> {
    let mut out = Vec::new();
    if chapter.sections.is_empty() {
        out.push(Violation::NoSections);
    }
    let mut seen = BTreeSet::new();
    for s in &chapter.sections {
        if !seen.insert(s.index) {
            out.push(Violation::DuplicateSectionIndex(s.index));
        }
        if s.content.trim().is_empty() {
            out.push(Violation::EmptySectionContent(s.index));
        }
    }
    for (expected, &found) in (1..).zip(seen.iter()) {
        if expected != found {
            out.push(Violation::NonContiguousSections { expected, found });
            break;
        }
    }
    let n = chapter.exam.questions.len();
    if curated && n < MIN_EXAM_QUESTIONS {
        out.push(Violation::ExamTooSmall(n));
    }
    if curated && n > MAX_EXAM_QUESTIONS {
        out.push(Violation::ExamTooLarge(n));
    }
    let mut ids = BTreeSet::new();
    for q in &chapter.exam.questions {
        if !ids.insert(q.id.as_str()) {
            out.push(Violation::DuplicateQuestionId(q.id.clone()));
        }
        if q.text.trim().is_empty() {
            out.push(Violation::EmptyQuestionText(q.id.clone()));
        }
        for &a in &q.aligned_sections {
            if !seen.contains(&a) {
                out.push(Violation::AlignmentOutOfRange {
                    question_id: q.id.clone(),
                    section: a,
                });
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    pub(crate) fn chapter_with(n_sections: usize, n_questions: usize) -> Chapter {
        Chapter {
            id: "bio-01".into(),
            subject: Subject::Microbiology,
            title: "Cells".into(),
            ordinal: 1,
            sections: (1..=n_sections)
                .map(|i| Section {
                    index: i,
                    content: format!("Section {i} text."),
                })
                .collect(),
            exam: Exam {
                questions: (1..=n_questions)
                    .map(|i| ExamQuestion {
                        id: format!("q{i}"),
                        text: format!("Question {i}?"),
                        reference_answer: None,
                        bloom: None,
                        aligned_sections: vec![],
                    })
                    .collect(),
            },
            split: Split::Unassigned,
        }
    }

    fn scores(v: &[f64]) -> BTreeMap<String, f64> {
        v.iter()
            .enumerate()
            .map(|(i, &s)| (format!("q{}", i + 1), s))
            .collect()
    }

    #[test]
    fn exam_score_examples() {
        assert_eq!(exam_score(&scores(&[1.0, 0.5, 0.0])).unwrap(), 0.5);
        assert_eq!(exam_score(&scores(&[1.0])).unwrap(), 1.0);
        assert!((exam_score(&scores(&[0.8; 4])).unwrap() - 0.8).abs() < SCORE_TOLERANCE);
    }

    #[test]
    fn exam_score_errors() {
        assert_eq!(exam_score(&BTreeMap::new()), Err(ScoreError::EmptyExam));
        assert!(matches!(
            exam_score(&scores(&[0.5, 1.2])),
            Err(ScoreError::InvalidScore { .. })
        ));
        assert!(matches!(
            exam_score(&scores(&[-0.1])),
            Err(ScoreError::InvalidScore { .. })
        ));
    }

    #[test]
    fn validate_well_formed_chapter() {
        assert!(validate_chapter(&chapter_with(4, 13), true).is_empty());
    }

    #[test]
    fn validate_small_exam() {
        assert_eq!(
            validate_chapter(&chapter_with(4, 9), true),
            vec![Violation::ExamTooSmall(9)]
        );
        // pre-curation chapters may violate the bounds
        assert!(validate_chapter(&chapter_with(4, 9), false).is_empty());
    }

    #[test]
    fn validate_duplicate_section() {
        let mut ch = chapter_with(4, 12);
        ch.sections[3].index = 3;
        let v = validate_chapter(&ch, true);
        assert_eq!(v, vec![Violation::DuplicateSectionIndex(3)]);
    }

    #[test]
    fn validate_gap_and_alignment() {
        let mut ch = chapter_with(3, 12);
        ch.sections[2].index = 5;
        ch.exam.questions[0].aligned_sections = vec![4];
        let v = validate_chapter(&ch, true);
        assert!(v.contains(&Violation::NonContiguousSections {
            expected: 3,
            found: 5
        }));
        assert!(v.contains(&Violation::AlignmentOutOfRange {
            question_id: "q1".into(),
            section: 4
        }));
    }

    #[test]
    fn bloom_scale_and_parse() {
        assert_eq!(Bloom::Remembering.depth(), 1);
        assert_eq!(Bloom::Analyzing.depth(), 4);
        assert_eq!(Bloom::Creating.depth(), 6);
        assert_eq!(Bloom::parse(" understanding "), Some(Bloom::Understanding));
        assert_eq!(Bloom::parse("Synthesis"), None);
    }

    #[test]
    fn subject_names_round_trip() {
        for s in [
            "Microbiology",
            "Chemistry",
            "Economics",
            "Sociology",
            "USHistory",
        ] {
            assert_eq!(Subject::from_name(s).name(), s);
        }
        assert_eq!(Subject::from_name("us_history"), Subject::USHistory);
        assert_eq!(
            Subject::from_name("Physics"),
            Subject::Other("Physics".into())
        );
    }

    #[test]
    fn qa_ids_depend_on_trial() {
        let p = |trial| Provenance {
            strategy: Strategy::ZeroShot,
            model_id: "m".into(),
            trial,
            seed: trial as u64,
            bloom_level: None,
        };
        let a = QAPair::new("c", "Q?".into(), "A".into(), 2, p(0));
        let b = QAPair::new("c", "Q?".into(), "A".into(), 2, p(1));
        assert_ne!(a.id, b.id);
        assert_eq!(a.id, QAPair::new("c", "Q?".into(), "A".into(), 2, p(0)).id);
    }

    #[test]
    fn chapter_json_round_trip() {
        let mut ch = chapter_with(2, 10);
        ch.exam.questions[0].bloom = Some(Bloom::Applying);
        ch.exam.questions[0].reference_answer = Some("yes".into());
        ch.subject = Subject::Other("Astronomy".into());
        let s = serde_json::to_string(&ch).unwrap();
        let back: Chapter = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ch);
    }

    proptest! {
        #[test]
        fn exam_score_is_bounded_and_permutation_invariant(
            values in proptest::collection::vec(0.0f64..=1.0, 1..30),
            rot in 0usize..30,
        ) {
            let s = exam_score(&scores(&values)).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s >= lo - SCORE_TOLERANCE && s <= hi + SCORE_TOLERANCE);
            let mut rotated = values.clone();
            rotated.rotate_left(rot % values.len());
            let s2 = exam_score(&scores(&rotated)).unwrap();
            prop_assert!((s - s2).abs() <= SCORE_TOLERANCE);
        }

        #[test]
        fn utility_record_round_trips(
            a in 0.0f64..=1.0, b in 0.0f64..=1.0, c in 0.0f64..=1.0, d in 0.0f64..=1.0,
            id in "[a-z0-9\\-]{1,20}",
        ) {
            let r = UtilityRecord::new(id, a, b, c, d);
            prop_assert!(r.is_consistent());
            prop_assert!(r.utility >= -1.0 && r.utility <= 1.0);
            let back: UtilityRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            prop_assert_eq!(&back.qa_id, &r.qa_id);
            prop_assert!((back.utility - r.utility).abs() <= SCORE_TOLERANCE);
            prop_assert!(back.is_consistent());
        }
    }
}
