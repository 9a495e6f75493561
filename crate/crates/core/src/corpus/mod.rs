//! Raw chapter files to curated chapters.
//!
//! Layout: `<corpus>/<subject>/<ordinal>_<slug>/{body.md, exam.md}` with one
//! `<corpus>/<subject>/fewshot.json` sectioning example per subject.

mod annotate;
mod exam;
mod split;

pub use annotate::{
    align_exam_to_sections, classify_bloom, classify_texts, segment_sections, AlignmentWarning,
    BLOOM_BATCH,
};
pub use exam::{
    extract_exam, parse_exam_markdown, strip_markdown, ChapterRejected, ParsedQuestion,
};
pub use split::{
    corpus_stats, split_train_test, CorpusStats, StatsRow, TEST_CHAPTERS, TRAIN_CHAPTERS,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{validate_chapter, Chapter, Exam, Split, Subject};
use crate::lm::{CallSettings, Gateway, LmError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus layout invalid:\n  {}", .0.join("\n  "))]
    Layout(Vec<String>),
    #[error("{chapter}: segmentation failed: {reason}")]
    Segmentation { chapter: String, reason: String },
    #[error("annotation failed: {0}")]
    Annotation(String),
    #[error("subject {subject}: {count} curated chapters, need at least {required} to split")]
    Split {
        subject: String,
        count: usize,
        required: usize,
    },
    #[error("{chapter}: curated chapter invalid: {detail}")]
    Invalid { chapter: String, detail: String },
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Sectioning demonstration shown to the segmentation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub input: String,
    /// Expected output, as a JSON object or preformatted text.
    pub output: Value,
}

impl FewShotExample {
    pub fn output_text(&self) -> String {
        match &self.output {
            Value::String(s) => s.clone(),
            other => serde_json::to_string_pretty(other).expect("json value serializes"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawChapterFile {
    pub subject: Subject,
    pub ordinal: u32,
    pub slug: String,
    pub body_markdown: String,
    pub exam_markdown: String,
}

impl RawChapterFile {
    pub fn chapter_id(&self) -> String {
        format!(
            "{}-{:02}-{}",
            self.subject.name().to_ascii_lowercase(),
            self.ordinal,
            self.slug
        )
    }

    /// First `# ` heading of the body, else the slug with separators as spaces.
    pub fn title(&self) -> String {
        self.body_markdown
            .lines()
            .find_map(|l| l.strip_prefix("# "))
            .map(|t| t.trim().to_string())
            .unwrap_or_else(|| self.slug.replace(['-', '_'], " "))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusInput {
    pub chapters: Vec<RawChapterFile>,
    /// Keyed by subject name.
    pub fewshot: BTreeMap<String, FewShotExample>,
}

fn parse_chapter_dir(name: &str) -> Option<(u32, String)> {
    let (ord, slug) = name.split_once('_')?;
    let ordinal = ord.parse().ok()?;
    let slug: String = slug
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    (!slug.trim_matches('-').is_empty()).then_some((ordinal, slug))
}

fn visible_dirs(dir: &Path) -> std::io::Result<Vec<(String, std::path::PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with('.') && entry.file_type()?.is_dir() {
            out.push((name, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Reads the corpus directory, collecting every layout violation before failing.
pub fn read_corpus(dir: &Path) -> Result<CorpusInput, CorpusError> {
    let mut problems = Vec::new();
    let subjects = match visible_dirs(dir) {
        Ok(s) => s,
        Err(e) => return Err(CorpusError::Layout(vec![format!("{}: {e}", dir.display())])),
    };
    if subjects.is_empty() {
        return Err(CorpusError::Layout(vec![format!(
            "{}: no subject directories",
            dir.display()
        )]));
    }
    let mut input = CorpusInput::default();
    for (subject_name, subject_dir) in subjects {
        let subject = Subject::from_name(&subject_name);
        let fewshot_path = subject_dir.join("fewshot.json");
        match fs::read_to_string(&fewshot_path) {
            Ok(text) => match serde_json::from_str::<FewShotExample>(&text) {
                Ok(ex) => {
                    input.fewshot.insert(subject.name().to_string(), ex);
                }
                Err(e) => problems.push(format!("{}: {e}", fewshot_path.display())),
            },
            Err(_) => problems.push(format!("{}: missing", fewshot_path.display())),
        }
        let chapter_dirs = match visible_dirs(&subject_dir) {
            Ok(c) => c,
            Err(e) => {
                problems.push(format!("{}: {e}", subject_dir.display()));
                continue;
            }
        };
        if chapter_dirs.is_empty() {
            problems.push(format!("{}: no chapter directories", subject_dir.display()));
        }
        let mut ordinals = BTreeSet::new();
        for (name, path) in chapter_dirs {
            let Some((ordinal, slug)) = parse_chapter_dir(&name) else {
                problems.push(format!(
                    "{}: expected <ordinal>_<slug> directory name",
                    path.display()
                ));
                continue;
            };
            if !ordinals.insert(ordinal) {
                problems.push(format!("{}: duplicate ordinal {ordinal}", path.display()));
                continue;
            }
            let read = |file: &str| {
                fs::read_to_string(path.join(file))
                    .map_err(|e| format!("{}: {e}", path.join(file).display()))
            };
            match (read("body.md"), read("exam.md")) {
                (Ok(body), Ok(exam)) => {
                    if body.trim().is_empty() {
                        problems.push(format!("{}: body.md is empty", path.display()));
                        continue;
                    }
                    input.chapters.push(RawChapterFile {
                        subject: subject.clone(),
                        ordinal,
                        slug,
                        body_markdown: body,
                        exam_markdown: exam,
                    });
                }
                (b, e) => problems.extend(b.err().into_iter().chain(e.err())),
            }
        }
    }
    if problems.is_empty() {
        Ok(input)
    } else {
        Err(CorpusError::Layout(problems))
    }
}

/// Model settings for each curation step.
#[derive(Debug, Clone, PartialEq)]
pub struct CurationSettings {
    pub segmenter: CallSettings,
    pub classifier: CallSettings,
    pub aligner: CallSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedChapter {
    pub chapter_id: String,
    pub exam_questions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChapterOutcome {
    Curated {
        chapter: Chapter,
        warnings: Vec<AlignmentWarning>,
    },
    Rejected(RejectedChapter),
}

/// Exam extraction, sectioning, Bloom labels and alignment for one chapter.
/// The exam is parsed first so rejected chapters cost no model calls.
pub fn curate_chapter(
    gateway: &Gateway,
    settings: &CurationSettings,
    raw: &RawChapterFile,
    example: &FewShotExample,
) -> Result<ChapterOutcome, CorpusError> {
    let id = raw.chapter_id();
    let questions = match extract_exam(&id, &raw.exam_markdown) {
        Ok(q) => q,
        Err(ChapterRejected { count }) => {
            log::info!("{id}: rejected with {count} usable exam questions");
            return Ok(ChapterOutcome::Rejected(RejectedChapter {
                chapter_id: id,
                exam_questions: count,
            }));
        }
    };
    let sections = segment_sections(
        gateway,
        &settings.segmenter,
        &id,
        &raw.body_markdown,
        example,
    )?;
    let questions = classify_bloom(gateway, &settings.classifier, questions)
        .map_err(|e| CorpusError::Annotation(format!("{id}: {e}")))?;
    let chapter = Chapter {
        id: id.clone(),
        subject: raw.subject.clone(),
        title: raw.title(),
        ordinal: raw.ordinal,
        sections,
        exam: Exam { questions },
        split: Split::Unassigned,
    };
    let (chapter, warnings) = align_exam_to_sections(gateway, &settings.aligner, chapter)?;
    let violations = validate_chapter(&chapter, true);
    if !violations.is_empty() {
        return Err(CorpusError::Invalid {
            chapter: id,
            detail: violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        });
    }
    Ok(ChapterOutcome::Curated { chapter, warnings })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IngestOutcome {
    pub chapters: Vec<Chapter>,
    pub rejected: Vec<RejectedChapter>,
    pub warnings: Vec<AlignmentWarning>,
    pub stats: CorpusStats,
}

/// Curates every chapter concurrently on the current rayon pool, then
/// splits (unless `split` is `None`) and computes statistics.
pub fn ingest(
    gateway: &Gateway,
    settings: &CurationSettings,
    input: &CorpusInput,
    split: Option<(usize, usize)>,
) -> Result<IngestOutcome, CorpusError> {
    let outcomes: Vec<ChapterOutcome> = input
        .chapters
        .par_iter()
        .map(|raw| {
            let example = input.fewshot.get(raw.subject.name()).ok_or_else(|| {
                CorpusError::Layout(vec![format!(
                    "no fewshot.json for subject {}",
                    raw.subject.name()
                )])
            })?;
            curate_chapter(gateway, settings, raw, example)
        })
        .collect::<Result<_, _>>()?;
    let mut out = IngestOutcome::default();
    let mut curated = Vec::new();
    for o in outcomes {
        match o {
            ChapterOutcome::Curated { chapter, warnings } => {
                curated.push(chapter);
                out.warnings.extend(warnings);
            }
            ChapterOutcome::Rejected(r) => out.rejected.push(r),
        }
    }
    out.chapters = match split {
        Some((train, test)) => split_train_test(curated, train, test)?,
        None => {
            curated
                .sort_by(|a, b| (a.subject.name(), a.ordinal).cmp(&(b.subject.name(), b.ordinal)));
            curated
        }
    };
    out.stats = corpus_stats(&out.chapters);
    Ok(out)
}
