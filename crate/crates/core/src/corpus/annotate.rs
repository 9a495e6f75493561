//! Model-backed curation steps: sectioning, Bloom labels and alignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CorpusError, FewShotExample};
use crate::domain::{Bloom, Chapter, ExamQuestion, Section};
use crate::lm::{extract_json, retry_parse, Attempt, CallSettings, Gateway};
use crate::prompts;

pub const PARSE_ATTEMPTS: u32 = 3;
pub const BLOOM_BATCH: usize = 25;

/// An alignment index the model produced that is not a section of the chapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentWarning {
    pub chapter_id: String,
    pub question_id: String,
    pub section: i64,
}

fn parse_sections(raw: &str) -> Result<Vec<Section>, String> {
    let v = extract_json(raw).map_err(|e| e.to_string())?;
    let map = v
        .get("section")
        .or_else(|| v.get("sections"))
        .and_then(Value::as_object)
        .ok_or("missing \"section\" object")?;
    let mut numbered = Vec::with_capacity(map.len());
    for (k, entry) in map {
        let n: usize = k
            .trim()
            .parse()
            .map_err(|_| format!("section key {k:?} is not a number"))?;
        let content = entry
            .get("content")
            .and_then(Value::as_str)
            .or_else(|| entry.as_str())
            .ok_or_else(|| format!("section {k} has no content"))?;
        numbered.push((n, content.trim().to_string()));
    }
    numbered.sort_by_key(|(n, _)| *n);
    Ok(numbered
        .into_iter()
        .filter(|(_, c)| !c.is_empty())
        .enumerate()
        .map(|(i, (_, content))| Section {
            index: i + 1,
            content,
        })
        .collect())
}

/// Splits a chapter body into numbered sections. Sections come back
/// renumbered 1..k in the model's order; empty entries are dropped.
pub fn segment_sections(
    gateway: &Gateway,
    settings: &CallSettings,
    chapter_id: &str,
    body_markdown: &str,
    example: &FewShotExample,
) -> Result<Vec<Section>, CorpusError> {
    let segmentation = |reason: String| CorpusError::Segmentation {
        chapter: chapter_id.to_string(),
        reason,
    };
    if body_markdown.trim().is_empty() {
        return Err(segmentation("empty body".into()));
    }
    let req = settings.request(prompts::segmentation(
        &example.input,
        &example.output_text(),
        body_markdown,
    ));
    let sections = retry_parse(gateway, &req, PARSE_ATTEMPTS, |c| {
        match parse_sections(&c.text) {
            Ok(s) => Attempt::Done(s),
            Err(e) => Attempt::Retry(e),
        }
    })?
    .map_err(segmentation)?;
    if sections.is_empty() {
        return Err(segmentation("model returned no sections".into()));
    }
    Ok(sections)
}

fn parse_bloom_batch(raw: &str, expected: usize) -> Result<Vec<Bloom>, String> {
    let v = extract_json(raw).map_err(|e| e.to_string())?;
    let items = v
        .get("bloom_categories")
        .and_then(Value::as_array)
        .ok_or("missing \"bloom_categories\" array")?;
    if items.len() != expected {
        return Err(format!("expected {expected} labels, got {}", items.len()));
    }
    items
        .iter()
        .map(|item| {
            let label = item
                .get("bloom_category")
                .and_then(Value::as_str)
                .or_else(|| item.as_str())
                .ok_or("entry without bloom_category")?;
            Bloom::parse(label).ok_or_else(|| format!("unknown category {label:?}"))
        })
        .collect()
}

/// One Bloom category per question text, one model call per batch of up to 25.
pub fn classify_texts(
    gateway: &Gateway,
    settings: &CallSettings,
    texts: &[&str],
) -> Result<Vec<Bloom>, CorpusError> {
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(BLOOM_BATCH) {
        let req = settings.request(prompts::bloom_classification(batch));
        let labels = retry_parse(gateway, &req, PARSE_ATTEMPTS, |c| {
            match parse_bloom_batch(&c.text, batch.len()) {
                Ok(l) => Attempt::Done(l),
                Err(e) => Attempt::Retry(e),
            }
        })?
        .map_err(CorpusError::Annotation)?;
        out.extend(labels);
    }
    Ok(out)
}

pub fn classify_bloom(
    gateway: &Gateway,
    settings: &CallSettings,
    mut questions: Vec<ExamQuestion>,
) -> Result<Vec<ExamQuestion>, CorpusError> {
    if questions.is_empty() {
        return Err(CorpusError::Annotation("no questions to classify".into()));
    }
    let texts: Vec<&str> = questions.iter().map(|q| q.text.as_str()).collect();
    let labels = classify_texts(gateway, settings, &texts)?;
    for (q, b) in questions.iter_mut().zip(labels) {
        q.bloom = Some(b);
    }
    Ok(questions)
}

fn parse_alignment(raw: &str) -> Result<BTreeMap<usize, Vec<i64>>, String> {
    let v = extract_json(raw).map_err(|e| e.to_string())?;
    let items = v
        .get("alignments")
        .and_then(Value::as_array)
        .ok_or("missing \"alignments\" array")?;
    let mut out = BTreeMap::new();
    for item in items {
        let q = item
            .get("question")
            .and_then(as_integer)
            .ok_or("alignment entry without question number")?;
        let sections = item
            .get("sections")
            .and_then(Value::as_array)
            .ok_or("alignment entry without sections")?
            .iter()
            .map(|s| as_integer(s).ok_or("non-integer section"))
            .collect::<Result<Vec<_>, _>>()?;
        if q >= 1 {
            out.insert(q as usize, sections);
        }
    }
    Ok(out)
}

fn as_integer(v: &Value) -> Option<i64> {
    v.as_i64()
        .or_else(|| v.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
        .or_else(|| v.as_str().and_then(|s| s.trim().parse().ok()))
}

/// Fills `aligned_sections` for every exam question. Indices that are not
/// sections of the chapter are dropped and reported.
pub fn align_exam_to_sections(
    gateway: &Gateway,
    settings: &CallSettings,
    mut chapter: Chapter,
) -> Result<(Chapter, Vec<AlignmentWarning>), CorpusError> {
    let sections: Vec<(usize, &str)> = chapter
        .sections
        .iter()
        .map(|s| (s.index, s.content.as_str()))
        .collect();
    let questions: Vec<&str> = chapter
        .exam
        .questions
        .iter()
        .map(|q| q.text.as_str())
        .collect();
    let req = settings.request(prompts::alignment(&sections, &questions));
    let mapping = retry_parse(gateway, &req, PARSE_ATTEMPTS, |c| {
        match parse_alignment(&c.text) {
            Ok(m) => Attempt::Done(m),
            Err(e) => Attempt::Retry(e),
        }
    })?
    .map_err(|e| CorpusError::Annotation(format!("{}: alignment: {e}", chapter.id)))?;

    let valid: Vec<usize> = chapter.sections.iter().map(|s| s.index).collect();
    let mut warnings = Vec::new();
    for (i, q) in chapter.exam.questions.iter_mut().enumerate() {
        let mut aligned = Vec::new();
        for &s in mapping.get(&(i + 1)).map(Vec::as_slice).unwrap_or(&[]) {
            match usize::try_from(s).ok().filter(|s| valid.contains(s)) {
                Some(s) if !aligned.contains(&s) => aligned.push(s),
                Some(_) => {}
                None => {
                    log::warn!(
                        "{}: question {} aligned to missing section {s}",
                        chapter.id,
                        q.id
                    );
                    warnings.push(AlignmentWarning {
                        chapter_id: chapter.id.clone(),
                        question_id: q.id.clone(),
                        section: s,
                    });
                }
            }
        }
        aligned.sort_unstable();
        q.aligned_sections = aligned;
    }
    Ok((chapter, warnings))
}
