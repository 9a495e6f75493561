//! Synthetic corpus and matching mock script for exercising the pipeline
//! without a live model.
//!
//! Every chapter gets a tag such as `MIC03`. Section `s` mentions the
//! keyword `KWMIC03S<s>Z` and the marker `SECMARK-MIC03-<s>`; exam question
//! `i` asks about the keyword of section `((i - 1) mod sections) + 1`. The
//! script answers curation, generation, answer and metric prompts by those
//! markers and attaches a keyword learner, so exam scores depend only on
//! which section keywords the studied questions mention.

use std::fs;
use std::io;
use std::path::Path;

use serde_json::{json, Value};

use crate::domain::{Bloom, Subject};
use crate::lm::{KeywordLearner, Matcher, MockRule, MockScript, TokenDistribution};
use crate::prompts::{ALIGN_MARK, ANSWER_MARK, BLOOM_MARK, EIG_MARK, SALIENCE_MARK, SEGMENT_MARK};

pub const SUBJECTS: [Subject; 5] = [
    Subject::Microbiology,
    Subject::Chemistry,
    Subject::Economics,
    Subject::Sociology,
    Subject::USHistory,
];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub subjects: usize,
    pub chapters_per_subject: u32,
    pub sections_per_chapter: usize,
    pub exam_questions: usize,
    /// (subject index, ordinal, exam question count) overrides.
    pub exam_overrides: Vec<(usize, u32, usize)>,
    /// Sections whose generated question names no keyword, so it carries
    /// no utility under the keyword learner.
    pub vague_every: usize,
}

impl FixtureSpec {
    pub fn new(subjects: usize, chapters_per_subject: u32) -> Self {
        FixtureSpec {
            subjects: subjects.min(SUBJECTS.len()),
            chapters_per_subject,
            sections_per_chapter: 3,
            exam_questions: 10,
            exam_overrides: Vec::new(),
            vague_every: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureChapter {
    pub subject: Subject,
    pub ordinal: u32,
    pub tag: String,
    pub chapter_id: String,
    pub sections: Vec<String>,
    /// (question text, reference answer).
    pub exam: Vec<(String, Option<String>)>,
}

impl FixtureChapter {
    pub fn keyword(&self, section: usize) -> String {
        format!("KW{}S{section}Z", self.tag)
    }

    fn dir_name(&self) -> String {
        format!("{:02}_chapter-{}", self.ordinal, self.ordinal)
    }

    fn generated_question(&self, section: usize, vague_every: usize) -> String {
        if vague_every > 0 && section.is_multiple_of(vague_every) {
            format!(
                "What else is covered in part {section} of unit {}?",
                self.tag
            )
        } else {
            format!(
                "Why does {} matter in unit {}?",
                self.keyword(section),
                self.tag
            )
        }
    }

    pub fn answer(&self, i: usize) -> String {
        format!("Answer {i} for unit {}: ANS-{}-{i}", self.tag, self.tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub chapters: Vec<FixtureChapter>,
}

impl Fixture {
    pub fn build(spec: FixtureSpec) -> Fixture {
        let mut chapters = Vec::new();
        for (si, subject) in SUBJECTS.iter().take(spec.subjects).enumerate() {
            let prefix: String = subject
                .name()
                .chars()
                .take(3)
                .collect::<String>()
                .to_uppercase();
            for ordinal in 1..=spec.chapters_per_subject {
                let tag = format!("{prefix}{ordinal:02}");
                let n_q = spec
                    .exam_overrides
                    .iter()
                    .find(|(s, o, _)| *s == si && *o == ordinal)
                    .map_or(spec.exam_questions, |o| o.2);
                let sections = (1..=spec.sections_per_chapter)
                    .map(|s| {
                        format!(
                            "Part {s} of unit {tag} (SECMARK-{tag}-{s}) explains KW{tag}S{s}Z with a worked case."
                        )
                    })
                    .collect();
                let exam = (1..=n_q)
                    .map(|i| {
                        let s = (i - 1) % spec.sections_per_chapter + 1;
                        let text = format!("Exam {tag} item {i}: what does KW{tag}S{s}Z describe?");
                        let answer = (i % 3 == 1).then(|| format!("It describes part {s}."));
                        (text, answer)
                    })
                    .collect();
                chapters.push(FixtureChapter {
                    subject: subject.clone(),
                    ordinal,
                    chapter_id: format!(
                        "{}-{ordinal:02}-chapter-{ordinal}",
                        subject.name().to_lowercase()
                    ),
                    tag,
                    sections,
                    exam,
                });
            }
        }
        Fixture { spec, chapters }
    }

    pub fn keywords(&self) -> Vec<String> {
        self.chapters
            .iter()
            .flat_map(|c| (1..=c.sections.len()).map(move |s| c.keyword(s)))
            .collect()
    }

    /// Chapters that survive the exam-size rule.
    pub fn accepted_chapters(&self) -> impl Iterator<Item = &FixtureChapter> {
        self.chapters
            .iter()
            .filter(|c| c.exam.len() >= crate::domain::MIN_EXAM_QUESTIONS)
    }

    /// Writes `<dir>/<Subject>/<NN>_<slug>/{body,exam}.md` and one
    /// `fewshot.json` per subject.
    pub fn write_corpus(&self, dir: &Path) -> io::Result<()> {
        for subject in SUBJECTS.iter().take(self.spec.subjects) {
            let sdir = dir.join(subject.name());
            fs::create_dir_all(&sdir)?;
            let example = json!({
                "input": "# Sample\n\nA short sample text about a sample topic.",
                "output": {"section": {"1": {"content": "A short sample text about a sample topic."}}}
            });
            fs::write(
                sdir.join("fewshot.json"),
                serde_json::to_string_pretty(&example)?,
            )?;
        }
        for c in &self.chapters {
            let cdir = dir.join(c.subject.name()).join(c.dir_name());
            fs::create_dir_all(&cdir)?;
            let mut body = format!("# Unit {}\n\n", c.tag);
            for (i, s) in c.sections.iter().enumerate() {
                body.push_str(&format!("## Part {}\n\n{s}\n\n", i + 1));
            }
            fs::write(cdir.join("body.md"), body)?;
            let mut exam = String::from("## Review Questions\n\n");
            for (i, (q, a)) in c.exam.iter().enumerate() {
                exam.push_str(&format!("{}. {q}\n", i + 1));
                if let Some(a) = a {
                    exam.push_str(&format!("Answer: {a}\n"));
                }
                exam.push('\n');
            }
            fs::write(cdir.join("exam.md"), exam)?;
        }
        Ok(())
    }

    pub fn mock_script(&self) -> MockScript {
        let mut rules = Vec::new();
        let contains =
            |parts: &[&str]| Matcher::contains_all(parts.iter().map(|s| s.to_string()).collect());
        let labels = |n: usize| -> Value {
            json!({"bloom_categories": (0..n)
                .map(|i| json!({"question": i + 1, "bloom_category": Bloom::ALL[i % 6].name()}))
                .collect::<Vec<_>>()})
        };
        let vague = self.spec.vague_every;
        for c in &self.chapters {
            let first = format!("SECMARK-{}-1", c.tag);
            let sections: serde_json::Map<String, Value> = c
                .sections
                .iter()
                .enumerate()
                .map(|(i, s)| ((i + 1).to_string(), json!({"content": s})))
                .collect();
            rules.push(MockRule::new(
                contains(&[SEGMENT_MARK, &first]),
                json!({"section": sections}).to_string(),
            ));
            let kept = c.exam.len().min(crate::domain::MAX_EXAM_QUESTIONS);
            rules.push(MockRule::new(
                contains(&[BLOOM_MARK, &format!("Exam {} item", c.tag)]),
                labels(kept).to_string(),
            ));
            let alignments: Vec<Value> = (1..=kept)
                .map(|i| json!({"question": i, "sections": [(i - 1) % c.sections.len() + 1]}))
                .collect();
            rules.push(MockRule::new(
                contains(&[ALIGN_MARK, &first]),
                json!({ "alignments": alignments }).to_string(),
            ));
            // Descending so the rule for the anchor wins over earlier sections
            // that also appear in the context.
            for (i, s) in c.sections.iter().enumerate().rev() {
                let n = i + 1;
                let next = format!("Further reading on NEXT-{}-{n}.", c.tag);
                let question = json!({
                    "reasoning": "The part introduces one term.",
                    "question": c.generated_question(n, vague),
                })
                .to_string();
                rules.push(MockRule::new(
                    contains(&[&format!("Next paragraph: {next}")]),
                    question.clone(),
                ));
                rules.push(MockRule::new(
                    contains(&[&format!("reading the section: {s}.")]),
                    question,
                ));
                rules.push(MockRule::new(
                    contains(&[
                        "to generate the next paragraph",
                        &format!("SECMARK-{}-{n}", c.tag),
                    ]),
                    json!({ "next_paragraph": next }).to_string(),
                ));
            }
            let qa: Vec<Value> = (1..=c.sections.len())
                .map(|i| json!({"question": i, "answer": c.answer(i)}))
                .collect();
            rules.push(MockRule::new(
                contains(&[ANSWER_MARK, &format!("unit {}?", c.tag)]),
                json!({ "qa_pairs": qa }).to_string(),
            ));
        }
        rules.push(MockRule::new(
            contains(&[BLOOM_MARK]),
            labels(self.spec.sections_per_chapter).to_string(),
        ));
        for s in 1..=self.spec.sections_per_chapter {
            rules.push(MockRule::new(
                contains(&[SALIENCE_MARK, &format!("S{s}Z matter")]),
                (s % 5 + 1).to_string(),
            ));
        }
        rules.push(MockRule::new(contains(&[SALIENCE_MARK]), "2"));
        let dist = |p: &[f64]| {
            TokenDistribution::new((0..p.len()).map(|i| format!("t{i}")).collect(), p.to_vec())
                .expect("valid distribution")
        };
        let mut posterior = MockRule::new(contains(&[EIG_MARK, "Answer: "]), "t0");
        posterior.logprobs = Some(dist(&[0.9, 0.1]));
        rules.push(posterior);
        for s in 1..=self.spec.sections_per_chapter {
            let k = s % 4 + 2;
            let mut prior = MockRule::new(contains(&[EIG_MARK, &format!("S{s}Z matter")]), "t0");
            prior.logprobs = Some(dist(&vec![1.0 / k as f64; k]));
            rules.push(prior);
        }
        let mut prior = MockRule::new(contains(&[EIG_MARK]), "t0");
        prior.logprobs = Some(dist(&[0.7, 0.2, 0.1]));
        rules.push(prior);
        rules.push(MockRule::new(Matcher::Default, "{}"));
        let mut script = MockScript::new(rules);
        script.keyword_learner = Some(KeywordLearner::new(self.keywords()));
        script
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ingest, read_corpus, CurationSettings};
    use crate::lm::{CallSettings, Gateway, MockBackend};
    use std::sync::Arc;

    #[test]
    fn fixture_corpus_ingests() {
        let mut spec = FixtureSpec::new(2, 4);
        spec.exam_overrides = vec![(0, 2, 9), (1, 3, 30)];
        let fx = Fixture::build(spec);
        let dir = tempfile::tempdir().unwrap();
        fx.write_corpus(dir.path()).unwrap();
        let input = read_corpus(dir.path()).unwrap();
        assert_eq!(input.chapters.len(), 8);
        let gw = Gateway::in_memory(Arc::new(MockBackend::new(fx.mock_script()).unwrap()));
        let cs = CallSettings::new("m", 0.0, 0);
        let settings = CurationSettings {
            segmenter: cs.clone(),
            classifier: cs.clone(),
            aligner: cs,
        };
        let out = ingest(&gw, &settings, &input, Some((2, 1))).unwrap();
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].chapter_id, "microbiology-02-chapter-2");
        assert_eq!(out.chapters.len(), 7);
        let big = out
            .chapters
            .iter()
            .find(|c| c.id == "chemistry-03-chapter-3")
            .unwrap();
        assert_eq!(big.exam.len(), 25);
        for c in &out.chapters {
            assert_eq!(c.sections.len(), 3);
            assert!(c.exam.questions.iter().all(|q| q.bloom.is_some()));
            assert!(c
                .exam
                .questions
                .iter()
                .all(|q| q.aligned_sections.len() == 1));
        }
        assert!(out.warnings.is_empty());
    }
}
