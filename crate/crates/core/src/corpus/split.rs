use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::domain::{Chapter, Split, Subject};

pub const TRAIN_CHAPTERS: usize = 20;
pub const TEST_CHAPTERS: usize = 5;

/// Assigns splits per subject in curriculum order: the first `train`
/// chapters train, the next `test` test, the rest stay unassigned.
/// Output is sorted by subject then ordinal.
pub fn split_train_test(
    chapters: Vec<Chapter>,
    train: usize,
    test: usize,
) -> Result<Vec<Chapter>, CorpusError> {
    let mut by_subject: BTreeMap<String, Vec<Chapter>> = BTreeMap::new();
    for c in chapters {
        by_subject
            .entry(c.subject.name().to_string())
            .or_default()
            .push(c);
    }
    let mut out = Vec::new();
    for (subject, mut group) in by_subject {
        if group.len() < train + test {
            return Err(CorpusError::Split {
                subject,
                count: group.len(),
                required: train + test,
            });
        }
        group.sort_by(|a, b| a.ordinal.cmp(&b.ordinal).then_with(|| a.id.cmp(&b.id)));
        for (i, mut c) in group.into_iter().enumerate() {
            c.split = if i < train {
                Split::Train
            } else if i < train + test {
                Split::Test
            } else {
                Split::Unassigned
            };
            out.push(c);
        }
    }
    Ok(out)
}

/// One row of the corpus statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub subject: Subject,
    pub split: Split,
    pub chapter_count: usize,
    pub mean_exam_per_chapter: f64,
    pub pct_with_reference_answer: f64,
    pub mean_sections_per_chapter: f64,
    /// Population variance of section lengths in characters.
    pub section_length_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CorpusStats {
    pub rows: Vec<StatsRow>,
}

fn split_order(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Test => 1,
        Split::Unassigned => 2,
    }
}

fn split_label(s: Split) -> &'static str {
    match s {
        Split::Train => "Train",
        Split::Test => "Test",
        Split::Unassigned => "Unassigned",
    }
}

/// Per (subject, split) means. Splits without chapters produce no row.
pub fn corpus_stats(chapters: &[Chapter]) -> CorpusStats {
    let mut groups: BTreeMap<(String, u8), Vec<&Chapter>> = BTreeMap::new();
    for c in chapters {
        groups
            .entry((c.subject.name().to_string(), split_order(c.split)))
            .or_default()
            .push(c);
    }
    let rows = groups
        .into_values()
        .map(|group| {
            let n = group.len() as f64;
            let questions: usize = group.iter().map(|c| c.exam.len()).sum();
            let answered = group
                .iter()
                .flat_map(|c| &c.exam.questions)
                .filter(|q| q.reference_answer.is_some())
                .count();
            let lengths: Vec<f64> = group
                .iter()
                .flat_map(|c| &c.sections)
                .map(|s| s.content.chars().count() as f64)
                .collect();
            StatsRow {
                subject: group[0].subject.clone(),
                split: group[0].split,
                chapter_count: group.len(),
                mean_exam_per_chapter: questions as f64 / n,
                pct_with_reference_answer: if questions == 0 {
                    0.0
                } else {
                    100.0 * answered as f64 / questions as f64
                },
                mean_sections_per_chapter: lengths.len() as f64 / n,
                section_length_variance: variance(&lengths),
            }
        })
        .collect();
    CorpusStats { rows }
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

impl CorpusStats {
    /// CSV with the columns Subject, #C, Split, #E/C, %E w/ answer, #S/C.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Subject,#C,Split,#E/C,%E w/ answer,#S/C\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.1},{:.0}%,{:.1}\n",
                r.subject.display_name(),
                r.chapter_count,
                split_label(r.split),
                r.mean_exam_per_chapter,
                r.pct_with_reference_answer,
                r.mean_sections_per_chapter
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Exam, ExamQuestion, Section};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn chapter(subject: Subject, ordinal: u32, questions: usize, answered: usize) -> Chapter {
        Chapter {
            id: format!("{}-{ordinal:02}", subject.name()),
            subject,
            title: "t".into(),
            ordinal,
            sections: vec![Section {
                index: 1,
                content: "abcd".into(),
            }],
            exam: Exam {
                questions: (0..questions)
                    .map(|i| ExamQuestion {
                        id: format!("q{i}"),
                        text: "q".into(),
                        reference_answer: (i < answered).then(|| "a".to_string()),
                        bloom: None,
                        aligned_sections: vec![],
                    })
                    .collect(),
            },
            split: Split::Unassigned,
        }
    }

    fn many(n: u32) -> Vec<Chapter> {
        (1..=n)
            .map(|o| chapter(Subject::Economics, o, 10, 0))
            .collect()
    }

    fn counts(cs: &[Chapter]) -> (usize, usize, usize) {
        let c = |s| cs.iter().filter(|c| c.split == s).count();
        (c(Split::Train), c(Split::Test), c(Split::Unassigned))
    }

    #[test]
    fn split_boundaries() {
        let s = split_train_test(many(25), 20, 5).unwrap();
        assert_eq!(counts(&s), (20, 5, 0));
        assert!(s[..20]
            .iter()
            .all(|c| c.split == Split::Train && c.ordinal <= 20));
        let s = split_train_test(many(27), 20, 5).unwrap();
        assert_eq!(counts(&s), (20, 5, 2));
        match split_train_test(many(24), 20, 5) {
            Err(CorpusError::Split { subject, count, .. }) => {
                assert_eq!((subject.as_str(), count), ("Economics", 24))
            }
            other => panic!("expected split error, got {other:?}"),
        }
    }

    #[test]
    fn stats_means_and_percentages() {
        let mut a = chapter(Subject::Microbiology, 1, 10, 4);
        let mut b = chapter(Subject::Microbiology, 2, 14, 0);
        a.split = Split::Train;
        b.split = Split::Train;
        let stats = corpus_stats(&[a, b]);
        assert_eq!(stats.rows.len(), 1);
        let r = &stats.rows[0];
        assert_eq!(r.mean_exam_per_chapter, 12.0);
        assert!((r.pct_with_reference_answer - 100.0 * 4.0 / 24.0).abs() < 1e-12);
        assert_eq!(r.mean_sections_per_chapter, 1.0);
        assert!(stats.to_csv().contains("Microbiology,2,Train,12.0,17%,1.0"));

        let one = corpus_stats(&[chapter(Subject::Chemistry, 1, 10, 4)]);
        assert_eq!(one.rows[0].pct_with_reference_answer, 40.0);
        assert!(corpus_stats(&[]).rows.is_empty());
    }

    proptest! {
        #[test]
        fn split_depends_only_on_ordering(seed in any::<u64>(), n in 25u32..32) {
            let base = split_train_test(many(n), 20, 5).unwrap();
            let mut shuffled = many(n);
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(split_train_test(shuffled, 20, 5).unwrap(), base);
        }
    }
}
