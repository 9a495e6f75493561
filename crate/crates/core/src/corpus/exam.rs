//! End-of-chapter exam markdown.
//!
//! A question starts with `N.` or `N)` at column 0. Indented enumerated or
//! bulleted lines below it are answer options and are folded into the stem.
//! A line starting with `Answer:` (optionally bold) carries the reference
//! answer. Anything else continues the stem.

use crate::domain::{ExamQuestion, MAX_EXAM_QUESTIONS, MIN_EXAM_QUESTIONS};

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQuestion {
    pub text: String,
    pub reference_answer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChapterRejected {
    pub count: usize,
}

#[derive(Default)]
struct Draft {
    stem: Vec<String>,
    options: Vec<String>,
    answer: Option<String>,
}

impl Draft {
    fn finish(self) -> Option<ParsedQuestion> {
        let stem = strip_markdown(&self.stem.join(" "));
        if stem.is_empty() {
            return None;
        }
        let mut text = stem;
        for (i, opt) in self.options.iter().enumerate() {
            let opt = strip_markdown(opt);
            if !opt.is_empty() {
                text.push_str(&format!(" {}. {opt}", i + 1));
            }
        }
        let reference_answer = self
            .answer
            .map(|a| strip_markdown(&a))
            .filter(|a| !a.is_empty());
        Some(ParsedQuestion {
            text,
            reference_answer,
        })
    }
}

/// Splits a leading `12.` / `12)` marker off a line.
fn numbered(line: &str) -> Option<&str> {
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    if rest.is_empty() {
        return Some(rest);
    }
    rest.starts_with(char::is_whitespace)
        .then(|| rest.trim_start())
}

fn option_body(line: &str) -> Option<&str> {
    let t = line.trim_start();
    if let Some(rest) = t.strip_prefix(['-', '*', '+']) {
        if rest.starts_with(' ') {
            return Some(rest.trim_start());
        }
    }
    if let Some(rest) = numbered(t) {
        return Some(rest);
    }
    let mut chars = t.chars();
    match (chars.next(), chars.next()) {
        (Some(c), Some('.' | ')')) if c.is_ascii_alphabetic() => {
            let rest = chars.as_str();
            rest.starts_with(' ').then(|| rest.trim_start())
        }
        _ => None,
    }
}

fn answer_body(line: &str) -> Option<&str> {
    let t = line.trim().trim_start_matches(['*', '_']);
    let lower = t.to_ascii_lowercase();
    if !lower.starts_with("answer") {
        return None;
    }
    let rest = t["answer".len()..].trim_start_matches(['*', '_']);
    let rest = rest.strip_prefix(':')?;
    Some(rest.trim_start_matches(['*', '_']).trim())
}

/// Removes emphasis, inline code, heading and link markup.
pub fn strip_markdown(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '*' | '_' | '`' => {}
            '[' => {
                let mut label = String::new();
                let mut closed = false;
                for n in chars.by_ref() {
                    if n == ']' {
                        closed = true;
                        break;
                    }
                    label.push(n);
                }
                out.push_str(&label);
                if closed && chars.peek() == Some(&'(') {
                    for n in chars.by_ref() {
                        if n == ')' {
                            break;
                        }
                    }
                }
            }
            _ => out.push(c),
        }
    }
    let out = out.trim_start_matches('#');
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn parse_exam_markdown(markdown: &str) -> Vec<ParsedQuestion> {
    let mut out = Vec::new();
    let mut draft: Option<Draft> = None;
    for line in markdown.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let at_column_zero = !line.starts_with(char::is_whitespace);
        if at_column_zero {
            if let Some(stem) = numbered(line) {
                if let Some(d) = draft.take() {
                    out.extend(d.finish());
                }
                draft = Some(Draft {
                    stem: vec![stem.to_string()],
                    ..Draft::default()
                });
                continue;
            }
        }
        let Some(d) = draft.as_mut() else {
            continue;
        };
        if let Some(a) = answer_body(line) {
            d.answer = Some(a.to_string());
        } else if !at_column_zero && option_body(line).is_some() {
            d.options
                .push(option_body(line).unwrap_or_default().to_string());
        } else if line.trim_start().starts_with('#') {
            // a heading ends the current question
            out.extend(draft.take().and_then(Draft::finish));
        } else if let Some(ans) = d.answer.as_mut() {
            ans.push(' ');
            ans.push_str(line.trim());
        } else {
            d.stem.push(line.trim().to_string());
        }
    }
    if let Some(d) = draft {
        out.extend(d.finish());
    }
    out
}

/// Parses, drops ill-formatted questions and enforces the exam size bounds.
/// More than the maximum keeps the first questions in document order.
pub fn extract_exam(
    chapter_id: &str,
    markdown: &str,
) -> Result<Vec<ExamQuestion>, ChapterRejected> {
    let parsed = parse_exam_markdown(markdown);
    if parsed.len() < MIN_EXAM_QUESTIONS {
        return Err(ChapterRejected {
            count: parsed.len(),
        });
    }
    Ok(parsed
        .into_iter()
        .take(MAX_EXAM_QUESTIONS)
        .enumerate()
        .map(|(i, q)| ExamQuestion {
            id: format!("{chapter_id}-q{}", i + 1),
            text: q.text,
            reference_answer: q.reference_answer,
            bloom: None,
            aligned_sections: Vec::new(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exam(n: usize, answered: usize) -> String {
        (1..=n)
            .map(|i| {
                let mut q = format!("{i}. What is item {i}?\n");
                if i <= answered {
                    q.push_str(&format!("**Answer:** item {i}\n"));
                }
                q
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn caps_at_25_in_order() {
        let qs = extract_exam("c", &exam(30, 0)).unwrap();
        assert_eq!(qs.len(), 25);
        assert_eq!(qs[0].text, "What is item 1?");
        assert_eq!(qs[24].text, "What is item 25?");
        assert_eq!(qs[24].id, "c-q25");
    }

    #[test]
    fn rejects_short_exams() {
        assert_eq!(
            extract_exam("c", &exam(9, 0)),
            Err(ChapterRejected { count: 9 })
        );
    }

    #[test]
    fn reference_answers_are_counted() {
        let qs = extract_exam("c", &exam(10, 4)).unwrap();
        assert_eq!(qs.len(), 10);
        assert_eq!(
            qs.iter().filter(|q| q.reference_answer.is_some()).count(),
            4
        );
        assert_eq!(qs[0].reference_answer.as_deref(), Some("item 1"));
    }

    #[test]
    fn options_fold_into_stem() {
        let md =
            "1. Which is a prokaryote?\n   a. yeast\n   b. *E. coli*\n   c) amoeba\nAnswer: b\n";
        let qs = parse_exam_markdown(md);
        assert_eq!(qs.len(), 1);
        assert_eq!(
            qs[0].text,
            "Which is a prokaryote? 1. yeast 2. E. coli 3. amoeba"
        );
        assert_eq!(qs[0].reference_answer.as_deref(), Some("b"));
    }

    #[test]
    fn drops_empty_stems_and_preamble() {
        let md = "# Review Questions\nSome intro text.\n1. **  **\n2) Real question\ncontinued here\n3.\n";
        let qs = parse_exam_markdown(md);
        assert_eq!(qs.len(), 1);
        assert_eq!(qs[0].text, "Real question continued here");
    }

    #[test]
    fn markdown_is_stripped() {
        assert_eq!(
            strip_markdown("## See [Fig 1](http://x) for `code`"),
            "See Fig 1 for code"
        );
    }

    proptest! {
        #[test]
        fn curated_sizes_in_bounds(
            good in 0usize..40,
            bad in prop::collection::vec(0usize..40, 0..10),
        ) {
            let mut md = String::new();
            let mut n = 0;
            for i in 0..good {
                if bad.contains(&i) {
                    md.push_str(&format!("{}. **\n", i + 1));
                } else {
                    n += 1;
                    md.push_str(&format!("{}. Question {i}\n", i + 1));
                }
            }
            match extract_exam("c", &md) {
                Ok(qs) => {
                    prop_assert!((MIN_EXAM_QUESTIONS..=MAX_EXAM_QUESTIONS).contains(&qs.len()));
                    prop_assert_eq!(qs.len(), n.min(MAX_EXAM_QUESTIONS));
                }
                Err(r) => {
                    prop_assert!(r.count < MIN_EXAM_QUESTIONS);
                    prop_assert_eq!(r.count, n);
                }
            }
        }
    }
}
