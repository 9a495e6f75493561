//! Prompt templates for every model role.
//!
//! Templates are plain `format!` renders so that a rendered prompt is a pure
//! function of its inputs; fine-tune export relies on that byte-stability.

use crate::domain::{Bloom, ExamQuestion, QAPair};

/// Literal a learner must give for material it has not studied.
pub const REFUSAL: &str = "I don't know. I have not been studied on this.";

pub const LEARNING_MATERIALS_OPEN: &str = "[LEARNING MATERIALS]";
pub const LEARNING_MATERIALS_CLOSE: &str = "[/LEARNING MATERIALS]";
pub const EXAM_OPEN: &str = "[EXAM]";
pub const EXAM_CLOSE: &str = "[/EXAM]";

pub const EVALUATOR_PREAMBLE: &str =
    "You are a teacher who is evaluating a student's understanding of a document.";
pub const EVALUATOR_QUESTION_MARK: &str = "question: \n";
pub const EVALUATOR_TRUTH_MARK: &str = "\n\nground truth: \n";
pub const EVALUATOR_ANSWER_MARK: &str = "\n\nstudent's answer: \n";
pub const EVALUATOR_TAIL_MARK: &str = "\n\nPlease provide a score between 0 and 1";

pub const SEGMENT_MARK: &str =
    "Instructions for extracting sections from the given textbook content:";
pub const BLOOM_MARK: &str =
    "Classify the questions into one of the six main categories of Bloom's";
pub const ALIGN_MARK: &str = "Map each exam question to the sections of the document";
pub const QUESTION_MARK: &str = "Generate a question that helps the student";
pub const ANSWER_MARK: &str = "Answer each question shortly";
pub const SALIENCE_MARK: &str = "Imagine you are a curious reader going through the article.";
pub const EIG_MARK: &str = "Imagine you are a reader encountering a question in the article.";

/// System turn of generator fine-tuning examples.
pub const GENERATOR_SYSTEM: &str =
    "You write one question that helps a student understand the section they are reading.";

pub fn question_zero_shot(preceding: &str, anchor: &str) -> String {
    format!(
        "Article: {preceding}
Student is currently reading the section: {anchor}.

Generate a question that helps the student
understand the section better.

Output in the following JSON format:
```json
{{
    \"question\": question
}}
```"
    )
}

/// Zero-shot prompt preceded by (section, exam question) exemplars.
pub fn question_few_shot(exemplars: &[(String, String)], preceding: &str, anchor: &str) -> String {
    let mut out = String::from(
        "Here are examples of textbook sections paired with exam questions that test them:\n\n",
    );
    for (i, (section, question)) in exemplars.iter().enumerate() {
        out.push_str(&format!(
            "Example {}:\nSection: {section}\nQuestion: {question}\n\n",
            i + 1
        ));
    }
    out.push_str(&question_zero_shot(preceding, anchor));
    out
}

pub fn question_cot(preceding: &str, anchor: &str) -> String {
    format!(
        "Article: {preceding}
Student is currently reading the section: {anchor}.

Generate a question that helps the student
understand the section better.
First reason step by step about what the student needs in order to understand
the section, then write the question.

Output in the following JSON format:
```json
{{
    \"reasoning\": reasoning,
    \"question\": question
}}
```"
    )
}

pub fn bloom_next_paragraph(level: Bloom, full_context: &str) -> String {
    format!(
        "Use the cognitive process of {}: {}
to generate the next paragraph for the following
text that will help the student understand the content better:

{full_context}

Output in the following JSON format:
{{
    \"next_paragraph\": next_paragraph
}}",
        level.name(),
        level.definition()
    )
}

pub fn bloom_bridge_question(context: &str, next_paragraph: &str) -> String {
    format!(
        "Given the input context and the next paragraph,
what is the key question that connects the two?

Input context: {context}
Next paragraph: {next_paragraph}

Output in the following JSON format:
{{
    \"question\": question
}}"
    )
}

/// Answer-generator prompt. Receives questions only, never document text.
pub fn answers(questions: &[String]) -> String {
    let list = serde_json::to_string(questions).expect("strings serialize");
    format!(
        "questions: {list}

Answer each question shortly and output
in following JSON format:
```json
{{
    \"qa_pairs\": [
        {{\"question\": question_1, \"answer\": answer_1}},
        {{\"question\": question_2, \"answer\": answer_2}},
        ...
        {{\"question\": question_n, \"answer\": answer_n}},
    ]
}}
```"
    )
}

/// Study pairs as they appear inside the learning-materials block.
pub fn render_materials(pairs: &[QAPair]) -> String {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| format!("Q{n}: {}\nA{n}: {}", p.question, p.answer, n = i + 1))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Exam questions numbered from 1.
pub fn render_exam(questions: &[ExamQuestion]) -> String {
    questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{}. {}", i + 1, q.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn learner(materials: &str, exam: &str) -> String {
    format!(
        "You are now a learner participating in a structured learning simulation.
Your task is to:

1. **Study the Provided Learning Materials:** Carefully read and understand
   the content enclosed in the [LEARNING MATERIALS] tags.

2. **Answer the Exam Questions Using Only the Learning Materials:**
   When you respond to the questions in the [EXAM], you must:
   - Base all answers solely on the information contained in the
     [LEARNING MATERIALS].
   - Clearly show how your reasoning follows from the [LEARNING MATERIALS].
   - If the question asks about something not covered in the
     [LEARNING MATERIALS], do not provide an answer or guess. Instead,
     respond exactly with:

     {REFUSAL}

   - Do not use information from outside the [LEARNING MATERIALS].

3. **No External Knowledge or Guessing:**
   Provide no additional reasoning or information if the content is not in
   the [LEARNING MATERIALS].

Let's begin.

{LEARNING_MATERIALS_OPEN}
{materials}
{LEARNING_MATERIALS_CLOSE}

Now, proceed to the exam below and answer as instructed:

{EXAM_OPEN}
{exam}
{EXAM_CLOSE}

Response answers in the following JSON format (key: Exam question number,
value: your answer):
{{
    \"1\": \"< your answer to exam question 1 >\",
    \"2\": \"< your answer to exam question 2 >\",
    ...
}}"
    )
}

pub fn evaluator(document: &str, question: &str, answer: Option<&str>, prediction: &str) -> String {
    let answer = answer.unwrap_or("None");
    format!(
        "{EVALUATOR_PREAMBLE}

Here is the document:
{document}

Now, determine the correctness of the student's answers to the following
question.

{EVALUATOR_QUESTION_MARK}{question}{EVALUATOR_TRUTH_MARK}{answer}{EVALUATOR_ANSWER_MARK}{prediction}{EVALUATOR_TAIL_MARK}, where:
- 0 indicates the student's answer is completely incorrect.
- 1 indicates the student's answer is completely correct.

If ground truth is not provided (e.g., None), determine the correctness of
the student's answer based on your own understanding of the document.

Answer in the following JSON format:

{{
    \"score\": <score>,
    \"feedback\": \"<feedback>\"
}}"
    )
}

pub fn segmentation(example_input: &str, example_output: &str, target: &str) -> String {
    format!(
        "{SEGMENT_MARK}

1. Transform markdown for equations into LaTeX and remove all other markdown
   formatting to only keep the raw content.
2. Split the content into sections of uniform length and number each section.
3. Skip the learning objectives, key concepts, and summary content.
4. Ensure that all content, except skipped parts, is covered verbatim in at
   least one of the resulting sections.

# EXAMPLE
## INPUT:
{example_input}

## OUTPUT:
{example_output}

Produce only valid JSON with the following format:
{{
    \"section\": {{
        \"1\": {{
            \"content\": \"Verbatim section 1 content from chapter\"
        }},
        ...
    }}
}}

# TARGET TEXTBOOK CONTENT:
{target}"
    )
}

pub fn bloom_classification(questions: &[&str]) -> String {
    let mut listed = String::new();
    for (i, q) in questions.iter().enumerate() {
        listed.push_str(&format!("Question {}: {q}\n", i + 1));
    }
    let mut cats = String::new();
    for (i, b) in Bloom::ALL.iter().enumerate() {
        cats.push_str(&format!("{}. {}: {}\n", i + 1, b.name(), b.definition()));
    }
    format!(
        "{BLOOM_MARK}
Taxonomy based on the cognitive processes required for answering it correctly.

Bloom's Taxonomy Categories:
{cats}
{listed}
Provide only the Bloom category and format your response in JSON with the
following structure:
{{
    \"bloom_categories\": [
        {{
            \"question\": question,
            \"bloom_category\": bloom_category
        }}
    ]
}}"
    )
}

pub fn alignment(sections: &[(usize, &str)], questions: &[&str]) -> String {
    let mut doc = String::new();
    for (idx, content) in sections {
        doc.push_str(&format!("[Section {idx}]\n{content}\n\n"));
    }
    let mut qs = String::new();
    for (i, q) in questions.iter().enumerate() {
        qs.push_str(&format!("Question {}: {q}\n", i + 1));
    }
    format!(
        "{ALIGN_MARK} that are relevant for answering it.
A question may map to several sections, or to none.

# DOCUMENT
{doc}# EXAM QUESTIONS
{qs}
Output in the following JSON format, using the section numbers above:
{{
    \"alignments\": [
        {{\"question\": 1, \"sections\": [1, 2]}},
        ...
    ]
}}"
    )
}

pub fn salience(article: &str, question: &str) -> String {
    format!(
        "Article: {article}
Question: {question}

System Instructions
{SALIENCE_MARK} You come across a question and need to determine whether it should be answered within the article or not. Your task is to assign a score based on the relevance and necessity of answering the question.

Scoring Criteria
- Score = 1: The question is completely unrelated to the article.
- Score = 2: The question is related but already answered in the article.
- Score = 3: The question is related but answering it is not essential, as it expands on a minor or non-central idea.
- Score = 4: The question is related and answering it enhances the reader's understanding of the article.
- Score = 5: The question is related and must be answered, as it expands on central ideas of the article.

Scoring Guidelines
- The score is based on the information utility of the answer.
- If a question is related but not central or necessary, do NOT assign it a high score.
- Assign Score 3 if the question is unanswered but not critical, and Score 2 if it has already been answered.
- Distinguishing Scores 4 and 5:
  - If the article would feel incomplete without the answer, assign Score 5.
  - Otherwise, assign Score 4.
- A Score of 4 is useful, but other questions may be more important.
- A Score of 5 is reserved for must-answer, central questions.
- Avoid bias toward high scores and carefully follow the instructions.

The score should strictly be an integer between 1 and 5.

Score:"
    )
}

pub fn eig_prior(article: &str, question: &str) -> String {
    format!("{EIG_MARK}\n\nArticle: {article}\n\nQuestion: {question}\n\nAnswer:")
}

pub fn eig_posterior(article: &str, question: &str, first_answer_token: &str) -> String {
    format!("{} {first_answer_token}", eig_prior(article, question))
}

/// Left-truncates `sections` (oldest first) until their joined length fits
/// `budget` bytes. Returns the surviving suffix.
pub fn truncate_left<T: AsRef<str>>(sections: &[T], budget: usize) -> &[T] {
    let mut start = 0;
    let total = |s: &[T]| -> usize {
        s.iter().map(|x| x.as_ref().len()).sum::<usize>() + 2 * s.len().saturating_sub(1)
    };
    while start < sections.len() && total(&sections[start..]) > budget {
        start += 1;
    }
    &sections[start..]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shot_contains_both_contexts() {
        let p = question_zero_shot("earlier text", "current text");
        assert!(p.starts_with("Article: earlier text\n"));
        assert!(p.contains("currently reading the section: current text."));
        assert!(p.contains("\"question\": question"));
    }

    #[test]
    fn learner_prompt_blocks() {
        let p = learner("", "1. Why?");
        assert!(p.contains("\n[LEARNING MATERIALS]\n\n[/LEARNING MATERIALS]\n"));
        assert!(p.contains("\n[EXAM]\n1. Why?\n[/EXAM]\n"));
        assert!(p.contains(REFUSAL));
    }

    #[test]
    fn evaluator_marks_delimit_fields() {
        let p = evaluator("doc", "Q?", None, "pred");
        assert!(p.contains(
            "question: \nQ?\n\nground truth: \nNone\n\nstudent's answer: \npred\n\nPlease provide"
        ));
    }

    #[test]
    fn eig_prompts_differ_only_by_token() {
        let a = eig_prior("art", "q");
        let b = eig_posterior("art", "q", "Yes");
        assert!(a.ends_with("Answer:"));
        assert_eq!(b, format!("{a} Yes"));
    }

    #[test]
    fn truncation_drops_oldest_first() {
        let s = vec!["aaaa".to_string(), "bbbb".into(), "cccc".into()];
        assert_eq!(truncate_left(&s, 100).len(), 3);
        assert_eq!(truncate_left(&s, 10), &s[1..]);
        assert_eq!(truncate_left(&s, 4), &s[2..]);
        assert!(truncate_left(&s, 1).is_empty());
    }

    #[test]
    fn answer_prompt_lists_questions_as_json() {
        let p = answers(&["What is \"x\"?".to_string()]);
        assert!(p.starts_with("questions: [\"What is \\\"x\\\"?\"]"));
    }
}
