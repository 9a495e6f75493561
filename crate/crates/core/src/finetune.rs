//! Utility-threshold filtering and fine-tune dataset export.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::UtilityRecord;
use crate::forge::GeneratedPair;
use crate::lm::{HttpTransport, LmError, Message};
use crate::prompts::GENERATOR_SYSTEM;

pub const DEFAULT_THETA: f64 = 0.1;
pub const DEFAULT_SWEEP: [f64; 5] = [0.0, 0.05, 0.1, 0.15, 0.2];

#[derive(Debug, Error)]
pub enum FineTuneError {
    #[error("threshold must be finite, got {0}")]
    InvalidTheta(f64),
    #[error("no accepted pairs; refusing to write an empty dataset")]
    EmptyDataset,
    #[error("accepted pair {0} has no generated question")]
    MissingPair(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub theta: f64,
    /// Accepted ids, sorted.
    pub accepted: Vec<String>,
    pub rejected: usize,
}

/// Keeps every record with `utility >= theta`.
pub fn filter_by_utility(
    records: &[UtilityRecord],
    theta: f64,
) -> Result<FilterOutcome, FineTuneError> {
    if !theta.is_finite() {
        return Err(FineTuneError::InvalidTheta(theta));
    }
    let accepted: BTreeSet<String> = records
        .iter()
        .filter(|r| r.utility >= theta)
        .map(|r| r.qa_id.clone())
        .collect();
    let rejected = records.len() - records.iter().filter(|r| r.utility >= theta).count();
    log::info!(
        "theta {theta}: accepted {}, rejected {rejected}",
        accepted.len()
    );
    Ok(FilterOutcome {
        theta,
        accepted: accepted.into_iter().collect(),
        rejected,
    })
}

/// One outcome per threshold, in the order given.
pub fn threshold_sweep(
    records: &[UtilityRecord],
    thetas: &[f64],
) -> Result<Vec<FilterOutcome>, FineTuneError> {
    thetas
        .iter()
        .map(|&t| filter_by_utility(records, t))
        .collect()
}

/// CSV of dataset size against threshold.
pub fn sweep_csv(sweep: &[FilterOutcome]) -> String {
    let mut out = String::from("theta,accepted,rejected\n");
    for o in sweep {
        out.push_str(&format!(
            "{},{},{}\n",
            o.theta,
            o.accepted.len(),
            o.rejected
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneExample {
    pub messages: Vec<Message>,
}

impl FineTuneExample {
    pub fn from_pair(p: &GeneratedPair) -> Self {
        FineTuneExample {
            messages: vec![
                Message::system(GENERATOR_SYSTEM),
                Message::user(p.prompt.clone()),
                Message::assistant(p.pair.question.clone()),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportMode {
    /// One file per subject.
    Subject,
    /// All subjects in one file.
    Cross,
}

impl ExportMode {
    pub fn label(self) -> &'static str {
        match self {
            ExportMode::Subject => "subject",
            ExportMode::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "subject" => Some(ExportMode::Subject),
            "cross" => Some(ExportMode::Cross),
            _ => None,
        }
    }
}

/// Examples for the accepted ids, ordered by chapter ordinal, anchor
/// section and pair id. Every accepted id must have a generated pair.
pub fn build_examples(
    pairs: &[GeneratedPair],
    accepted: &[String],
) -> Result<Vec<FineTuneExample>, FineTuneError> {
    let by_id: BTreeMap<&str, &GeneratedPair> =
        pairs.iter().map(|p| (p.pair.id.as_str(), p)).collect();
    let mut chosen = accepted
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| FineTuneError::MissingPair(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    chosen.sort_by(|a, b| {
        (a.ordinal, a.pair.anchor_section, &a.chapter_id, &a.pair.id).cmp(&(
            b.ordinal,
            b.pair.anchor_section,
            &b.chapter_id,
            &b.pair.id,
        ))
    });
    chosen.dedup_by(|a, b| a.pair.id == b.pair.id);
    Ok(chosen.into_iter().map(FineTuneExample::from_pair).collect())
}

pub fn render_jsonl(examples: &[FineTuneExample]) -> Result<String, FineTuneError> {
    if examples.is_empty() {
        return Err(FineTuneError::EmptyDataset);
    }
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e).expect("example serializes"));
        out.push('\n');
    }
    Ok(out)
}

/// Writes the JSONL file and returns its sha256.
pub fn emit_finetune_jsonl(
    examples: &[FineTuneExample],
    path: &Path,
) -> Result<String, FineTuneError> {
    let body = render_jsonl(examples)?;
    let io = |source| FineTuneError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, &body).map_err(io)?;
    Ok(crate::domain::sha256_hex(body.as_bytes()))
}

/// Groups pairs into named datasets: one per subject, or a single "all".
/// `subject_of` maps a chapter id to its subject name.
pub fn partition(
    mode: ExportMode,
    pairs: &[GeneratedPair],
    subject_of: impl Fn(&str) -> String,
) -> BTreeMap<String, Vec<GeneratedPair>> {
    let mut out: BTreeMap<String, Vec<GeneratedPair>> = BTreeMap::new();
    for p in pairs {
        let key = match mode {
            ExportMode::Cross => "all".to_string(),
            ExportMode::Subject => subject_of(&p.chapter_id),
        };
        out.entry(key).or_default().push(p.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneJob {
    pub file_id: String,
    pub job_id: String,
}

/// Uploads the file and creates a job without waiting on it.
pub fn submit_finetune(
    transport: &HttpTransport,
    filename: &str,
    bytes: &[u8],
    base_model: &str,
) -> Result<FineTuneJob, LmError> {
    let file = transport.post_file(
        "/files",
        &[("purpose", "fine-tune")],
        "file",
        filename,
        bytes,
    )?;
    let file_id = string_field(&file, "id")?;
    let job = transport.post_json(
        "/fine_tuning/jobs",
        &serde_json::json!({"training_file": file_id, "model": base_model}),
    )?;
    Ok(FineTuneJob {
        file_id,
        job_id: string_field(&job, "id")?,
    })
}

fn string_field(v: &serde_json::Value, key: &str) -> Result<String, LmError> {
    v.get(key)
        .and_then(|x| x.as_str())
        .map(str::to_string)
        .ok_or_else(|| LmError::Fatal(format!("response lacks \"{key}\": {v}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Provenance, QAPair, Strategy};
    use crate::lm::http::tests::serve;
    use crate::lm::Role;
    use proptest::prelude::*;
    use std::time::Duration;

    fn rec(id: &str, u: f64) -> UtilityRecord {
        UtilityRecord::new(id.into(), 0.0, u, u, 0.0)
    }

    fn gen(chapter: &str, ordinal: u32, anchor: usize, q: &str) -> GeneratedPair {
        let prov = Provenance {
            strategy: Strategy::ZeroShot,
            model_id: "m".into(),
            trial: 0,
            seed: 0,
            bloom_level: None,
        };
        GeneratedPair {
            chapter_id: chapter.into(),
            ordinal,
            pair: QAPair::new(chapter, q.into(), format!("answer to {q}"), anchor, prov),
            prompt: format!("prompt for {q}"),
        }
    }

    #[test]
    fn inclusive_boundary() {
        let rs = [rec("a", 0.05), rec("b", 0.1), rec("c", 0.3)];
        let out = filter_by_utility(&rs, 0.1).unwrap();
        assert_eq!(out.accepted, vec!["b", "c"]);
        assert_eq!(out.rejected, 1);
        assert_eq!(filter_by_utility(&rs, 0.0).unwrap().accepted.len(), 3);
        assert!(matches!(
            filter_by_utility(&rs, f64::NAN),
            Err(FineTuneError::InvalidTheta(_))
        ));
    }

    #[test]
    fn sweep_csv_shape() {
        let rs = [rec("a", 0.05), rec("b", 0.1), rec("c", 0.3)];
        let sweep = threshold_sweep(&rs, &DEFAULT_SWEEP).unwrap();
        assert_eq!(
            sweep_csv(&sweep),
            "theta,accepted,rejected\n0,3,0\n0.05,3,0\n0.1,2,1\n0.15,1,2\n0.2,1,2\n"
        );
    }

    #[test]
    fn examples_carry_prompt_and_question_only() {
        let ps = vec![
            gen("c2", 2, 1, "later"),
            gen("c1", 1, 3, "x3"),
            gen("c1", 1, 1, "x1"),
        ];
        let ids: Vec<String> = ps.iter().map(|p| p.pair.id.clone()).collect();
        let ex = build_examples(&ps, &ids).unwrap();
        let qs: Vec<&str> = ex.iter().map(|e| e.messages[2].content.as_str()).collect();
        assert_eq!(qs, ["x1", "x3", "later"]);
        let m = &ex[0].messages;
        assert_eq!(m[0].role, Role::System);
        assert_eq!(m[1].content, "prompt for x1");
        assert!(!m[2].content.contains("answer to"));
    }

    #[test]
    fn unknown_id_is_an_error() {
        let ps = vec![gen("c1", 1, 1, "x1")];
        assert!(matches!(
            build_examples(&ps, &["nope".into()]),
            Err(FineTuneError::MissingPair(_))
        ));
    }

    #[test]
    fn jsonl_round_trip_and_empty() {
        let ps = vec![gen("c1", 1, 1, "x1"), gen("c1", 1, 2, "x2")];
        let ids: Vec<String> = ps.iter().map(|p| p.pair.id.clone()).collect();
        let text = render_jsonl(&build_examples(&ps, &ids).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 2);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["messages"][2]["role"], "assistant");
            let e: FineTuneExample = serde_json::from_str(line).unwrap();
            assert_eq!(serde_json::to_string(&e).unwrap(), line);
        }
        assert!(matches!(
            render_jsonl(&[]),
            Err(FineTuneError::EmptyDataset)
        ));
    }

    #[test]
    fn emit_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ps = vec![gen("c1", 1, 1, "x1")];
        let ex = build_examples(&ps, &[ps[0].pair.id.clone()]).unwrap();
        let a = emit_finetune_jsonl(&ex, &dir.path().join("a/x.jsonl")).unwrap();
        let b = emit_finetune_jsonl(&ex, &dir.path().join("b/x.jsonl")).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            std::fs::read(dir.path().join("a/x.jsonl")).unwrap(),
            std::fs::read(dir.path().join("b/x.jsonl")).unwrap()
        );
    }

    #[test]
    fn partition_modes() {
        let ps = vec![
            gen("bio-1", 1, 1, "a"),
            gen("eco-1", 1, 1, "b"),
            gen("bio-2", 2, 1, "c"),
        ];
        let subj = |c: &str| c.split('-').next().unwrap().to_string();
        let s = partition(ExportMode::Subject, &ps, subj);
        assert_eq!(s.keys().collect::<Vec<_>>(), ["bio", "eco"]);
        assert_eq!(s["bio"].len(), 2);
        let c = partition(ExportMode::Cross, &ps, subj);
        assert_eq!(c["all"].len(), 3);
    }

    #[test]
    fn submit_records_job_id() {
        let (url, handle) = serve(vec![
            (200, r#"{"id":"file-9"}"#.into()),
            (200, r#"{"id":"ft-123","status":"queued"}"#.into()),
        ]);
        let t = HttpTransport::new(&url, "k", Duration::from_secs(5));
        let job = submit_finetune(&t, "d.jsonl", b"{}\n", "base").unwrap();
        assert_eq!(job.job_id, "ft-123");
        assert_eq!(job.file_id, "file-9");
        let seen = handle.join().unwrap();
        assert!(seen[0].contains("fine-tune"));
        assert!(seen[1].contains("\"training_file\":\"file-9\""));
    }

    #[test]
    fn submit_surfaces_provider_error() {
        let (url, handle) = serve(vec![(400, r#"{"error":{"message":"bad file"}}"#.into())]);
        let t = HttpTransport::new(&url, "k", Duration::from_secs(5));
        let err = submit_finetune(&t, "d.jsonl", b"{}\n", "base").unwrap_err();
        assert!(
            matches!(err, LmError::Fatal(ref m) if m.contains("bad file")),
            "{err:?}"
        );
        handle.join().unwrap();
    }

    proptest! {
        #[test]
        fn accept_sets_shrink(us in proptest::collection::vec(-1.0f64..1.0, 0..40), t1 in -1.0f64..1.0, dt in 0.0f64..1.0) {
            let rs: Vec<_> = us.iter().enumerate().map(|(i, &u)| rec(&format!("p{i}"), u)).collect();
            let lo = filter_by_utility(&rs, t1).unwrap();
            let hi = filter_by_utility(&rs, t1 + dt).unwrap();
            let lo: BTreeSet<_> = lo.accepted.into_iter().collect();
            prop_assert!(hi.accepted.iter().all(|id| lo.contains(id)));
            prop_assert_eq!(hi.accepted.len() + hi.rejected, rs.len());
        }
    }
}
