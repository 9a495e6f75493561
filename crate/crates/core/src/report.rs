//! Plain-text tables for scores, corpus statistics and correlations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::metrics::CorrelationRow;

/// Two-decimal score followed by the signed gain over `baseline`, e.g.
/// `0.76 (+0.30)`. The gain is taken between the rounded values so the
/// printed numbers always add up.
pub fn format_gain(score: f64, baseline: f64) -> String {
    let s = round2(score);
    let gain = round2(s - round2(baseline));
    let sign = if gain < 0.0 { '-' } else { '+' };
    format!("{s:.2} ({sign}{:.2})", gain.abs())
}

fn round2(x: f64) -> f64 {
    let r = (x * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Mean exam score of one strategy on one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub subject: String,
    pub strategy: String,
    pub score: f64,
    /// Mean no-study score over the same chapters.
    pub baseline: f64,
    pub chapters: usize,
}

/// Markdown table with one row per subject: the no-study score, then each
/// strategy as `score (+gain)`.
pub fn score_table(rows: &[ScoreRow]) -> String {
    let mut subjects: BTreeMap<&str, (f64, BTreeMap<&str, &ScoreRow>)> = BTreeMap::new();
    let mut strategies: Vec<&str> = Vec::new();
    for r in rows {
        let e = subjects
            .entry(r.subject.as_str())
            .or_insert_with(|| (r.baseline, BTreeMap::new()));
        e.1.insert(r.strategy.as_str(), r);
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
    }
    strategies.sort_unstable();
    let mut out = format!("| Subject | No-study | {} |\n", strategies.join(" | "));
    out.push_str(&format!("|---|---|{}\n", "---|".repeat(strategies.len())));
    for (subject, (baseline, by)) in &subjects {
        let cells: Vec<String> = strategies
            .iter()
            .map(|s| {
                by.get(s)
                    .map_or_else(|| "-".into(), |r| format_gain(r.score, r.baseline))
            })
            .collect();
        out.push_str(&format!(
            "| {subject} | {baseline:.2} | {} |\n",
            cells.join(" | ")
        ));
    }
    out
}

pub fn correlation_table(rows: &[CorrelationRow]) -> String {
    let mut out = String::from("| Metric 1 | Metric 2 | rho | p | n |\n|---|---|---|---|---|\n");
    let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.metric1,
            r.metric2,
            cell(r.rho),
            cell(r.p),
            r.n
        ));
    }
    out
}
