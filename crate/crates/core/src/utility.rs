//! Per-pair utility from two perturbations of the full study set.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Chapter, QAPair, UtilityRecord};
use crate::lm::Gateway;
use crate::simulator::{simulate, SimError, SimSettings, SimulationOutcome, StudySet};

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("cannot plan perturbations for an empty pair list")]
    EmptyStudySet,
    #[error(transparent)]
    InvalidPairs(SimError),
    #[error("{condition}: {source}")]
    Simulation {
        condition: String,
        #[source]
        source: SimError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// The empty set, the full set and every all-but-one set.
    LeaveOut,
    /// One-pair sets.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPlan {
    pub qa_id: String,
    pub single: StudySet,
    pub all_but_one: StudySet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub empty: StudySet,
    pub full: StudySet,
    pub per_pair: Vec<PairPlan>,
}

/// A distinct simulation condition of a plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition<'a> {
    pub family: Family,
    pub set: &'a StudySet,
}

impl Condition<'_> {
    fn key(&self) -> (Family, String) {
        (self.family, self.set.id.clone())
    }
}

pub fn plan_perturbations(pairs: &[QAPair]) -> Result<PerturbationPlan, UtilityError> {
    if pairs.is_empty() {
        return Err(UtilityError::EmptyStudySet);
    }
    let full = StudySet::new(pairs.to_vec()).map_err(UtilityError::InvalidPairs)?;
    let per_pair = pairs
        .iter()
        .map(|p| {
            let rest: Vec<QAPair> = pairs.iter().filter(|q| q.id != p.id).cloned().collect();
            Ok(PairPlan {
                qa_id: p.id.clone(),
                single: StudySet::new(vec![p.clone()]).map_err(UtilityError::InvalidPairs)?,
                all_but_one: StudySet::new(rest).map_err(UtilityError::InvalidPairs)?,
            })
        })
        .collect::<Result<_, UtilityError>>()?;
    Ok(PerturbationPlan {
        empty: StudySet::empty(),
        full,
        per_pair,
    })
}

impl PerturbationPlan {
    /// Conditions to simulate. Leave-out conditions are deduplicated among
    /// themselves by study-set id, and so are single-pair conditions; with
    /// one pair the all-but-one set is the empty set, giving three
    /// conditions, and with n pairs there are 2n + 2. A single-pair set whose
    /// content matches a leave-out set yields the same learner prompt, so
    /// the response cache serves it without another model call.
    pub fn conditions(&self) -> Vec<Condition<'_>> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        let candidates = [
            Condition {
                family: Family::LeaveOut,
                set: &self.empty,
            },
            Condition {
                family: Family::LeaveOut,
                set: &self.full,
            },
        ]
        .into_iter()
        .chain(self.per_pair.iter().flat_map(|p| {
            [
                Condition {
                    family: Family::Single,
                    set: &p.single,
                },
                Condition {
                    family: Family::LeaveOut,
                    set: &p.all_but_one,
                },
            ]
        }));
        for c in candidates {
            if seen.insert(c.key()) {
                out.push(c);
            }
        }
        out
    }
}

/// Records plus every simulation behind them, keyed by study-set id.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityRun {
    pub records: Vec<UtilityRecord>,
    pub simulations: BTreeMap<String, SimulationOutcome>,
}

/// Simulates every condition of `plan` concurrently via `run` and assembles
/// one record per pair from the trial-mean scores.
pub fn estimate_utilities<F>(plan: &PerturbationPlan, run: F) -> Result<UtilityRun, UtilityError>
where
    F: Fn(&StudySet) -> Result<SimulationOutcome, SimError> + Sync,
{
    let conditions = plan.conditions();
    let outcomes: Vec<SimulationOutcome> = conditions
        .par_iter()
        .map(|c| {
            run(c.set).map_err(|source| UtilityError::Simulation {
                condition: describe(plan, c),
                source,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut score: BTreeMap<(Family, String), f64> = BTreeMap::new();
    let mut simulations = BTreeMap::new();
    for (c, o) in conditions.iter().zip(outcomes) {
        score.insert(c.key(), o.aggregate.mean);
        simulations.entry(c.set.id.clone()).or_insert(o);
    }
    let leave_out = |s: &StudySet| score[&(Family::LeaveOut, s.id.clone())];
    let s_empty = leave_out(&plan.empty);
    let s_full = leave_out(&plan.full);
    let records = plan
        .per_pair
        .iter()
        .map(|p| {
            UtilityRecord::new(
                p.qa_id.clone(),
                s_empty,
                s_full,
                score[&(Family::Single, p.single.id.clone())],
                leave_out(&p.all_but_one),
            )
        })
        .collect();
    Ok(UtilityRun {
        records,
        simulations,
    })
}

fn describe(plan: &PerturbationPlan, c: &Condition<'_>) -> String {
    if c.set.id == plan.empty.id && c.family == Family::LeaveOut {
        return "empty study set".into();
    }
    if c.set.id == plan.full.id && c.family == Family::LeaveOut {
        return "full study set".into();
    }
    for p in &plan.per_pair {
        if c.family == Family::Single && p.single.id == c.set.id {
            return format!("single {}", p.qa_id);
        }
        if c.family == Family::LeaveOut && p.all_but_one.id == c.set.id {
            return format!("all but {}", p.qa_id);
        }
    }
    c.set.id.clone()
}

/// Utilities for one chapter's QA set with the simulator.
pub fn chapter_utilities(
    gateway: &Gateway,
    settings: &SimSettings,
    chapter: &Chapter,
    pairs: &[QAPair],
    trials: u32,
    base_seed: u64,
) -> Result<UtilityRun, UtilityError> {
    let plan = plan_perturbations(pairs)?;
    estimate_utilities(&plan, |set| {
        simulate(gateway, settings, chapter, set, trials, base_seed)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::chapter_with;
    use crate::domain::{Provenance, Strategy};
    use crate::lm::{CallSettings, KeywordLearner, MockBackend, MockScript};
    use serde_json::json;
    use std::sync::Arc;

    fn pair(q: &str) -> QAPair {
        let prov = Provenance {
            strategy: Strategy::ZeroShot,
            model_id: "m".into(),
            trial: 0,
            seed: 0,
            bloom_level: None,
        };
        QAPair::new("c", q.into(), "a".into(), 1, prov)
    }

    fn pairs(n: usize) -> Vec<QAPair> {
        (0..n).map(|i| pair(&format!("question {i}"))).collect()
    }

    #[test]
    fn plan_sizes() {
        assert_eq!(plan_perturbations(&pairs(1)).unwrap().conditions().len(), 3);
        for n in 2..=8 {
            assert_eq!(
                plan_perturbations(&pairs(n)).unwrap().conditions().len(),
                2 * n + 2
            );
        }
        assert!(matches!(
            plan_perturbations(&[]),
            Err(UtilityError::EmptyStudySet)
        ));
    }

    #[test]
    fn single_pair_plan_shape() {
        let plan = plan_perturbations(&pairs(1)).unwrap();
        assert_eq!(plan.per_pair[0].single.id, plan.full.id);
        assert_eq!(plan.per_pair[0].all_but_one.id, plan.empty.id);
    }

    #[test]
    fn plan_ids_are_stable() {
        let a = plan_perturbations(&pairs(4)).unwrap();
        let b = plan_perturbations(&pairs(4)).unwrap();
        assert_eq!(a, b);
    }

    fn keyword_setup(m: usize) -> (Gateway, Chapter, SimSettings) {
        let mut ch = chapter_with(1, m);
        let kws: Vec<String> = (0..m).map(|i| format!("KW{i}X")).collect();
        for (q, k) in ch.exam.questions.iter_mut().zip(&kws) {
            q.text = format!("Describe {k}.");
        }
        let s: MockScript = serde_json::from_value(json!({
            "rules": [{"match": "default", "response": "{}"}],
            "keyword_learner": KeywordLearner::new(kws),
        }))
        .unwrap();
        let gw = Gateway::in_memory(Arc::new(MockBackend::new(s).unwrap()));
        let settings = SimSettings {
            learner: CallSettings::new("l", 0.0, 0),
            evaluator: CallSettings::new("e", 0.0, 0),
            document_budget: 100_000,
        };
        (gw, ch, settings)
    }

    #[test]
    fn keyword_example_three_pairs() {
        let (gw, ch, settings) = keyword_setup(4);
        let ps = vec![pair("about KW0X"), pair("about KW1X"), pair("about KW2X")];
        let run = chapter_utilities(&gw, &settings, &ch, &ps, 1, 0).unwrap();
        let a = &run.records[0];
        assert_eq!(
            (a.s_empty, a.s_full, a.s_single, a.s_all_but_one),
            (0.0, 0.75, 0.25, 0.5)
        );
        assert_eq!(a.utility, 0.25);
        assert!(run.records.iter().all(UtilityRecord::is_consistent));
    }

    #[test]
    fn keyword_redundancy() {
        let (gw, ch, settings) = keyword_setup(4);
        let ps = vec![pair("first on KW0X"), pair("second on KW0X")];
        let run = chapter_utilities(&gw, &settings, &ch, &ps, 1, 0).unwrap();
        for r in &run.records {
            assert_eq!(r.s_single, 0.25);
            assert_eq!(r.s_full - r.s_all_but_one, 0.0);
            assert_eq!(r.utility, 0.125);
        }
    }

    #[test]
    fn single_pair_identity() {
        let (gw, ch, settings) = keyword_setup(3);
        let run = chapter_utilities(&gw, &settings, &ch, &[pair("KW2X")], 3, 5).unwrap();
        let r = &run.records[0];
        assert_eq!(r.utility, r.s_single - r.s_empty);
    }

    #[test]
    fn errors_name_the_condition() {
        let plan = plan_perturbations(&pairs(3)).unwrap();
        let target = plan.per_pair[1].single.id.clone();
        let err = estimate_utilities(&plan, |s| {
            if s.id == target {
                Err(SimError::Simulation("boom".into()))
            } else {
                Ok(SimulationOutcome {
                    aggregate: crate::simulator::TrialAggregate::from_scores(vec![0.0]),
                    attempts: vec![],
                })
            }
        })
        .unwrap_err();
        assert!(err
            .to_string()
            .starts_with(&format!("single {}", plan.per_pair[1].qa_id)));
    }
}
