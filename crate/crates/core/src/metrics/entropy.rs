use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::lm::TokenDistribution;

/// Natural-log entropy of `dist` after renormalizing its probabilities to sum
/// to one. Mass outside a top-k truncation is ignored.
pub fn entropy(dist: &TokenDistribution) -> Result<f64, MetricError> {
    entropy_of(&dist.probs)
}

pub fn entropy_of(probs: &[f64]) -> Result<f64, MetricError> {
    if let Some(p) = probs
        .iter()
        .find(|p| !(p.is_finite() && **p > 0.0 && **p <= 1.0))
    {
        return Err(MetricError::InvalidDistribution(format!(
            "probability {p} outside (0, 1]"
        )));
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(MetricError::InvalidDistribution("zero total mass".into()));
    }
    let h: f64 = probs
        .iter()
        .map(|p| {
            let q = p / total;
            -q * q.ln()
        })
        .sum();
    // turns -0.0 into 0.0
    Ok(h + 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigResult {
    pub prior_entropy: f64,
    pub posterior_entropy: f64,
    pub eig: f64,
}

impl EigResult {
    pub fn from_distributions(
        prior: &TokenDistribution,
        posterior: &TokenDistribution,
    ) -> Result<Self, MetricError> {
        let prior_entropy = entropy(prior)?;
        let posterior_entropy = entropy(posterior)?;
        Ok(EigResult {
            prior_entropy,
            posterior_entropy,
            eig: prior_entropy - posterior_entropy,
        })
    }
}
