//! Comp-sum surrogate family, the true and surrogate deferral losses, and
//! their analytic gradients with respect to the rejector scores.
//!
//! Scores are always `r̄` scores: larger means the agent is preferred.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{agent_cost, tau_weights, AgentId, AgentPredictionRecord, CostParams, CostVector, Head};

const NU_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub nu: f64,
    pub num_classes: usize,
}

impl SurrogateSpec {
    pub fn new(nu: f64, num_classes: usize) -> Result<Self> {
        if !(nu >= 0.0) || !nu.is_finite() {
            return Err(Error::InvalidConfig(format!("nu must be finite and >= 0, got {nu}")));
        }
        if num_classes < 2 {
            return Err(Error::BadDimension(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        Ok(SurrogateSpec { nu, num_classes })
    }

    /// `nu` after snapping values within 1e-9 of 1 to exactly 1.
    pub fn effective_nu(&self) -> f64 {
        if (self.nu - 1.0).abs() < NU_SNAP {
            1.0
        } else {
            self.nu
        }
    }

    fn is_log(&self) -> bool {
        self.effective_nu() == 1.0
    }

    /// Maps `log Ψ` to the loss value.
    fn value_at(&self, log_psi: f64) -> f64 {
        if self.is_log() {
            log_psi
        } else {
            let a = 1.0 - self.effective_nu();
            (a * log_psi).exp_m1() / a
        }
    }

    /// d loss / d log Ψ, i.e. `Ψ^(1 - nu)`.
    fn slope(&self, log_psi: f64) -> f64 {
        if self.is_log() {
            1.0
        } else {
            ((1.0 - self.effective_nu()) * log_psi).exp()
        }
    }
}

/// Shared pieces of `log Ψ_t = log Σ_y exp(s_y - s_t)` for every target.
struct LogPsi {
    max: f64,
    /// `log Σ_y exp(s_y - max)`, computed via `ln_1p` so it is exact near 0.
    lse_shift: f64,
}

impl LogPsi {
    fn new(scores: &[f64]) -> Self {
        let (imax, max) =
            scores.iter().copied().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (k, s)| if s > acc.1 { (k, s) } else { acc },
            );
        let rest: f64 = scores
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != imax)
            .map(|(_, s)| (s - max).exp())
            .sum();
        LogPsi {
            max,
            lse_shift: rest.ln_1p(),
        }
    }

    fn at(&self, scores: &[f64], target: usize) -> f64 {
        (self.max - scores[target]) + self.lse_shift
    }

    fn softmax(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|s| (s - self.max - self.lse_shift).exp()).collect()
    }
}

/// `Φ^ν(scores, target)`: `log Ψ` for `nu = 1`, `(Ψ^(1-ν) - 1) / (1 - ν)`
/// otherwise, with `Ψ = Σ_y exp(s_y - s_target)`.
pub fn comp_sum_surrogate(scores: &[f64], target: usize, spec: &SurrogateSpec) -> f64 {
    let lp = LogPsi::new(scores);
    spec.value_at(lp.at(scores, target))
}

/// Gradient of [`comp_sum_surrogate`]: `Ψ^(1-ν) (softmax(s) - e_target)`.
pub fn comp_sum_gradient(scores: &[f64], target: usize, spec: &SurrogateSpec) -> Vec<f64> {
    let lp = LogPsi::new(scores);
    let slope = spec.slope(lp.at(scores, target));
    let mut g = lp.softmax(scores);
    g[target] -= 1.0;
    g.iter_mut().for_each(|v| *v *= slope);
    g
}

/// `Σ_j weights_j Φ^ν(scores, j)` for a single head.
pub fn weighted_surrogate(scores: &[f64], weights: &[f64], spec: &SurrogateSpec) -> f64 {
    let lp = LogPsi::new(scores);
    weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w != 0.0)
        .map(|(j, w)| w * spec.value_at(lp.at(scores, j)))
        .sum()
}

/// Gradient of [`weighted_surrogate`] with respect to `scores`.
pub fn weighted_gradient(scores: &[f64], weights: &[f64], spec: &SurrogateSpec) -> Vec<f64> {
    let lp = LogPsi::new(scores);
    let soft = lp.softmax(scores);
    let mut g = vec![0.0; scores.len()];
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let slope = w * spec.slope(lp.at(scores, j));
        for (gk, sk) in g.iter_mut().zip(&soft) {
            *gk += slope * sk;
        }
        g[j] -= slope;
    }
    g
}

/// `tau` vectors for the start and end heads of a record.
pub fn head_taus(record: &AgentPredictionRecord, params: &CostParams) -> [Vec<f64>; 2] {
    Head::BOTH.map(|h| tau_weights(&CostVector::for_head(record, h, params)))
}

/// Cost-weighted count of mispredictions plus consultation costs.
pub fn true_deferral_loss(
    decision_start: AgentId,
    decision_end: AgentId,
    record: &AgentPredictionRecord,
    params: &CostParams,
) -> f64 {
    [(Head::Start, decision_start), (Head::End, decision_end)]
        .iter()
        .map(|&(h, a)| agent_cost(a, record.prediction(a).get(h), record.gold.get(h), params))
        .sum()
}

/// Query-level loss when a single agent answers both heads. Equals
/// [`true_deferral_loss`] with both decisions set to `agent` unless
/// `params.beta_per_head` is off, in which case beta is charged once.
pub fn joint_deferral_loss(agent: AgentId, record: &AgentPredictionRecord, params: &CostParams) -> f64 {
    let both = true_deferral_loss(agent, agent, record, params);
    if agent.is_expert() && !params.beta_per_head {
        both - params.beta[agent.0 - 1]
    } else {
        both
    }
}

fn check_scores(rbar: &[f64], spec: &SurrogateSpec) -> Result<()> {
    if rbar.len() != spec.num_classes {
        return Err(Error::DimensionMismatch {
            what: "rejector scores",
            expected: spec.num_classes,
            actual: rbar.len(),
        });
    }
    Ok(())
}

pub fn surrogate_deferral_loss(
    rbar_start: &[f64],
    rbar_end: &[f64],
    record: &AgentPredictionRecord,
    params: &CostParams,
    spec: &SurrogateSpec,
) -> Result<f64> {
    check_scores(rbar_start, spec)?;
    check_scores(rbar_end, spec)?;
    let [ts, te] = head_taus(record, params);
    Ok(weighted_surrogate(rbar_start, &ts, spec) + weighted_surrogate(rbar_end, &te, spec))
}

pub fn surrogate_deferral_gradient(
    rbar_start: &[f64],
    rbar_end: &[f64],
    record: &AgentPredictionRecord,
    params: &CostParams,
    spec: &SurrogateSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_scores(rbar_start, spec)?;
    check_scores(rbar_end, spec)?;
    let [ts, te] = head_taus(record, params);
    Ok((
        weighted_gradient(rbar_start, &ts, spec),
        weighted_gradient(rbar_end, &te, spec),
    ))
}
