//! Domain types shared by every module: spans, agents, prediction records
//! and the cost model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the two extraction heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Start,
    End,
}

impl Head {
    pub const BOTH: [Head; 2] = [Head::Start, Head::End];
}

/// Token-index span. `(-1, -1)` is the "no answer" sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 2]", into = "[i64; 2]")]
pub struct SpanPair {
    start: i64,
    end: i64,
}

impl SpanPair {
    pub const NO_ANSWER: SpanPair = SpanPair { start: -1, end: -1 };

    pub fn new(start: i64, end: i64) -> Result<Self> {
        let sentinel = start == -1 && end == -1;
        if !sentinel && (start < 0 || end < 0) {
            return Err(Error::InvalidSpan { start, end });
        }
        Ok(SpanPair { start, end })
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn end(&self) -> i64 {
        self.end
    }

    pub fn get(&self, head: Head) -> i64 {
        match head {
            Head::Start => self.start,
            Head::End => self.end,
        }
    }

    pub fn is_no_answer(&self) -> bool {
        *self == Self::NO_ANSWER
    }

    /// Builds a span from two head values without re-validating; used for
    /// composite spans assembled from already valid spans.
    pub(crate) fn from_heads(start: i64, end: i64) -> Self {
        SpanPair { start, end }
    }
}

impl TryFrom<[i64; 2]> for SpanPair {
    type Error = Error;

    fn try_from(v: [i64; 2]) -> Result<Self> {
        SpanPair::new(v[0], v[1])
    }
}

impl From<SpanPair> for [i64; 2] {
    fn from(s: SpanPair) -> Self {
        [s.start, s.end]
    }
}

/// Agent index: 0 is the main model, `1..=J` the experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl AgentId {
    pub const MAIN: AgentId = AgentId(0);

    pub fn index(self) -> usize {
        self.0
    }

    pub fn is_expert(self) -> bool {
        self.0 > 0
    }
}

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One logged query: its feature vector, the gold span and what every agent
/// predicted for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPredictionRecord {
    pub query_id: String,
    pub features: Vec<f64>,
    pub gold: SpanPair,
    pub predictions: Vec<SpanPair>,
}

impl AgentPredictionRecord {
    pub fn num_agents(&self) -> usize {
        self.predictions.len()
    }

    pub fn prediction(&self, agent: AgentId) -> SpanPair {
        self.predictions[agent.0]
    }

    pub fn head_correct(&self, agent: AgentId, head: Head) -> bool {
        self.predictions[agent.0].get(head) == self.gold.get(head)
    }

    pub fn span_correct(&self, agent: AgentId) -> bool {
        self.predictions[agent.0] == self.gold
    }

    /// Checks the record against the configured dimensions.
    pub fn check_dims(&self, input_dim: usize, num_agents: usize) -> Result<()> {
        if self.features.len() != input_dim {
            return Err(Error::DimensionMismatch {
                what: "features",
                expected: input_dim,
                actual: self.features.len(),
            });
        }
        if self.predictions.len() != num_agents {
            return Err(Error::DimensionMismatch {
                what: "predictions",
                expected: num_agents,
                actual: self.predictions.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationMode {
    /// `alpha_j + beta_j <= 1`, so every tau stays in `[0, 1]`.
    #[default]
    Strict,
    /// Only nonnegativity; tau may go negative.
    Permissive,
}

fn default_true() -> bool {
    true
}

/// Expert cost parameters and per-agent compute.
///
/// `alpha` and `beta` have one entry per expert (`J`), `gflops` one entry
/// per agent (`J + 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gflops: Vec<f64>,
    #[serde(default)]
    pub rejector_gflops: f64,
    /// Charge `beta_j` on each head of a jointly deferred query (twice per
    /// query) rather than once.
    #[serde(default = "default_true")]
    pub beta_per_head: bool,
}

/// Outcome of [`validate_cost_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedCosts {
    pub params: CostParams,
    /// Set in permissive mode when some `alpha_j + beta_j > 1`.
    pub tau_warning: bool,
}

impl CostParams {
    /// `J` experts with the given alpha/beta and zero compute.
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        let n = alpha.len() + 1;
        CostParams {
            alpha,
            beta,
            gflops: vec![0.0; n],
            rejector_gflops: 0.0,
            beta_per_head: true,
        }
    }

    pub fn with_gflops(mut self, gflops: Vec<f64>, rejector_gflops: f64) -> Self {
        self.gflops = gflops;
        self.rejector_gflops = rejector_gflops;
        self
    }

    pub fn num_experts(&self) -> usize {
        self.alpha.len()
    }

    pub fn num_agents(&self) -> usize {
        self.alpha.len() + 1
    }

    pub fn validate(&self, mode: ValidationMode) -> Result<ValidatedCosts> {
        validate_cost_params(self.clone(), mode)
    }

    pub fn is_strict(&self) -> bool {
        self.validate(ValidationMode::Strict).is_ok()
    }

    /// Per-query beta charge for expert `j` under joint allocation.
    pub(crate) fn joint_beta(&self, expert: usize) -> f64 {
        if self.beta_per_head {
            2.0 * self.beta[expert]
        } else {
            self.beta[expert]
        }
    }
}

pub fn validate_cost_params(params: CostParams, mode: ValidationMode) -> Result<ValidatedCosts> {
    let j = params.alpha.len();
    if j == 0 {
        return Err(Error::BadDimension("at least one expert is required".into()));
    }
    if params.beta.len() != j {
        return Err(Error::DimensionMismatch {
            what: "beta",
            expected: j,
            actual: params.beta.len(),
        });
    }
    if params.gflops.len() != j + 1 {
        return Err(Error::DimensionMismatch {
            what: "gflops",
            expected: j + 1,
            actual: params.gflops.len(),
        });
    }
    if params.gflops.iter().any(|g| !(*g >= 0.0)) || !(params.rejector_gflops >= 0.0) {
        return Err(Error::InvalidConfig("gflops must be nonnegative".into()));
    }
    let mut tau_warning = false;
    for (k, (&a, &b)) in params.alpha.iter().zip(&params.beta).enumerate() {
        let expert = k + 1;
        // `!(x >= 0)` also rejects NaN.
        if !(a >= 0.0) {
            return Err(Error::NegativeCost {
                expert,
                what: "alpha",
                value: a,
            });
        }
        if !(b >= 0.0) {
            return Err(Error::NegativeCost {
                expert,
                what: "beta",
                value: b,
            });
        }
        if a + b > 1.0 {
            match mode {
                ValidationMode::Strict => {
                    return Err(Error::TauOutOfRange { expert, sum: a + b });
                }
                ValidationMode::Permissive => tau_warning = true,
            }
        }
    }
    Ok(ValidatedCosts { params, tau_warning })
}

/// Cost of trusting `agent` on one head: `1{pred != gold}` for the main
/// model, `alpha_j 1{pred != gold} + beta_j` for expert `j`.
pub fn agent_cost(agent: AgentId, prediction: i64, gold: i64, params: &CostParams) -> f64 {
    let wrong = if prediction != gold { 1.0 } else { 0.0 };
    if agent.0 == 0 {
        wrong
    } else {
        params.alpha[agent.0 - 1] * wrong + params.beta[agent.0 - 1]
    }
}

/// Per-agent costs for one head of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVector(pub Vec<f64>);

impl CostVector {
    pub fn for_head(record: &AgentPredictionRecord, head: Head, params: &CostParams) -> Self {
        let gold = record.gold.get(head);
        CostVector(
            record
                .predictions
                .iter()
                .enumerate()
                .map(|(j, p)| agent_cost(AgentId(j), p.get(head), gold, params))
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `tau_j = 1 - c_j`.
pub fn tau_weights(costs: &CostVector) -> Vec<f64> {
    costs.0.iter().map(|c| 1.0 - c).collect()
}

/// L1-normalizes a nonnegative vector onto the probability simplex.
pub fn normalize_cost_vector(tau_bar: &[f64]) -> Result<Vec<f64>> {
    if let Some((index, &value)) = tau_bar.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeEntry { index, value });
    }
    let norm: f64 = tau_bar.iter().sum();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(tau_bar.iter().map(|v| v / norm).collect())
}
