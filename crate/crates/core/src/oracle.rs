//! Finite synthetic worlds with exact conditional error tables.
//!
//! On a finite world every expectation is an exact weighted sum, so the
//! Bayes rejector, the risk of a learned rejector and both sides of the
//! surrogate consistency bound can be evaluated without sampling error.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{weighted_surrogate, SurrogateSpec};
use crate::par::{self, Execution};
use crate::rejector::{decide_joint, decide_per_head, AllocationMode, HeadScores, RejectorModel, Scorer};
use crate::types::{AgentId, AgentPredictionRecord, CostParams, Head, SpanPair, ValidationMode};

/// Token positions available to synthesized spans.
pub const CONTEXT_LEN: i64 = 64;

/// A support point of a finite world. `err_start[j]` / `err_end[j]` are the
/// raw probabilities that agent `j` gets that head wrong at this point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub features: Vec<f64>,
    pub mass: f64,
    pub gold: SpanPair,
    pub err_start: Vec<f64>,
    pub err_end: Vec<f64>,
    #[serde(default)]
    pub cluster: usize,
}

impl WorldPoint {
    pub fn err(&self, head: Head) -> &[f64] {
        match head {
            Head::Start => &self.err_start,
            Head::End => &self.err_end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub points: Vec<WorldPoint>,
    pub params: CostParams,
    pub seed: u64,
}

impl SyntheticWorld {
    pub fn num_agents(&self) -> usize {
        self.params.num_agents()
    }

    pub fn input_dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.features.len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        if self.points.is_empty() {
            return bad("world has no points".into());
        }
        self.params.validate(ValidationMode::Permissive)?;
        let n = self.num_agents();
        let d = self.input_dim();
        let mut total = 0.0;
        for (k, p) in self.points.iter().enumerate() {
            if p.features.len() != d || p.features.iter().any(|f| !f.is_finite()) {
                return bad(format!("point {k}: features must be {d} finite values"));
            }
            if !(p.mass >= 0.0) {
                return bad(format!("point {k}: negative mass"));
            }
            if p.gold.is_no_answer() {
                return bad(format!("point {k}: gold span must be an answer span"));
            }
            for e in [&p.err_start, &p.err_end] {
                if e.len() != n {
                    return bad(format!("point {k}: expected {n} error probabilities"));
                }
                if e.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return bad(format!("point {k}: error probability outside [0, 1]"));
                }
            }
            total += p.mass;
        }
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("masses sum to {total}, not 1"));
        }
        Ok(())
    }
}

/// Expected per-agent costs `eta_j` for one head: `err_0` for the main
/// model, `alpha_j err_j + beta_j` for experts.
pub fn expected_costs(err_row: &[f64], params: &CostParams) -> Vec<f64> {
    err_row
        .iter()
        .enumerate()
        .map(|(j, e)| {
            if j == 0 {
                *e
            } else {
                params.alpha[j - 1] * e + params.beta[j - 1]
            }
        })
        .collect()
}

/// Expected cost when agent `j` answers both heads.
fn joint_expected_cost(j: usize, err_s: &[f64], err_e: &[f64], params: &CostParams) -> f64 {
    if j == 0 {
        err_s[0] + err_e[0]
    } else {
        params.alpha[j - 1] * err_s[j] + params.alpha[j - 1] * err_e[j] + params.joint_beta(j - 1)
    }
}

/// Pointwise Bayes rejector for one head: keep the main model when its
/// expected cost is no larger than the best expert's, otherwise defer to the
/// cheapest expert (lowest index on ties).
pub fn bayes_decide(err_row: &[f64], params: &CostParams) -> AgentId {
    let eta = expected_costs(err_row, params);
    let (best_expert, best) =
        eta[1..].iter().enumerate().fold(
            (0, f64::INFINITY),
            |acc, (k, v)| if *v < acc.1 { (k + 1, *v) } else { acc },
        );
    if eta[0] <= best {
        AgentId::MAIN
    } else {
        AgentId(best_expert)
    }
}

/// Enumerates every agent's conditional risk and returns the minimizer
/// (lowest index on ties) with its risk.
pub fn brute_force_conditional_min(err_row: &[f64], params: &CostParams) -> (AgentId, f64) {
    let risks = expected_costs(err_row, params);
    let mut best = 0;
    for j in 0..risks.len() {
        if risks[j] < risks[best] {
            best = j;
        }
    }
    (AgentId(best), risks[best])
}

/// Bayes single-agent decision over both heads.
pub fn bayes_decide_joint(err_s: &[f64], err_e: &[f64], params: &CostParams) -> AgentId {
    let mut best = 0;
    let mut best_cost = joint_expected_cost(0, err_s, err_e, params);
    for j in 1..err_s.len() {
        let c = joint_expected_cost(j, err_s, err_e, params);
        if c < best_cost {
            best = j;
            best_cost = c;
        }
    }
    AgentId(best)
}

fn check_params(world: &SyntheticWorld, params: &CostParams) -> Result<()> {
    if params.num_agents() != world.num_agents() {
        return Err(Error::DimensionMismatch {
            what: "cost params agents",
            expected: world.num_agents(),
            actual: params.num_agents(),
        });
    }
    Ok(())
}

/// Expected cost at one point for the given decisions.
fn point_risk(p: &WorldPoint, start: AgentId, end: AgentId, params: &CostParams, mode: AllocationMode) -> f64 {
    match mode {
        AllocationMode::PerHead => {
            expected_costs(&p.err_start, params)[start.0] + expected_costs(&p.err_end, params)[end.0]
        }
        AllocationMode::Joint => joint_expected_cost(start.0, &p.err_start, &p.err_end, params),
    }
}

fn bayes_decisions(p: &WorldPoint, params: &CostParams, mode: AllocationMode) -> (AgentId, AgentId) {
    match mode {
        AllocationMode::PerHead => (bayes_decide(&p.err_start, params), bayes_decide(&p.err_end, params)),
        AllocationMode::Joint => {
            let a = bayes_decide_joint(&p.err_start, &p.err_end, params);
            (a, a)
        }
    }
}

/// Mass-weighted minimal conditional risk.
pub fn bayes_risk(world: &SyntheticWorld, params: &CostParams, mode: AllocationMode) -> Result<f64> {
    check_params(world, params)?;
    Ok(world
        .points
        .iter()
        .map(|p| {
            let (s, e) = bayes_decisions(p, params, mode);
            p.mass * point_risk(p, s, e, params, mode)
        })
        .sum())
}

/// Per-agent share of mass routed by the Bayes rule. In per-head mode each
/// head counts with weight 1/2.
pub fn bayes_allocation(world: &SyntheticWorld, params: &CostParams, mode: AllocationMode) -> Result<Vec<f64>> {
    check_params(world, params)?;
    let mut alloc = vec![0.0; world.num_agents()];
    for p in &world.points {
        let (s, e) = bayes_decisions(p, params, mode);
        alloc[s.0] += 0.5 * p.mass;
        alloc[e.0] += 0.5 * p.mass;
    }
    let total: f64 = alloc.iter().sum();
    Ok(alloc.iter().map(|a| a / total).collect())
}

/// Scores of `scorer` at every point of the world, in point order.
pub fn world_scores<S: Scorer + ?Sized>(
    world: &SyntheticWorld,
    scorer: &S,
    exec: Execution,
) -> Result<Vec<HeadScores>> {
    if scorer.num_agents() != world.num_agents() {
        return Err(Error::DimensionMismatch {
            what: "scorer agents",
            expected: world.num_agents(),
            actual: scorer.num_agents(),
        });
    }
    par::map(&world.points, exec, |p| scorer.score(&p.features))
        .into_iter()
        .collect()
}

/// Scores that make the argmax rules reproduce the Bayes decisions.
pub fn bayes_scores(world: &SyntheticWorld, params: &CostParams, mode: AllocationMode) -> Vec<HeadScores> {
    let n = world.num_agents();
    world
        .points
        .iter()
        .map(|p| {
            let (s, e) = bayes_decisions(p, params, mode);
            let one_hot = |a: AgentId| {
                let mut v = vec![0.0; n];
                v[a.0] = 1.0;
                v
            };
            HeadScores {
                start: one_hot(s),
                end: one_hot(e),
            }
        })
        .collect()
}

/// Exact expected deferral loss of the decisions induced by `scores`.
pub fn world_deferral_risk(
    world: &SyntheticWorld,
    scores: &[HeadScores],
    params: &CostParams,
    mode: AllocationMode,
) -> Result<f64> {
    check_params(world, params)?;
    if scores.len() != world.points.len() {
        return Err(Error::DimensionMismatch {
            what: "score table",
            expected: world.points.len(),
            actual: scores.len(),
        });
    }
    Ok(world
        .points
        .iter()
        .zip(scores)
        .map(|(p, s)| {
            let (a, b) = match mode {
                AllocationMode::PerHead => (decide_per_head(&s.start), decide_per_head(&s.end)),
                AllocationMode::Joint => {
                    let a = decide_joint(&s.start, &s.end);
                    (a, a)
                }
            };
            p.mass * point_risk(p, a, b, params, mode)
        })
        .sum())
}

/// Exact expected deferral loss of a rejector on a world.
pub fn empirical_deferral_risk<S: Scorer + ?Sized>(
    scorer: &S,
    world: &SyntheticWorld,
    params: &CostParams,
    mode: AllocationMode,
    exec: Execution,
) -> Result<f64> {
    let scores = world_scores(world, scorer, exec)?;
    world_deferral_risk(world, &scores, params, mode)
}

/// Mean true deferral loss of a rejector over a log.
pub fn log_deferral_risk<S: Scorer + ?Sized>(
    scorer: &S,
    log: &[AgentPredictionRecord],
    params: &CostParams,
    mode: AllocationMode,
    exec: Execution,
) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let losses = par::map(log, exec, |r| -> Result<f64> {
        let a = crate::rejector::allocate(scorer, r, mode)?;
        Ok(match mode {
            AllocationMode::PerHead => crate::losses::true_deferral_loss(a.start_agent, a.end_agent, r, params),
            AllocationMode::Joint => crate::losses::joint_deferral_loss(a.start_agent, r, params),
        })
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / log.len() as f64)
}

// ---------------------------------------------------------------------------
// World generation and log sampling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertProfile {
    /// Clusters where the expert is competent.
    pub competent: Vec<usize>,
    pub error_in: f64,
    pub error_out: f64,
}

/// Clustered feature space with cluster-specialized experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub num_clusters: usize,
    pub input_dim: usize,
    pub points_per_cluster: usize,
    pub spread: f64,
    /// Defaults to centers evenly spaced on a circle of radius 4 in the
    /// first two coordinates (on a line for `input_dim == 1`).
    #[serde(default)]
    pub centers: Option<Vec<Vec<f64>>>,
    /// Main-model error probability per cluster.
    pub main_error: Vec<f64>,
    pub experts: Vec<ExpertProfile>,
}

impl ClusterSpec {
    /// Two well separated clusters in the plane; expert 1 is reliable on
    /// cluster 0, expert 2 on cluster 1, the main model is mediocre on both.
    pub fn acceptance() -> Self {
        ClusterSpec {
            num_clusters: 2,
            input_dim: 2,
            points_per_cluster: 200,
            spread: 0.5,
            centers: Some(vec![vec![-2.0, 0.0], vec![2.0, 0.0]]),
            main_error: vec![0.3, 0.3],
            experts: vec![
                ExpertProfile {
                    competent: vec![0],
                    error_in: 0.05,
                    error_out: 0.6,
                },
                ExpertProfile {
                    competent: vec![1],
                    error_in: 0.05,
                    error_out: 0.6,
                },
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadSpec(m.to_string()));
        if self.num_clusters == 0 || self.input_dim == 0 || self.points_per_cluster == 0 {
            return bad("num_clusters, input_dim and points_per_cluster must be >= 1");
        }
        if self.experts.is_empty() {
            return bad("at least one expert is required");
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return bad("spread must be finite and >= 0");
        }
        if self.main_error.len() != self.num_clusters {
            return bad("main_error needs one entry per cluster");
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.main_error.iter().all(|e| in_unit(*e)) {
            return bad("main_error outside [0, 1]");
        }
        for e in &self.experts {
            if !in_unit(e.error_in) || !in_unit(e.error_out) {
                return bad("expert error rate outside [0, 1]");
            }
            if e.competent.iter().any(|c| *c >= self.num_clusters) {
                return bad("competent cluster index out of range");
            }
        }
        if let Some(c) = &self.centers {
            if c.len() != self.num_clusters || c.iter().any(|v| v.len() != self.input_dim) {
                return bad("centers must be num_clusters vectors of input_dim");
            }
        }
        Ok(())
    }

    pub fn resolved_centers(&self) -> Vec<Vec<f64>> {
        if let Some(c) = &self.centers {
            return c.clone();
        }
        let k = self.num_clusters;
        (0..k)
            .map(|c| {
                let mut v = vec![0.0; self.input_dim];
                if self.input_dim == 1 {
                    v[0] = 4.0 * (c as f64 - (k as f64 - 1.0) / 2.0);
                } else {
                    let angle = std::f64::consts::TAU * c as f64 / k as f64;
                    v[0] = 4.0 * angle.cos();
                    v[1] = 4.0 * angle.sin();
                }
                v
            })
            .collect()
    }
}

/// Index of the nearest center (lowest index on ties).
pub fn nearest_center(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = 0;
    for (k, c) in centers.iter().enumerate() {
        if dist(c) < dist(&centers[best]) {
            best = k;
        }
    }
    best
}

/// Samples a clustered world: Gaussian points around each center with
/// uniform mass; each point's error table follows its nearest center.
pub fn generate_world(spec: &ClusterSpec, params: &CostParams, seed: u64) -> Result<SyntheticWorld> {
    spec.validate()?;
    if params.num_agents() != spec.experts.len() + 1 {
        return Err(Error::BadSpec(format!(
            "cost params describe {} agents, cluster spec {}",
            params.num_agents(),
            spec.experts.len() + 1
        )));
    }
    let centers = spec.resolved_centers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.num_clusters * spec.points_per_cluster;
    let mass = 1.0 / total as f64;
    let mut points = Vec::with_capacity(total);
    for center in &centers {
        for _ in 0..spec.points_per_cluster {
            let features: Vec<f64> = center
                .iter()
                .map(|c| c + spec.spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let cluster = nearest_center(&features, &centers);
            let mut err = vec![spec.main_error[cluster]];
            err.extend(spec.experts.iter().map(|e| {
                if e.competent.contains(&cluster) {
                    e.error_in
                } else {
                    e.error_out
                }
            }));
            let start = rng.random_range(0..CONTEXT_LEN - 16);
            let end = start + rng.random_range(0..8);
            points.push(WorldPoint {
                features,
                mass,
                gold: SpanPair::new(start, end)?,
                err_start: err.clone(),
                err_end: err,
                cluster,
            });
        }
    }
    // Re-normalize so rounding in 1/total cannot break the mass invariant.
    let sum: f64 = points.iter().map(|p| p.mass).sum();
    points.iter_mut().for_each(|p| p.mass /= sum);
    let world = SyntheticWorld {
        points,
        params: params.clone(),
        seed,
    };
    world.validate()?;
    Ok(world)
}

fn wrong_index(gold: i64) -> i64 {
    (gold + 1).rem_euclid(CONTEXT_LEN)
}

/// Draws `n` records: points by mass, then each agent/head independently
/// correct with probability `1 - err`. Wrong heads emit `gold + 1` (mod the
/// context length).
pub fn sample_log(world: &SyntheticWorld, n: usize, seed: u64) -> Result<Vec<AgentPredictionRecord>> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample size must be >= 1".into()));
    }
    world.validate()?;
    let masses: Vec<f64> = world.points.iter().map(|p| p.mass).collect();
    let picker = WeightedIndex::new(&masses).map_err(|e| Error::BadSpec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (n.max(2) - 1).to_string().len();
    Ok((0..n)
        .map(|i| {
            let p = &world.points[picker.sample(&mut rng)];
            let predictions = (0..world.num_agents())
                .map(|j| {
                    let start = if rng.random::<f64>() < p.err_start[j] {
                        wrong_index(p.gold.start())
                    } else {
                        p.gold.start()
                    };
                    let end = if rng.random::<f64>() < p.err_end[j] {
                        wrong_index(p.gold.end())
                    } else {
                        p.gold.end()
                    };
                    SpanPair::from_heads(start, end)
                })
                .collect();
            AgentPredictionRecord {
                query_id: format!("q{i:0width$}"),
                features: p.features.clone(),
                gold: p.gold,
                predictions,
            }
        })
        .collect())
}

/// Random strict-mode world: random masses, independent uniform error
/// tables per head, `alpha_j ~ U[0,1]`, `beta_j ~ U[0, 1 - alpha_j]`.
pub fn random_world(num_points: usize, num_agents: usize, input_dim: usize, seed: u64) -> Result<SyntheticWorld> {
    if num_points == 0 || num_agents < 2 || input_dim == 0 {
        return Err(Error::BadSpec("need points >= 1, agents >= 2, input_dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha: Vec<f64> = (1..num_agents).map(|_| rng.random::<f64>()).collect();
    let beta: Vec<f64> = alpha.iter().map(|a| rng.random::<f64>() * (1.0 - a)).collect();
    let params = CostParams::new(alpha, beta);
    let raw: Vec<f64> = (0..num_points).map(|_| rng.random::<f64>() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    let points = raw
        .iter()
        .map(|m| WorldPoint {
            features: (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            mass: m / total,
            gold: SpanPair::from_heads(0, 1),
            err_start: (0..num_agents).map(|_| rng.random::<f64>()).collect(),
            err_end: (0..num_agents).map(|_| rng.random::<f64>()).collect(),
            cluster: 0,
        })
        .collect();
    let world = SyntheticWorld { points, params, seed };
    world.validate()?;
    Ok(world)
}

// ---------------------------------------------------------------------------
// Consistency transform and bound

/// The comp-sum calibration function `T^nu` on `[0, 1]`, with `n` the
/// number of allocation classes (used by the `nu > 1` branches).
pub fn gamma_transform(u: f64, nu: f64, n: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::DomainError(u));
    }
    if n < 2 {
        return Err(Error::BadDimension(format!("n must be >= 2, got {n}")));
    }
    let nu = SurrogateSpec::new(nu, n)?.effective_nu();
    // Power mean of (1 + u) and (1 - u) with exponent 1 / (2 - nu), raised
    // to 2 - nu.
    let power_mean = |nu: f64| {
        let e = 1.0 / (2.0 - nu);
        (((1.0 + u).powf(e) + (1.0 - u).powf(e)) / 2.0).powf(2.0 - nu)
    };
    let scale = |nu: f64| 1.0 / ((nu - 1.0) * (n as f64).powf(nu - 1.0));
    Ok(if nu < 1.0 {
        2f64.powf(1.0 - nu) / (1.0 - nu) * (1.0 - power_mean(nu))
    } else if nu == 1.0 {
        let right = if u < 1.0 { (1.0 - u) / 2.0 * (-u).ln_1p() } else { 0.0 };
        (1.0 + u) / 2.0 * u.ln_1p() + right
    } else if nu < 2.0 {
        scale(nu) * (power_mean(nu) - 1.0)
    } else {
        scale(nu) * u
    })
}

/// `T^nu(1)`, the largest value of the transform.
pub fn gamma_max(nu: f64, n: usize) -> Result<f64> {
    gamma_transform(1.0, nu, n)
}

const BISECTION_ITERS: usize = 200;

/// Inverse of [`gamma_transform`] by bisection on `[0, 1]`.
pub fn gamma_inverse(t: f64, nu: f64, n: usize, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be > 0, got {tol}")));
    }
    let max = gamma_max(nu, n)?;
    if !(t >= 0.0) || t > max + tol {
        return Err(Error::OutOfRange { t, max });
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gamma_transform(mid, nu, n)? < t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // `hi` satisfies T(hi) >= t; take whichever end is closer.
    let (tl, th) = (gamma_transform(lo, nu, n)?, gamma_transform(hi, nu, n)?);
    Ok(if (t - tl).abs() < (th - t).abs() { lo } else { hi })
}

/// `Gamma^nu = (T^nu)^-1`, extended by 1 above `T^nu(1)` (the normalized
/// true excess never exceeds 1).
fn gamma_bound(v: f64, nu: f64, n: usize) -> Result<f64> {
    let max = gamma_max(nu, n)?;
    if v >= max {
        Ok(1.0)
    } else {
        gamma_inverse(v.max(0.0), nu, n, 1e-15)
    }
}

/// `inf_s Σ_j p_j Φ^nu(s, j)` over all score vectors, for `p` on the simplex.
pub fn min_conditional_surrogate(p: &[f64], nu: f64) -> f64 {
    let nu = if (nu - 1.0).abs() < 1e-9 { 1.0 } else { nu };
    if nu >= 2.0 {
        let pmax = p.iter().cloned().fold(0.0, f64::max);
        return (1.0 - pmax) / (nu - 1.0);
    }
    if nu == 1.0 {
        return -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    }
    // Minimizer softmax(s) ∝ p^(1/(2-nu)).
    let z: f64 = p.iter().map(|v| v.powf(1.0 / (2.0 - nu))).sum();
    (z.powf(2.0 - nu) - 1.0) / (1.0 - nu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub nu: f64,
    /// Expected true deferral excess risk over the Bayes rejector.
    pub left: f64,
    /// Expectation of the pointwise bound `S(x) Γ(ΔΦ(x) / S(x))` with
    /// `S(x) = Σ_heads ||τ̄(x)||_1`.
    pub right: f64,
    /// `Γ̄` applied to the expected surrogate excess with the expected
    /// normalizer; never smaller than `right` for concave `Γ`.
    pub right_global: f64,
    pub surrogate_excess: f64,
    pub tau_norm: f64,
    /// Main-model c0 excess; zero because the main model is fixed.
    pub c0_excess: f64,
    pub holds: bool,
}

pub const BOUND_SLACK: f64 = 1e-9;

/// Evaluates both sides of the consistency bound for per-head decisions.
pub fn bound_check(world: &SyntheticWorld, scores: &[HeadScores], params: &CostParams, nu: f64) -> Result<BoundReport> {
    check_params(world, params)?;
    if params.validate(ValidationMode::Strict).is_err() {
        let worst = params
            .alpha
            .iter()
            .zip(&params.beta)
            .map(|(a, b)| 1.0 - a - b)
            .fold(f64::INFINITY, f64::min);
        return Err(Error::NonNegativeTauViolated { value: worst });
    }
    if scores.len() != world.points.len() {
        return Err(Error::DimensionMismatch {
            what: "score table",
            expected: world.points.len(),
            actual: scores.len(),
        });
    }
    let n = world.num_agents();
    let spec = SurrogateSpec::new(nu, n)?;
    let (mut left, mut right, mut surr, mut norm) = (0.0, 0.0, 0.0, 0.0);
    for (p, s) in world.points.iter().zip(scores) {
        let mut true_excess = 0.0;
        let mut surrogate_excess = 0.0;
        let mut s_norm = 0.0;
        for (head, rbar) in [(Head::Start, &s.start), (Head::End, &s.end)] {
            let cost = expected_costs(p.err(head), params);
            let tau: Vec<f64> = cost.iter().map(|c| 1.0 - c).collect();
            if let Some(v) = tau.iter().find(|v| **v < 0.0) {
                return Err(Error::NonNegativeTauViolated { value: *v });
            }
            let l1: f64 = tau.iter().sum();
            let min_cost = cost.iter().cloned().fold(f64::INFINITY, f64::min);
            true_excess += cost[decide_per_head(rbar).0] - min_cost;
            if l1 > 0.0 {
                let prob: Vec<f64> = tau.iter().map(|v| v / l1).collect();
                let value = weighted_surrogate(rbar, &tau, &spec);
                surrogate_excess += (value - l1 * min_conditional_surrogate(&prob, nu)).max(0.0);
            }
            s_norm += l1;
        }
        left += p.mass * true_excess;
        surr += p.mass * surrogate_excess;
        norm += p.mass * s_norm;
        if s_norm > 0.0 {
            right += p.mass * s_norm * gamma_bound(surrogate_excess / s_norm, nu, n)?;
        }
    }
    let right_global = if norm > 0.0 {
        norm * gamma_bound(surr / norm, nu, n)?
    } else {
        0.0
    };
    Ok(BoundReport {
        nu,
        left,
        right,
        right_global,
        surrogate_excess: surr,
        tau_norm: norm,
        c0_excess: 0.0,
        holds: left <= right + BOUND_SLACK,
    })
}

/// Runs [`bound_check`] on `trials` random strict worlds with random linear
/// rejectors.
pub fn random_bound_trials(trials: usize, seed: u64, nu: f64, exec: Execution) -> Result<Vec<BoundReport>> {
    par::map_range(trials, exec, |t| -> Result<BoundReport> {
        let trial_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let agents = rng.random_range(2..=4);
        let points = rng.random_range(1..=12);
        let d = rng.random_range(1..=3);
        let world = random_world(points, agents, d, trial_seed)?;
        let mut model = RejectorModel::init(
            crate::rejector::Architecture::Linear,
            Default::default(),
            d,
            agents,
            trial_seed ^ 1,
        )?;
        let scale = rng.random_range(0.1..5.0);
        for w in model.weights_mut() {
            *w = *w * scale + rng.random_range(-1.0..1.0);
        }
        let scores = world_scores(&world, &model, Execution::Serial)?;
        bound_check(&world, &scores, &world.params, nu)
    })
    .into_iter()
    .collect()
}

/// Exhaustive check of [`bayes_decide`] against
/// [`brute_force_conditional_min`] over an error grid. Returns
/// `(rows checked, rows agreeing)`.
pub fn exhaustive_agreement(step: f64, experts: &[usize], alphas: &[f64], betas: &[f64]) -> (usize, usize) {
    let levels = (1.0 / step).round() as usize;
    let grid: Vec<f64> = (0..=levels).map(|k| (k as f64 * step).min(1.0)).collect();
    let mut checked = 0;
    let mut agreed = 0;
    for &j in experts {
        let n = j + 1;
        let rows = grid.len().pow(n as u32);
        for &alpha in alphas {
            for &beta in betas {
                let params = CostParams::new(vec![alpha; j], vec![beta; j]);
                let mut row = vec![0.0; n];
                for mut code in 0..rows {
                    for slot in row.iter_mut() {
                        *slot = grid[code % grid.len()];
                        code /= grid.len();
                    }
                    checked += 1;
                    if bayes_decide(&row, &params) == brute_force_conditional_min(&row, &params).0 {
                        agreed += 1;
                    }
                }
            }
        }
    }
    (checked, agreed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rejector::{init_model, Architecture, FnScorer, ForcedAgent};
    use proptest::prelude::*;
    use rand::Rng;

    fn one_point(err_s: Vec<f64>, err_e: Vec<f64>, params: CostParams) -> SyntheticWorld {
        SyntheticWorld {
            points: vec![WorldPoint {
                features: vec![0.0],
                mass: 1.0,
                gold: SpanPair::new(1, 2).unwrap(),
                err_start: err_s,
                err_end: err_e,
                cluster: 0,
            }],
            params,
            seed: 0,
        }
    }

    #[test]
    fn bayes_examples() {
        let p = CostParams::new(vec![1.0], vec![0.1]);
        assert_eq!(bayes_decide(&[0.4, 0.2], &p), AgentId(1));
        let p0 = CostParams::new(vec![1.0], vec![0.0]);
        assert_eq!(bayes_decide(&[0.3, 0.3], &p0), AgentId(0));
        assert_eq!(brute_force_conditional_min(&[0.0, 1.0], &p0), (AgentId(0), 0.0));
        let p = CostParams::new(vec![1.0], vec![0.25]);
        assert_eq!(brute_force_conditional_min(&[1.0, 0.0], &p), (AgentId(1), 0.25));
    }

    #[test]
    fn bayes_agrees_with_brute_force_on_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let j = rng.random_range(1..=4);
            let alpha: Vec<f64> = (0..j).map(|_| rng.random()).collect();
            let beta: Vec<f64> = (0..j).map(|_| rng.random::<f64>() * 0.5).collect();
            let p = CostParams::new(alpha, beta);
            let row: Vec<f64> = (0..=j).map(|_| rng.random()).collect();
            assert_eq!(bayes_decide(&row, &p), brute_force_conditional_min(&row, &p).0);
        }
    }

    #[test]
    fn bayes_risk_examples() {
        let perfect = one_point(
            vec![0.0; 3],
            vec![0.0; 3],
            CostParams::new(vec![1.0, 1.0], vec![0.0, 0.0]),
        );
        for mode in [AllocationMode::PerHead, AllocationMode::Joint] {
            assert_eq!(bayes_risk(&perfect, &perfect.params, mode).unwrap(), 0.0);
        }

        // Head-wise optima differ: start prefers expert 1, end expert 2.
        let w = one_point(
            vec![0.5, 0.1, 0.4],
            vec![0.5, 0.4, 0.1],
            CostParams::new(vec![1.0, 1.0], vec![0.0, 0.0]),
        );
        let per = bayes_risk(&w, &w.params, AllocationMode::PerHead).unwrap();
        let joint = bayes_risk(&w, &w.params, AllocationMode::Joint).unwrap();
        assert!((per - 0.2).abs() < 1e-15);
        assert!((joint - 0.5).abs() < 1e-15);

        // Uniform two-point world: per-point minima 0.4 and 0.2.
        let params = CostParams::new(vec![1.0], vec![0.1]);
        let mut w = one_point(vec![0.2, 0.3], vec![0.2, 0.3], params.clone());
        let mut b = w.points[0].clone();
        b.err_start = vec![0.6, 0.0];
        b.err_end = vec![0.6, 0.0];
        w.points[0].mass = 0.5;
        b.mass = 0.5;
        w.points.push(b);
        assert!((bayes_risk(&w, &params, AllocationMode::PerHead).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn beta_once_per_query_in_joint_mode() {
        let mut params = CostParams::new(vec![1.0], vec![0.3]);
        let w = one_point(vec![0.4, 0.0], vec![0.4, 0.0], params.clone());
        // Per head charge: 0.6 for the expert vs 0.8 for the main model.
        assert!((bayes_risk(&w, &params, AllocationMode::Joint).unwrap() - 0.6).abs() < 1e-15);
        params.beta_per_head = false;
        assert!((bayes_risk(&w, &params, AllocationMode::Joint).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn risk_of_forced_and_bayes_rejectors() {
        let params = CostParams::new(vec![1.0, 1.0], vec![0.05, 0.07]);
        let world = generate_world(&ClusterSpec::acceptance(), &params, 3).unwrap();
        for mode in [AllocationMode::PerHead, AllocationMode::Joint] {
            let bayes = bayes_scores(&world, &params, mode);
            let risk = world_deferral_risk(&world, &bayes, &params, mode).unwrap();
            assert_eq!(risk, bayes_risk(&world, &params, mode).unwrap());
        }
        let main = ForcedAgent {
            agent: AgentId(0),
            num_agents: 3,
        };
        let r = empirical_deferral_risk(&main, &world, &params, AllocationMode::PerHead, Execution::Serial).unwrap();
        let direct: f64 = world
            .points
            .iter()
            .map(|p| p.mass * (p.err_start[0] + p.err_end[0]))
            .sum();
        assert!((r - direct).abs() < 1e-12);
    }

    #[test]
    fn log_risk_matches_naive_loop() {
        let params = CostParams::new(vec![1.0, 0.5], vec![0.1, 0.2]);
        let world = generate_world(&ClusterSpec::acceptance(), &params, 8).unwrap();
        let log = sample_log(&world, 500, 9).unwrap();
        let model = init_model(Architecture::Linear, 2, 3, 10).unwrap();
        for mode in [AllocationMode::PerHead, AllocationMode::Joint] {
            let got = log_deferral_risk(&model, &log, &params, mode, Execution::Parallel).unwrap();
            let mut total = 0.0;
            for r in &log {
                let s = model.score(&r.features).unwrap();
                let (a, b) = match mode {
                    AllocationMode::PerHead => (decide_per_head(&s.start), decide_per_head(&s.end)),
                    AllocationMode::Joint => {
                        let a = decide_joint(&s.start, &s.end);
                        (a, a)
                    }
                };
                for (head, agent) in [(Head::Start, a), (Head::End, b)] {
                    let wrong = r.predictions[agent.0].get(head) != r.gold.get(head);
                    total += if agent.0 == 0 {
                        wrong as u8 as f64
                    } else {
                        params.alpha[agent.0 - 1] * (wrong as u8 as f64) + params.beta[agent.0 - 1]
                    };
                }
            }
            assert!((got - total / 500.0).abs() < 1e-12);
        }
    }

    #[test]
    fn world_generation() {
        let spec = ClusterSpec {
            num_clusters: 1,
            input_dim: 3,
            points_per_cluster: 20,
            spread: 0.5,
            centers: None,
            main_error: vec![0.4],
            experts: vec![ExpertProfile {
                competent: vec![0],
                error_in: 0.0,
                error_out: 0.9,
            }],
        };
        let params = CostParams::new(vec![1.0], vec![0.0]);
        let w = generate_world(&spec, &params, 1).unwrap();
        assert!(w.points.iter().all(|p| p.err_start[1] == 0.0 && p.err_end[1] == 0.0));
        assert_eq!(w, generate_world(&spec, &params, 1).unwrap());
        assert_ne!(w, generate_world(&spec, &params, 2).unwrap());

        let spec = ClusterSpec {
            num_clusters: 2,
            input_dim: 2,
            points_per_cluster: 100,
            spread: 2.5,
            centers: Some(vec![vec![-1.0, 0.0], vec![1.0, 1.0]]),
            main_error: vec![0.2, 0.3],
            experts: vec![ExpertProfile {
                competent: vec![1],
                error_in: 0.05,
                error_out: 0.6,
            }],
        };
        let w = generate_world(&spec, &params, 5).unwrap();
        let centers = [[-1.0, 0.0], [1.0, 1.0]];
        for p in &w.points {
            let d0 = (p.features[0] - centers[0][0]).powi(2) + (p.features[1] - centers[0][1]).powi(2);
            let d1 = (p.features[0] - centers[1][0]).powi(2) + (p.features[1] - centers[1][1]).powi(2);
            let in_one = d1 < d0;
            assert_eq!(p.err_start[1], if in_one { 0.05 } else { 0.6 });
            assert_eq!(p.err_start[0], if in_one { 0.3 } else { 0.2 });
        }

        let mut bad = ClusterSpec::acceptance();
        bad.experts[0].competent = vec![5];
        assert!(matches!(
            generate_world(&bad, &CostParams::new(vec![1.0, 1.0], vec![0.0, 0.0]), 0),
            Err(Error::BadSpec(_))
        ));
    }

    #[test]
    fn sampled_logs_follow_eta() {
        let params = CostParams::new(vec![1.0, 1.0], vec![0.0, 0.0]);
        let mut w = generate_world(&ClusterSpec::acceptance(), &params, 4).unwrap();
        for p in &mut w.points {
            p.err_start = vec![0.3, 0.0, 1.0];
            p.err_end = vec![0.3, 0.0, 1.0];
        }
        let n = 100_000;
        let log = sample_log(&w, n, 5).unwrap();
        assert!(log.iter().all(|r| r.predictions[1] == r.gold));
        assert!(log
            .iter()
            .all(|r| r.predictions[2].start() != r.gold.start() && r.predictions[2].end() != r.gold.end()));
        let wrong = log
            .iter()
            .filter(|r| r.predictions[0].start() != r.gold.start())
            .count() as f64;
        let sigma = (n as f64 * 0.3 * 0.7).sqrt();
        assert!((wrong - 0.3 * n as f64).abs() < 3.0 * sigma, "{wrong}");
        assert_eq!(log, sample_log(&w, n, 5).unwrap());
    }

    #[test]
    fn gamma_examples() {
        for nu in [0.0, 0.5, 1.0, 1.5, 2.0, 4.0] {
            assert_eq!(gamma_transform(0.0, nu, 3).unwrap(), 0.0);
        }
        assert!((gamma_transform(1.0, 1.0, 3).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((gamma_transform(0.5, 2.0, 3).unwrap() - 0.5 / 3.0).abs() < 1e-15);
        assert!(matches!(gamma_transform(1.5, 1.0, 3), Err(Error::DomainError(_))));
        // nu = 0: 1 - sqrt(1 - u^2).
        let u: f64 = 0.6;
        assert!((gamma_transform(u, 0.0, 3).unwrap() - (1.0 - (1.0 - u * u).sqrt())).abs() < 1e-15);
        // nu = 1.5, n = 2: exponent 2 power mean gives sqrt(1 + u^2) - 1, scaled by 2 / sqrt(2).
        let want = 2.0 / 2f64.sqrt() * ((1.0 + u * u).sqrt() - 1.0);
        assert!((gamma_transform(u, 1.5, 2).unwrap() - want).abs() < 1e-14);

        assert_eq!(gamma_inverse(0.0, 1.0, 3, 1e-12).unwrap(), 0.0);
        assert!(matches!(
            gamma_inverse(1.0, 1.0, 3, 1e-12),
            Err(Error::OutOfRange { .. })
        ));
        for nu in [0.0, 0.5, 1.0, 1.5, 2.0, 4.0] {
            for k in 1..=19 {
                let u = 0.05 * k as f64;
                let back = gamma_inverse(gamma_transform(u, nu, 3).unwrap(), nu, 3, 1e-14).unwrap();
                assert!((back - u).abs() < 1e-8, "nu={nu} u={u} back={back}");
            }
        }
    }

    #[test]
    fn gamma_is_monotone() {
        for nu in [0.0, 0.5, 1.0, 1.5, 2.0, 4.0] {
            for n in [2, 3, 4] {
                let mut prev = 0.0;
                for k in 0..=10_000 {
                    let v = gamma_transform(k as f64 / 10_000.0, nu, n).unwrap();
                    assert!(v >= prev, "nu={nu} n={n} k={k}");
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn conditional_minimum_is_a_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for nu in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0] {
            for _ in 0..200 {
                let n = rng.random_range(2..5);
                let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let total: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
                let spec = SurrogateSpec::new(nu, n).unwrap();
                let floor = min_conditional_surrogate(&p, nu);
                for _ in 0..20 {
                    let s: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
                    assert!(weighted_surrogate(&s, &p, &spec) >= floor - 1e-12);
                }
                if nu < 2.0 {
                    let s: Vec<f64> = p.iter().map(|v| v.powf(1.0 / (2.0 - nu)).ln()).collect();
                    assert!((weighted_surrogate(&s, &p, &spec) - floor).abs() < 1e-12);
                } else {
                    let k = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                    let mut s = vec![0.0; n];
                    s[k] = 60.0;
                    assert!((weighted_surrogate(&s, &p, &spec) - floor).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn bound_examples() {
        let w = random_world(6, 3, 2, 11).unwrap();
        let bayes = bayes_scores(&w, &w.params, AllocationMode::PerHead);
        let r = bound_check(&w, &bayes, &w.params, 1.0).unwrap();
        assert_eq!(r.left, 0.0);
        assert!(r.holds);

        let reports = random_bound_trials(200, 5, 1.0, Execution::Parallel).unwrap();
        assert!(reports.iter().all(|r| r.holds && r.right <= r.right_global + 1e-12));
        assert!(reports.iter().any(|r| r.left > 0.0));

        let mut permissive = w.clone();
        permissive.params = CostParams::new(vec![1.0, 1.0], vec![0.17, 0.0]);
        let scores = world_scores(
            &permissive,
            &ForcedAgent {
                agent: AgentId(0),
                num_agents: 3,
            },
            Execution::Serial,
        )
        .unwrap();
        assert!(matches!(
            bound_check(&permissive, &scores, &permissive.params, 1.0),
            Err(Error::NonNegativeTauViolated { .. })
        ));
    }

    #[test]
    fn exhaustive_grid_small() {
        let (checked, agreed) = exhaustive_agreement(0.25, &[1, 2], &[0.0, 1.0], &[0.0, 0.1]);
        assert_eq!(checked, 4 * (25 + 125));
        assert_eq!(checked, agreed);
    }

    #[test]
    fn world_validation() {
        let mut w = one_point(vec![0.1, 0.2], vec![0.1, 0.2], CostParams::new(vec![1.0], vec![0.0]));
        assert!(w.validate().is_ok());
        w.points[0].mass = 0.9;
        assert!(w.validate().is_err());
        w.points[0].mass = 1.0;
        w.points[0].err_end[1] = 1.2;
        assert!(w.validate().is_err());
    }

    #[test]
    fn scorer_dims_checked() {
        let w = one_point(vec![0.1, 0.2], vec![0.1, 0.2], CostParams::new(vec![1.0], vec![0.0]));
        let s = FnScorer {
            num_agents: 3,
            f: |_: &[f64]| HeadScores {
                start: vec![0.0; 3],
                end: vec![0.0; 3],
            },
        };
        assert!(world_scores(&w, &s, Execution::Serial).is_err());
    }

    proptest! {
        #[test]
        fn joint_risk_dominates_per_head(seed in 0u64..5000) {
            let w = random_world(5, 3, 1, seed).unwrap();
            let per = bayes_risk(&w, &w.params, AllocationMode::PerHead).unwrap();
            let joint = bayes_risk(&w, &w.params, AllocationMode::Joint).unwrap();
            prop_assert!(joint >= per - 1e-15);
        }

        #[test]
        fn oracle_allocation_monotone_in_beta(seed in 0u64..500) {
            let w = random_world(8, 3, 1, seed).unwrap();
            let mut prev = f64::INFINITY;
            for k in 0..=20 {
                let mut params = w.params.clone();
                params.beta[0] = 0.05 * k as f64;
                let share = bayes_allocation(&w, &params, AllocationMode::PerHead).unwrap()[1];
                prop_assert!(share <= prev + 1e-15);
                prev = share;
            }
        }
    }
}
