//! System metrics, cost sweeps and the vote-based ensemble baseline.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rejector::{allocate, AllocationMode, Architecture, HeadMode, RejectorModel, Scorer};
use crate::training::{train, TrainConfig};
use crate::types::{AgentId, AgentPredictionRecord, CostParams, Head, SpanPair};

/// 1 iff both indices match (two no-answer spans match).
pub fn exact_match(pred: SpanPair, gold: SpanPair) -> u8 {
    (pred == gold) as u8
}

/// Eight outcome fractions for one head, ordered as
/// kept/deferred x predictor correct/wrong x expert correct/wrong, with the
/// last factor varying fastest (`t1` = kept, both correct; `t8` = deferred,
/// both wrong).
pub type Buckets = [f64; 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub expert: usize,
    pub start: Buckets,
    pub end: Buckets,
    pub mean: Buckets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub tpr: f64,
    pub fpr: f64,
    /// False when there were no queries with the main model wrong.
    pub tpr_defined: bool,
    /// False when there were no queries with the main model correct.
    pub fpr_defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: AllocationMode,
    pub num_records: usize,
    pub em_percent: f64,
    /// Fraction of head decisions per agent; each head counts 1/2.
    pub allocation: Vec<f64>,
    pub expert_allocation_percent: f64,
    pub confusion: Vec<ConfusionMatrix>,
    pub rates: Rates,
    pub mean_gflops_per_query: f64,
    /// `None` when EM is zero.
    pub gflops_per_em: Option<f64>,
    pub betas: Vec<f64>,
}

/// Divides compute per query by EM percentage.
pub fn gflops_per_em(mean_gflops_per_query: f64, em_percent: f64) -> Result<f64> {
    if em_percent <= 0.0 {
        return Err(Error::DivisionByZero);
    }
    Ok(mean_gflops_per_query / em_percent)
}

/// Per-record outcome of routing.
#[derive(Debug, Clone, Copy)]
struct Outcome {
    start: AgentId,
    end: AgentId,
    em: bool,
    main_em: bool,
    /// Bit `k` set when agent `k` was queried.
    consulted: u64,
}

fn outcome(record: &AgentPredictionRecord, start: AgentId, end: AgentId, span: SpanPair) -> Outcome {
    Outcome {
        start,
        end,
        em: exact_match(span, record.gold) == 1,
        main_em: record.span_correct(AgentId::MAIN),
        consulted: (1 << start.0) | (1 << end.0),
    }
}

/// Agent sets are tracked as a 64-bit mask.
pub const MAX_AGENTS: usize = 64;

fn check_log(log: &[AgentPredictionRecord], n: usize) -> Result<()> {
    if n > MAX_AGENTS {
        return Err(Error::BadDimension(format!(
            "at most {MAX_AGENTS} agents supported, got {n}"
        )));
    }
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    for r in log {
        if r.num_agents() != n {
            return Err(Error::DimensionMismatch {
                what: "predictions",
                expected: n,
                actual: r.num_agents(),
            });
        }
    }
    Ok(())
}

fn route<S: Scorer + ?Sized>(
    log: &[AgentPredictionRecord],
    scorer: &S,
    params: &CostParams,
    mode: AllocationMode,
    exec: Execution,
) -> Result<Vec<Outcome>> {
    check_log(log, scorer.num_agents())?;
    if params.num_agents() != scorer.num_agents() {
        return Err(Error::DimensionMismatch {
            what: "cost params agents",
            expected: scorer.num_agents(),
            actual: params.num_agents(),
        });
    }
    par::map(log, exec, |r| {
        allocate(scorer, r, mode).map(|a| outcome(r, a.start_agent, a.end_agent, a.span))
    })
    .into_iter()
    .collect()
}

fn rates_from(outcomes: &[Outcome]) -> Rates {
    let (mut wrong, mut right, mut tp, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for o in outcomes {
        let deferred = o.start.is_expert() || o.end.is_expert();
        if o.main_em {
            right += 1;
            fp += (deferred && !o.em) as usize;
        } else {
            wrong += 1;
            tp += (deferred && o.em) as usize;
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Rates {
        tpr: rate(tp, wrong),
        fpr: rate(fp, right),
        tpr_defined: wrong > 0,
        fpr_defined: right > 0,
    }
}

fn buckets_for(log: &[AgentPredictionRecord], outcomes: &[Outcome], expert: usize, head: Head) -> Buckets {
    let mut counts = [0usize; 8];
    for (r, o) in log.iter().zip(outcomes) {
        let agent = match head {
            Head::Start => o.start,
            Head::End => o.end,
        };
        let deferred = agent.is_expert() as usize;
        let pred_wrong = !r.head_correct(AgentId::MAIN, head) as usize;
        let expert_wrong = !r.head_correct(AgentId(expert), head) as usize;
        counts[4 * deferred + 2 * pred_wrong + expert_wrong] += 1;
    }
    counts.map(|c| c as f64 / log.len() as f64)
}

fn confusion_from(log: &[AgentPredictionRecord], outcomes: &[Outcome], expert: usize) -> ConfusionMatrix {
    let start = buckets_for(log, outcomes, expert, Head::Start);
    let end = buckets_for(log, outcomes, expert, Head::End);
    let mut mean = [0.0; 8];
    for k in 0..8 {
        mean[k] = 0.5 * (start[k] + end[k]);
    }
    ConfusionMatrix {
        expert,
        start,
        end,
        mean,
    }
}

fn report_from(
    log: &[AgentPredictionRecord],
    outcomes: &[Outcome],
    params: &CostParams,
    rejector_gflops: f64,
    mode: AllocationMode,
) -> MetricsReport {
    let n = params.num_agents();
    let mut head_counts = vec![0usize; n];
    let mut consult_counts = vec![0usize; n];
    let mut em = 0usize;
    for o in outcomes {
        head_counts[o.start.0] += 1;
        head_counts[o.end.0] += 1;
        em += o.em as usize;
        for (k, c) in consult_counts.iter_mut().enumerate() {
            *c += (o.consulted >> k & 1) as usize;
        }
    }
    let total = outcomes.len() as f64;
    let allocation: Vec<f64> = head_counts.iter().map(|c| *c as f64 / (2.0 * total)).collect();
    let em_percent = 100.0 * em as f64 / total;
    let mean_gflops = rejector_gflops
        + consult_counts
            .iter()
            .zip(&params.gflops)
            .map(|(c, g)| g * (*c as f64 / total))
            .sum::<f64>();
    MetricsReport {
        mode,
        num_records: outcomes.len(),
        em_percent,
        expert_allocation_percent: 100.0 * (1.0 - allocation[0]),
        allocation,
        confusion: (1..n).map(|j| confusion_from(log, outcomes, j)).collect(),
        rates: rates_from(outcomes),
        mean_gflops_per_query: mean_gflops,
        gflops_per_em: gflops_per_em(mean_gflops, em_percent).ok(),
        betas: params.beta.clone(),
    }
}

/// Routes every record through `scorer` and tallies the system metrics.
pub fn evaluate_system<S: Scorer + ?Sized>(
    log: &[AgentPredictionRecord],
    scorer: &S,
    params: &CostParams,
    mode: AllocationMode,
    exec: Execution,
) -> Result<MetricsReport> {
    let outcomes = route(log, scorer, params, mode, exec)?;
    Ok(report_from(log, &outcomes, params, params.rejector_gflops, mode))
}

/// Per-head confusion buckets of per-head decisions against one expert.
pub fn confusion_matrix<S: Scorer + ?Sized>(
    log: &[AgentPredictionRecord],
    scorer: &S,
    params: &CostParams,
    expert: usize,
) -> Result<ConfusionMatrix> {
    if expert == 0 || expert >= scorer.num_agents() {
        return Err(Error::BadAgent {
            index: expert,
            num_agents: scorer.num_agents(),
        });
    }
    let outcomes = route(log, scorer, params, AllocationMode::PerHead, Execution::Serial)?;
    Ok(confusion_from(log, &outcomes, expert))
}

/// Query-level deferral rates: TP = main model wrong, deferred, system
/// answer right; FP = main model right, deferred, system answer wrong.
pub fn tpr_fpr<S: Scorer + ?Sized>(
    log: &[AgentPredictionRecord],
    scorer: &S,
    params: &CostParams,
    mode: AllocationMode,
) -> Result<Rates> {
    let outcomes = route(log, scorer, params, mode, Execution::Serial)?;
    Ok(rates_from(&outcomes))
}

/// Plurality vote for one head; ties go to the value of the lowest-index
/// agent among the tied values. Returns the value and the first agent
/// holding it.
fn vote(values: &[i64]) -> (i64, usize) {
    let mut counts: HashMap<i64, usize> = HashMap::new();
    for v in values {
        *counts.entry(*v).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let first = values.iter().position(|v| counts[v] == top).unwrap_or(0);
    (values[first], first)
}

/// Majority-vote ensemble over all agents. Every agent is queried, so the
/// compute per query is the sum of all agents' GFLOPs. Allocation credits
/// the first agent holding each winning index.
pub fn ensemble_baseline(log: &[AgentPredictionRecord], params: &CostParams) -> Result<MetricsReport> {
    let n = params.num_agents();
    if n < 2 {
        return Err(Error::BadDimension("ensemble needs at least two agents".into()));
    }
    check_log(log, n)?;
    let everyone = if n == MAX_AGENTS { u64::MAX } else { (1u64 << n) - 1 };
    let outcomes: Vec<Outcome> = log
        .iter()
        .map(|r| {
            let heads = |h: Head| vote(&r.predictions.iter().map(|p| p.get(h)).collect::<Vec<_>>());
            let (s, sa) = heads(Head::Start);
            let (e, ea) = heads(Head::End);
            Outcome {
                consulted: everyone,
                ..outcome(r, AgentId(sa), AgentId(ea), SpanPair::from_heads(s, e))
            }
        })
        .collect();
    Ok(report_from(log, &outcomes, params, 0.0, AllocationMode::PerHead))
}

/// Expert costs for a sweep point: `beta_1 = beta1` and
/// `beta_j = gflops_j / (divisor * gflops_1) * beta1` for later experts.
pub fn scaled_betas(beta1: f64, gflops: &[f64], divisor: f64) -> Result<Vec<f64>> {
    if gflops.len() < 2 {
        return Err(Error::BadDimension("need at least one expert".into()));
    }
    if gflops.len() > 2 && !(gflops[1] > 0.0 && divisor > 0.0) {
        return Err(Error::InvalidConfig(
            "cost ratio needs positive expert-1 GFLOPs and divisor".into(),
        ));
    }
    Ok((1..gflops.len())
        .map(|j| {
            if j == 1 {
                beta1
            } else {
                gflops[j] / (divisor * gflops[1]) * beta1
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub architecture: Architecture,
    pub head_mode: HeadMode,
    pub train: TrainConfig,
    pub mode: AllocationMode,
    pub cost_ratio_divisor: f64,
}

/// One point of an EM / allocation / compute curve. Percentages throughout;
/// failed points carry NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub beta1: f64,
    pub em: f64,
    pub expert_alloc: f64,
    pub alloc: Vec<f64>,
    /// `+inf` when EM is zero.
    pub gflops_per_em: f64,
}

impl CurveRow {
    fn failed(beta1: f64, n: usize) -> Self {
        CurveRow {
            beta1,
            em: f64::NAN,
            expert_alloc: f64::NAN,
            alloc: vec![f64::NAN; n],
            gflops_per_em: f64::NAN,
        }
    }

    pub fn from_report(beta1: f64, r: &MetricsReport) -> Self {
        CurveRow {
            beta1,
            em: r.em_percent,
            expert_alloc: r.expert_allocation_percent,
            alloc: r.allocation.iter().map(|a| 100.0 * a).collect(),
            gflops_per_em: r.gflops_per_em.unwrap_or(f64::INFINITY),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.em.is_nan()
    }
}

/// Trains a fresh seeded rejector for each `beta1` and evaluates it.
/// A grid point whose training fails yields a NaN row.
pub fn beta_sweep(
    train_log: &[AgentPredictionRecord],
    eval_log: &[AgentPredictionRecord],
    base: &CostParams,
    grid: &[f64],
    config: &SweepConfig,
    exec: Execution,
) -> Result<Vec<CurveRow>> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidConfig(
            "beta grid must be nonempty and strictly ascending".into(),
        ));
    }
    config.train.validate()?;
    let n = base.num_agents();
    check_log(train_log, n)?;
    check_log(eval_log, n)?;
    let d = train_log[0].features.len();
    grid.iter()
        .map(|&beta1| {
            let mut params = base.clone();
            params.beta = scaled_betas(beta1, &base.gflops, config.cost_ratio_divisor)?;
            let point = || -> Result<MetricsReport> {
                let model = RejectorModel::init(config.architecture, config.head_mode, d, n, config.train.seed)?;
                let (model, _) = train(train_log, model, &config.train, &params, exec)?;
                evaluate_system(eval_log, &model, &params, config.mode, exec)
            };
            Ok(match point() {
                Ok(report) => CurveRow::from_report(beta1, &report),
                Err(_) => CurveRow::failed(beta1, n),
            })
        })
        .collect()
}

fn curve_header(num_agents: usize) -> Vec<String> {
    let mut h = vec!["beta1".to_string(), "em".into(), "expert_alloc".into()];
    h.extend((0..num_agents).map(|j| format!("alloc_agent{j}")));
    h.push("gflops_per_em".into());
    h
}

/// Writes curve rows as CSV, preceded by `# key=value` comment lines.
pub fn write_curve(rows: &[CurveRow], num_agents: usize, comments: &[(&str, String)], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (k, v) in comments {
        writeln!(file, "# {k}={v}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(curve_header(num_agents))?;
    for r in rows {
        if r.alloc.len() != num_agents {
            return Err(Error::DimensionMismatch {
                what: "curve allocation",
                expected: num_agents,
                actual: r.alloc.len(),
            });
        }
        let mut rec = vec![r.beta1.to_string(), r.em.to_string(), r.expert_alloc.to_string()];
        rec.extend(r.alloc.iter().map(|a| a.to_string()));
        rec.push(r.gflops_per_em.to_string());
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a file written by [`write_curve`]; comment lines are skipped.
pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let width = r.headers()?.len();
    if width < 5 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "curve header too short".into(),
        });
    }
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: k + 2,
                reason: e.to_string(),
            })?;
        if vals.len() != width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: k + 2,
                reason: "wrong field count".into(),
            });
        }
        rows.push(CurveRow {
            beta1: vals[0],
            em: vals[1],
            expert_alloc: vals[2],
            alloc: vals[3..width - 1].to_vec(),
            gflops_per_em: vals[width - 1],
        });
    }
    Ok(rows)
}
