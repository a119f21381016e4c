//! Mini-batch minimization of the surrogate deferral loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{head_taus, weighted_gradient, weighted_surrogate, SurrogateSpec};
use crate::par::{self, Execution};
use crate::rejector::{RejectorModel, Scorer};
use crate::types::{AgentPredictionRecord, CostParams};

/// Records per work unit inside a batch. Fixed so serial and parallel runs
/// sum gradients in the same order.
const CHUNK: usize = 8;

/// Magnitude floor in the relative error of [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    LinearDecay,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub seed: u64,
    pub nu: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            schedule: Schedule::LinearDecay,
            momentum: 0.9,
            seed: 0,
            nu: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction must be in [0, 1], got {}",
                self.warmup_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return bad(format!("nu must be >= 0, got {}", self.nu));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Learning rate at `step` of `total_steps`.
///
/// Linear ramp from 0 to the base rate over the first
/// `ceil(warmup_fraction * total_steps)` steps, then linear decay to 0 at
/// `total_steps`.
pub fn schedule_lr(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let lr = config.learning_rate;
    if config.schedule == Schedule::Constant {
        return lr;
    }
    let warmup = ((config.warmup_fraction * total_steps as f64).ceil() as usize).min(total_steps);
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    let decay_span = (total_steps - warmup).max(1);
    lr * total_steps.saturating_sub(step) as f64 / decay_span as f64
}

struct Prepared<'a> {
    record: &'a AgentPredictionRecord,
    taus: [Vec<f64>; 2],
}

fn prepare<'a>(
    records: impl IntoIterator<Item = &'a AgentPredictionRecord>,
    model: &RejectorModel,
    params: &CostParams,
) -> Result<Vec<Prepared<'a>>> {
    if params.num_agents() != model.num_agents() {
        return Err(Error::DimensionMismatch {
            what: "cost params agents",
            expected: model.num_agents(),
            actual: params.num_agents(),
        });
    }
    records
        .into_iter()
        .map(|record| {
            record.check_dims(model.input_dim(), model.num_agents())?;
            Ok(Prepared {
                record,
                taus: head_taus(record, params),
            })
        })
        .collect()
}

/// Summed loss and gradient of one record.
fn record_objective(model: &RejectorModel, p: &Prepared, spec: &SurrogateSpec, grad: &mut [f64]) -> Result<f64> {
    let s = model.score(&p.record.features)?;
    let loss = weighted_surrogate(&s.start, &p.taus[0], spec) + weighted_surrogate(&s.end, &p.taus[1], spec);
    let gs = weighted_gradient(&s.start, &p.taus[0], spec);
    let ge = weighted_gradient(&s.end, &p.taus[1], spec);
    model.accumulate_gradient(&p.record.features, &gs, &ge, grad)?;
    Ok(loss)
}

/// Mean loss and mean gradient over `batch`.
fn batch_objective(
    model: &RejectorModel,
    batch: &[&Prepared],
    spec: &SurrogateSpec,
    exec: Execution,
) -> Result<(f64, Vec<f64>)> {
    let chunks: Vec<&[&Prepared]> = batch.chunks(CHUNK).collect();
    let partial = par::map(&chunks, exec, |chunk| -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; model.num_params()];
        let mut loss = 0.0;
        for p in chunk.iter() {
            loss += record_objective(model, p, spec, &mut grad)?;
        }
        Ok((loss, grad))
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    for part in partial {
        let (l, g) = part?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Trains `model` on `dataset` with momentum SGD.
///
/// Records are first sorted by `query_id`, then reshuffled each epoch from
/// `config.seed`, so the result does not depend on ingestion order.
pub fn train(
    dataset: &[AgentPredictionRecord],
    mut model: RejectorModel,
    config: &TrainConfig,
    params: &CostParams,
    exec: Execution,
) -> Result<(RejectorModel, Vec<TraceRow>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let spec = SurrogateSpec::new(config.nu, model.num_agents())?;
    let mut canonical: Vec<&AgentPredictionRecord> = dataset.iter().collect();
    canonical.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let prepared = prepare(canonical, &model, params)?;

    let steps_per_epoch = prepared.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = vec![0.0; model.num_params()];
    let mut trace = Vec::with_capacity(total_steps);
    let mut step = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<&Prepared> = prepared.iter().collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) = batch_objective(&model, batch, &spec, exec)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            let lr = schedule_lr(step, total_steps, config);
            for ((w, v), g) in model.weights_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v + g;
                *w -= lr * *v;
            }
            trace.push(TraceRow {
                step,
                epoch,
                lr,
                mean_loss: loss,
            });
            step += 1;
        }
    }
    Ok((model, trace))
}

/// Mean surrogate loss of `model` over `records`.
pub fn mean_surrogate_loss(
    model: &RejectorModel,
    records: &[AgentPredictionRecord],
    params: &CostParams,
    nu: f64,
    exec: Execution,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let spec = SurrogateSpec::new(nu, model.num_agents())?;
    let prepared = prepare(records, model, params)?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    Ok(batch_objective(model, &refs, &spec, exec)?.0)
}

/// Largest relative difference between the analytic batch gradient and
/// central finite differences with step `epsilon`.
///
/// Checks every weight when the model has at most 256, otherwise a seeded
/// random subset of 256. The relative error uses
/// `max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)` as denominator.
pub fn grad_check(
    model: &RejectorModel,
    batch: &[AgentPredictionRecord],
    config: &TrainConfig,
    params: &CostParams,
    epsilon: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be in [1e-7, 1e-3], got {epsilon}"
        )));
    }
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let spec = SurrogateSpec::new(config.nu, model.num_agents())?;
    let prepared = prepare(batch, model, params)?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let exec = Execution::Serial;
    let (_, analytic) = batch_objective(model, &refs, &spec, exec)?;

    let mut coords: Vec<usize> = (0..model.num_params()).collect();
    if coords.len() > 256 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        coords.shuffle(&mut rng);
        coords.truncate(256);
    }
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for k in coords {
        let w = model.weights()[k];
        probe.weights_mut()[k] = w + epsilon;
        let plus = batch_objective(&probe, &refs, &spec, exec)?.0;
        probe.weights_mut()[k] = w - epsilon;
        let minus = batch_objective(&probe, &refs, &spec, exec)?.0;
        probe.weights_mut()[k] = w;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[k];
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rejector::{init_model, Architecture};
    use crate::types::SpanPair;
    use rand::Rng;

    fn random_log(n: usize, d: usize, agents: usize, seed: u64) -> Vec<AgentPredictionRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let gold = SpanPair::new(rng.random_range(0..5), rng.random_range(5..9)).unwrap();
                let predictions = (0..agents)
                    .map(|_| {
                        let s = if rng.random_bool(0.6) {
                            gold.start()
                        } else {
                            gold.start() + 1
                        };
                        let e = if rng.random_bool(0.6) {
                            gold.end()
                        } else {
                            gold.end() + 1
                        };
                        SpanPair::new(s, e).unwrap()
                    })
                    .collect();
                AgentPredictionRecord {
                    query_id: format!("q{i:04}"),
                    features: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    gold,
                    predictions,
                }
            })
            .collect()
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            warmup_fraction: 0.1,
            ..Default::default()
        };
        let total = 100;
        assert_eq!(schedule_lr(0, total, &cfg), 0.0);
        assert_eq!(schedule_lr(5, total, &cfg), 0.05);
        assert_eq!(schedule_lr(10, total, &cfg), 0.1);
        // One step left of a 90-step decay span.
        assert!((schedule_lr(99, total, &cfg) - 0.1 / 90.0).abs() < 1e-15);
        let constant = TrainConfig {
            schedule: Schedule::Constant,
            ..cfg.clone()
        };
        assert_eq!(schedule_lr(0, total, &constant), 0.1);
        assert_eq!(schedule_lr(99, total, &constant), 0.1);
        let no_warmup = TrainConfig {
            warmup_fraction: 0.0,
            ..cfg
        };
        assert_eq!(schedule_lr(0, total, &no_warmup), 0.1);
    }

    #[test]
    fn config_validation() {
        let log = random_log(4, 2, 3, 0);
        let model = init_model(Architecture::Linear, 2, 3, 0).unwrap();
        let params = CostParams::new(vec![1.0, 1.0], vec![0.0, 0.0]);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(
            train(&log, model.clone(), &cfg, &params, Execution::Serial),
            Err(Error::InvalidConfig(_))
        ));
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&[], model.clone(), &cfg, &params, Execution::Serial),
            Err(Error::EmptyDataset)
        ));
        let wrong_d = init_model(Architecture::Linear, 3, 3, 0).unwrap();
        assert!(matches!(
            train(&log, wrong_d, &cfg, &params, Execution::Serial),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let log = random_log(16, 2, 3, 0);
        let model = init_model(Architecture::Linear, 2, 3, 0).unwrap();
        let params = CostParams::new(vec![1.0, 1.0], vec![0.0, 0.0]);
        let cfg = TrainConfig {
            learning_rate: 1e200,
            warmup_fraction: 0.0,
            schedule: Schedule::Constant,
            nu: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            train(&log, model, &cfg, &params, Execution::Serial),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_order_free() {
        let log = random_log(100, 3, 3, 1);
        let model = init_model(Architecture::Mlp { hidden: 6 }, 3, 3, 2).unwrap();
        let params = CostParams::new(vec![1.0, 0.8], vec![0.0, 0.1]);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 7,
            learning_rate: 0.05,
            ..Default::default()
        };
        let (a, ta) = train(&log, model.clone(), &cfg, &params, Execution::Serial).unwrap();
        let (b, tb) = train(&log, model.clone(), &cfg, &params, Execution::Parallel).unwrap();
        let mut reversed = log.clone();
        reversed.reverse();
        let (c, _) = train(&reversed, model, &cfg, &params, Execution::Serial).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a.weights(), c.weights());
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 3 * 100usize.div_ceil(7));
        assert!(ta.iter().all(|r| r.mean_loss.is_finite() && r.mean_loss >= 0.0));
    }

    #[test]
    fn learns_always_correct_expert() {
        // Expert 1 always right, main model always wrong, no consultation cost.
        let mut log = random_log(400, 2, 3, 3);
        for r in &mut log {
            r.predictions[0] = SpanPair::new(r.gold.start() + 1, r.gold.end() + 1).unwrap();
            r.predictions[1] = r.gold;
        }
        let params = CostParams::new(vec![1.0, 1.0], vec![0.0, 0.0]);
        let model = init_model(Architecture::Linear, 2, 3, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 0.05,
            ..Default::default()
        };
        let (m, _) = train(&log, model, &cfg, &params, Execution::default()).unwrap();
        let to_expert = log
            .iter()
            .filter(|r| {
                let a = crate::rejector::allocate(&m, r, crate::rejector::AllocationMode::Joint).unwrap();
                a.start_agent.0 == 1
            })
            .count();
        assert!(to_expert as f64 >= 0.99 * log.len() as f64, "{to_expert}/400");
    }

    #[test]
    fn grad_check_examples() {
        let log = random_log(12, 4, 3, 5);
        let params = CostParams::new(vec![1.0, 0.7], vec![0.0, 0.2]);
        let model = init_model(Architecture::Linear, 4, 3, 6).unwrap();
        for nu in [1.0, 2.0, 0.5] {
            let cfg = TrainConfig {
                nu,
                ..Default::default()
            };
            let err = grad_check(&model, &log, &cfg, &params, 1e-5).unwrap();
            assert!(err < 1e-5, "nu={nu}: {err}");
        }
        let mlp = init_model(Architecture::Mlp { hidden: 40 }, 4, 3, 6).unwrap();
        assert!(mlp.num_params() > 256);
        let err = grad_check(&mlp, &log, &TrainConfig::default(), &params, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");

        // alpha + beta = 1 and everyone wrong: every tau is zero.
        let mut dead = log.clone();
        for r in &mut dead {
            for p in &mut r.predictions {
                *p = SpanPair::new(r.gold.start() + 1, r.gold.end() + 1).unwrap();
            }
        }
        let zero = CostParams::new(vec![1.0, 0.0], vec![0.0, 1.0]);
        let err = grad_check(&model, &dead, &TrainConfig::default(), &zero, 1e-5).unwrap();
        assert_eq!(err, 0.0);
        assert!(grad_check(&model, &log, &TrainConfig::default(), &params, 1e-2).is_err());
    }
}
