//! Two-headed rejector: a linear or one-hidden-layer scorer mapping a
//! feature vector to `J + 1` agent scores per head, the argmax decision
//! rules, and the on-disk model format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{AgentId, AgentPredictionRecord, SpanPair};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

/// Whether the main model's score is learned or pinned to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    #[default]
    Unconstrained,
    PinnedZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationMode {
    /// Start and end heads are routed independently.
    PerHead,
    /// One agent answers both heads (argmax of summed scores).
    #[default]
    Joint,
}

/// Agent scores for both heads; larger is preferred.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScores {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// Anything that can score agents for a feature vector.
pub trait Scorer: Sync {
    fn num_agents(&self) -> usize;
    fn score(&self, features: &[f64]) -> Result<HeadScores>;
}

/// Scorer that always routes to one agent. Used for endpoint evaluations.
#[derive(Debug, Clone, Copy)]
pub struct ForcedAgent {
    pub agent: AgentId,
    pub num_agents: usize,
}

impl Scorer for ForcedAgent {
    fn num_agents(&self) -> usize {
        self.num_agents
    }

    fn score(&self, _features: &[f64]) -> Result<HeadScores> {
        let mut v = vec![0.0; self.num_agents];
        v[self.agent.0] = 1.0;
        Ok(HeadScores {
            start: v.clone(),
            end: v,
        })
    }
}

/// Scorer backed by a closure over the features.
pub struct FnScorer<F> {
    pub num_agents: usize,
    pub f: F,
}

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&[f64]) -> HeadScores + Sync,
{
    fn num_agents(&self) -> usize {
        self.num_agents
    }

    fn score(&self, features: &[f64]) -> Result<HeadScores> {
        Ok((self.f)(features))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectorModel {
    architecture: Architecture,
    head_mode: HeadMode,
    input_dim: usize,
    num_agents: usize,
    seed: u64,
    /// Start head parameters followed by end head parameters. Per head:
    /// linear `W (n x d), b (n)`; mlp `W1 (h x d), b1 (h), W2 (n x h), b2 (n)`.
    /// Matrices are row-major.
    weights: Vec<f64>,
}

fn head_len(arch: Architecture, d: usize, n: usize) -> usize {
    match arch {
        Architecture::Linear => n * d + n,
        Architecture::Mlp { hidden } => hidden * d + hidden + n * hidden + n,
    }
}

fn check_shape(arch: Architecture, d: usize, n: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::BadDimension("input_dim must be >= 1".into()));
    }
    if n < 2 {
        return Err(Error::BadDimension(format!("need at least 2 agents, got {n}")));
    }
    if let Architecture::Mlp { hidden: 0 } = arch {
        return Err(Error::BadDimension("hidden width must be >= 1".into()));
    }
    Ok(())
}

/// Initializes an unconstrained model with uniform weights of half-width
/// `1/sqrt(fan_in)` and zero biases.
pub fn init_model(architecture: Architecture, input_dim: usize, num_agents: usize, seed: u64) -> Result<RejectorModel> {
    RejectorModel::init(architecture, HeadMode::Unconstrained, input_dim, num_agents, seed)
}

impl RejectorModel {
    pub fn init(
        architecture: Architecture,
        head_mode: HeadMode,
        input_dim: usize,
        num_agents: usize,
        seed: u64,
    ) -> Result<Self> {
        check_shape(architecture, input_dim, num_agents)?;
        let (d, n) = (input_dim, num_agents);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(2 * head_len(architecture, d, n));
        let mut fill = |w: &mut Vec<f64>, count: usize, fan_in: usize| {
            let half = 1.0 / (fan_in as f64).sqrt();
            w.extend((0..count).map(|_| rng.random_range(-half..half)));
        };
        for _ in 0..2 {
            match architecture {
                Architecture::Linear => {
                    fill(&mut weights, n * d, d);
                    weights.extend(std::iter::repeat_n(0.0, n));
                }
                Architecture::Mlp { hidden } => {
                    fill(&mut weights, hidden * d, d);
                    weights.extend(std::iter::repeat_n(0.0, hidden));
                    fill(&mut weights, n * hidden, hidden);
                    weights.extend(std::iter::repeat_n(0.0, n));
                }
            }
        }
        Ok(RejectorModel {
            architecture,
            head_mode,
            input_dim,
            num_agents,
            seed,
            weights,
        })
    }

    pub fn from_weights(
        architecture: Architecture,
        head_mode: HeadMode,
        input_dim: usize,
        num_agents: usize,
        seed: u64,
        weights: Vec<f64>,
    ) -> Result<Self> {
        check_shape(architecture, input_dim, num_agents)?;
        let expected = 2 * head_len(architecture, input_dim, num_agents);
        if weights.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "weights",
                expected,
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("weights must be finite".into()));
        }
        Ok(RejectorModel {
            architecture,
            head_mode,
            input_dim,
            num_agents,
            seed,
            weights,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    fn head_params(&self, head: usize) -> &[f64] {
        let len = self.weights.len() / 2;
        &self.weights[head * len..(head + 1) * len]
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "features",
                expected: self.input_dim,
                actual: features.len(),
            });
        }
        Ok(())
    }

    fn forward_head(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let (d, n) = (self.input_dim, self.num_agents);
        let mut out = match self.architecture {
            Architecture::Linear => affine(&p[..n * d], &p[n * d..], x),
            Architecture::Mlp { hidden } => {
                let (w1, rest) = p.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(n * hidden);
                let mut a = affine(w1, b1, x);
                a.iter_mut().for_each(|v| *v = v.max(0.0));
                affine(w2, b2, &a)
            }
        };
        if self.head_mode == HeadMode::PinnedZero {
            out[0] = 0.0;
        }
        out
    }

    /// Adds `d(upstream . scores) / d weights` for one head into `grad`.
    fn backward_head(&self, p: &[f64], x: &[f64], upstream: &[f64], grad: &mut [f64]) {
        let (d, n) = (self.input_dim, self.num_agents);
        let mut g = upstream.to_vec();
        if self.head_mode == HeadMode::PinnedZero {
            g[0] = 0.0;
        }
        match self.architecture {
            Architecture::Linear => {
                let (gw, gb) = grad.split_at_mut(n * d);
                outer_add(gw, gb, &g, x);
            }
            Architecture::Mlp { hidden } => {
                let (w1, rest) = p.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let w2 = &rest[..n * hidden];
                let z = affine(w1, b1, x);
                let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();

                let (gw1, grest) = grad.split_at_mut(hidden * d);
                let (gb1, grest) = grest.split_at_mut(hidden);
                let (gw2, gb2) = grest.split_at_mut(n * hidden);
                outer_add(gw2, gb2, &g, &a);

                let dz: Vec<f64> = (0..hidden)
                    .map(|j| {
                        if z[j] > 0.0 {
                            (0..n).map(|k| g[k] * w2[k * hidden + j]).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                outer_add(gw1, gb1, &dz, x);
            }
        }
    }

    /// Accumulates the gradient of `g_start . r̄_start + g_end . r̄_end`
    /// with respect to the weights into `grad` (same layout as the weights).
    pub fn accumulate_gradient(
        &self,
        features: &[f64],
        g_start: &[f64],
        g_end: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_features(features)?;
        if grad.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                what: "gradient buffer",
                expected: self.weights.len(),
                actual: grad.len(),
            });
        }
        let len = self.weights.len() / 2;
        let (gs, ge) = grad.split_at_mut(len);
        self.backward_head(self.head_params(0), features, g_start, gs);
        self.backward_head(self.head_params(1), features, g_end, ge);
        Ok(())
    }
}

impl Scorer for RejectorModel {
    fn num_agents(&self) -> usize {
        self.num_agents
    }

    fn score(&self, features: &[f64]) -> Result<HeadScores> {
        self.check_features(features)?;
        Ok(HeadScores {
            start: self.forward_head(self.head_params(0), features),
            end: self.forward_head(self.head_params(1), features),
        })
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(k, bk)| {
            bk + w[k * cols..(k + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .collect()
}

fn outer_add(gw: &mut [f64], gb: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (k, gk) in g.iter().enumerate() {
        if *gk == 0.0 {
            continue;
        }
        gb[k] += gk;
        for (w, xi) in gw[k * cols..(k + 1) * cols].iter_mut().zip(x) {
            *w += gk * xi;
        }
    }
}

/// Index of the largest score; ties go to the lowest index (main model first).
pub fn decide_per_head(rbar: &[f64]) -> AgentId {
    let mut best = 0;
    for (j, s) in rbar.iter().enumerate().skip(1) {
        if *s > rbar[best] {
            best = j;
        }
    }
    AgentId(best)
}

/// Single-agent rule: argmax of the summed head scores.
pub fn decide_joint(rbar_start: &[f64], rbar_end: &[f64]) -> AgentId {
    let sum: Vec<f64> = rbar_start.iter().zip(rbar_end).map(|(a, b)| a + b).collect();
    decide_per_head(&sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Allocation {
    pub start_agent: AgentId,
    pub end_agent: AgentId,
    /// Start index from `start_agent`, end index from `end_agent`.
    pub span: SpanPair,
}

impl Allocation {
    pub fn from_scores(scores: &HeadScores, record: &AgentPredictionRecord, mode: AllocationMode) -> Self {
        let (s, e) = match mode {
            AllocationMode::Joint => {
                let a = decide_joint(&scores.start, &scores.end);
                (a, a)
            }
            AllocationMode::PerHead => (decide_per_head(&scores.start), decide_per_head(&scores.end)),
        };
        Allocation {
            start_agent: s,
            end_agent: e,
            span: SpanPair::from_heads(record.prediction(s).start(), record.prediction(e).end()),
        }
    }

    pub fn is_joint(&self) -> bool {
        self.start_agent == self.end_agent
    }

    pub fn deferred(&self) -> bool {
        self.start_agent.is_expert() || self.end_agent.is_expert()
    }
}

/// Routes one record and returns the chosen agent(s) and answer span.
pub fn allocate<S: Scorer + ?Sized>(
    scorer: &S,
    record: &AgentPredictionRecord,
    mode: AllocationMode,
) -> Result<Allocation> {
    if record.num_agents() != scorer.num_agents() {
        return Err(Error::DimensionMismatch {
            what: "predictions",
            expected: scorer.num_agents(),
            actual: record.num_agents(),
        });
    }
    let scores = scorer.score(&record.features)?;
    Ok(Allocation::from_scores(&scores, record, mode))
}

const MAGIC: &[u8; 4] = b"EQDR";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 1 + 4 + 4 + 4 + 8 + 8;
const CHECKSUM_LEN: usize = 32;

impl RejectorModel {
    /// Little-endian binary encoding: header, row-major weights, SHA-256 of
    /// the weight payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (tag, hidden) = match self.architecture {
            Architecture::Linear => (0u8, 0u32),
            Architecture::Mlp { hidden } => (1u8, hidden as u32),
        };
        let mode = match self.head_mode {
            HeadMode::Unconstrained => 0u8,
            HeadMode::PinnedZero => 1u8,
        };
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.weights.len() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(tag);
        out.push(mode);
        out.extend_from_slice(&hidden.to_le_bytes());
        out.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_agents as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        let payload_start = out.len();
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let digest = Sha256::digest(&out[payload_start..]);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::FormatVersionMismatch(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(bad("file shorter than header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("version {version}, expected {FORMAT_VERSION}")));
        }
        let architecture = match (bytes[8], u32_at(10)) {
            (0, _) => Architecture::Linear,
            (1, h) => Architecture::Mlp { hidden: h as usize },
            (t, _) => return Err(bad(&format!("unknown architecture tag {t}"))),
        };
        let head_mode = match bytes[9] {
            0 => HeadMode::Unconstrained,
            1 => HeadMode::PinnedZero,
            t => return Err(bad(&format!("unknown head mode {t}"))),
        };
        let d = u32_at(14) as usize;
        let n = u32_at(18) as usize;
        let seed = u64_at(22);
        let count = u64_at(30) as usize;
        check_shape(architecture, d, n).map_err(|e| bad(&e.to_string()))?;
        if count != 2 * head_len(architecture, d, n) {
            return Err(bad("weight count does not match header dimensions"));
        }
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != 8 * count + CHECKSUM_LEN {
            return Err(Error::ChecksumMismatch);
        }
        let (data, checksum) = payload.split_at(8 * count);
        if Sha256::digest(data).as_slice() != checksum {
            return Err(Error::ChecksumMismatch);
        }
        let weights = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_weights(architecture, head_mode, d, n, seed, weights)
    }
}

pub fn save_model(model: &RejectorModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<RejectorModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RejectorModel::from_bytes(&bytes)
}
