//! File formats and run configuration.
//!
//! Agent logs are JSON Lines, one record per line:
//!
//! ```text
//! {"query_id":"q1","features":[0.1,0.2],"gold":[3,7],"predictions":[[3,7],[2,7],[3,8]]}
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::scaled_betas;
use crate::oracle::{ClusterSpec, SyntheticWorld};
use crate::rejector::{AllocationMode, Architecture, HeadMode};
use crate::training::{TraceRow, TrainConfig};
use crate::types::{AgentPredictionRecord, CostParams, ValidationMode};

/// Reads a JSONL agent log in file order. Blank lines are skipped.
pub fn load_agent_log(path: &Path) -> Result<Vec<AgentPredictionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<AgentPredictionRecord> = Vec::new();
    let mut seen = HashSet::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AgentPredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason: e.to_string(),
        })?;
        let dims = |reason: String| Error::InconsistentDims {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        if record.predictions.is_empty() {
            return Err(dims("no predictions".into()));
        }
        if let Some(first) = records.first() {
            if record.predictions.len() != first.predictions.len() {
                return Err(dims(format!(
                    "{} prediction pairs, expected {}",
                    record.predictions.len(),
                    first.predictions.len()
                )));
            }
            if record.features.len() != first.features.len() {
                return Err(dims(format!(
                    "{} features, expected {}",
                    record.features.len(),
                    first.features.len()
                )));
            }
        }
        if record.features.iter().any(|f| !f.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                reason: "non-finite feature".into(),
            });
        }
        if !seen.insert(record.query_id.clone()) {
            return Err(Error::DuplicateQueryId {
                path: path.to_path_buf(),
                line: line_no,
                id: record.query_id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_agent_log(records: &[AgentPredictionRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the training trace as CSV with `# key=value` header comments.
pub fn write_trace(rows: &[TraceRow], comments: &[(&str, String)], path: &Path) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for (k, v) in comments {
        writeln!(file, "# {k}={v}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["step", "epoch", "lr", "mean_loss"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            r.lr.to_string(),
            r.mean_loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pretty JSON for any serializable artifact.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// World file: the world plus the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub config_hash: String,
    pub seed: u64,
    pub world: SyntheticWorld,
}

pub fn load_world(path: &Path) -> Result<SyntheticWorld> {
    let file: WorldFile = read_json(path)?;
    file.world.validate()?;
    Ok(file.world)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDecl {
    pub name: String,
    pub gflops: f64,
    /// Ignored for the main model.
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

fn agent(name: &str, gflops: f64) -> AgentDecl {
    AgentDecl {
        name: name.into(),
        gflops,
        alpha: 1.0,
        beta: 0.0,
    }
}

/// Every field has a default; command-line flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub log: Option<PathBuf>,
    pub eval_log: Option<PathBuf>,
    pub world: Option<PathBuf>,
    pub model_in: Option<PathBuf>,
    pub model_out: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Main model first, then the experts.
    pub agents: Vec<AgentDecl>,
    pub rejector_gflops: f64,
    pub train: TrainConfig,
    pub nu: f64,
    pub mode: AllocationMode,
    pub validation: ValidationMode,
    pub beta_per_head: bool,
    pub seed: u64,
    pub architecture: Architecture,
    pub head_mode: HeadMode,
    pub cost_ratio_divisor: f64,
    /// Records sampled by `simulate` for each of the train and eval logs.
    pub n_records: usize,
    pub cluster: ClusterSpec,
    pub beta_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            log: None,
            eval_log: None,
            world: None,
            model_in: None,
            model_out: None,
            output_dir: PathBuf::from("out"),
            agents: vec![
                agent("Llama-3.2-1B", 373.66),
                agent("ALBERT-Base", 32.68),
                agent("ALBERT-XXL", 928.08),
            ],
            rejector_gflops: 0.15,
            train: TrainConfig::default(),
            nu: 1.0,
            mode: AllocationMode::Joint,
            validation: ValidationMode::Strict,
            beta_per_head: true,
            seed: 0,
            architecture: Architecture::Linear,
            head_mode: HeadMode::Unconstrained,
            cost_ratio_divisor: 20.0,
            n_records: 20_000,
            cluster: ClusterSpec::acceptance(),
            beta_grid: (0..=10).map(|k| k as f64 * 0.05).collect(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// Cost parameters from the agent declarations, validated in the
    /// configured mode. The flag is set when a permissive check let
    /// `alpha_j + beta_j > 1` through.
    pub fn cost_params(&self) -> Result<(CostParams, bool)> {
        if self.agents.len() < 2 {
            return Err(Error::InvalidConfig("need a main model and at least one expert".into()));
        }
        let experts = &self.agents[1..];
        let mut params = CostParams::new(
            experts.iter().map(|a| a.alpha).collect(),
            experts.iter().map(|a| a.beta).collect(),
        )
        .with_gflops(self.agents.iter().map(|a| a.gflops).collect(), self.rejector_gflops);
        params.beta_per_head = self.beta_per_head;
        let checked = params.validate(self.validation)?;
        Ok((checked.params, checked.tau_warning))
    }

    /// Cost parameters with expert betas derived from `beta1` and the
    /// GFLOPs ratio.
    pub fn cost_params_for_beta1(&self, beta1: f64) -> Result<(CostParams, bool)> {
        let mut cfg = self.clone();
        let gflops: Vec<f64> = self.agents.iter().map(|a| a.gflops).collect();
        for (a, b) in cfg.agents[1..]
            .iter_mut()
            .zip(scaled_betas(beta1, &gflops, self.cost_ratio_divisor)?)
        {
            a.beta = b;
        }
        cfg.cost_params()
    }

    /// Training settings with the run seed and surrogate parameter applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            nu: self.nu,
            ..self.train.clone()
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))[..16].to_string()
    }
}
