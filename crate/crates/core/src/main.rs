use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use eqa_defer::eval::{beta_sweep, ensemble_baseline, evaluate_system, write_curve, SweepConfig};
use eqa_defer::io::{load_agent_log, load_world, write_agent_log, write_json, write_trace, RunConfig, WorldFile};
use eqa_defer::oracle::{
    bayes_allocation, bayes_risk, bound_check, empirical_deferral_risk, exhaustive_agreement, generate_world,
    sample_log, world_scores,
};
use eqa_defer::rejector::{allocate, load_model, save_model, AllocationMode, ForcedAgent, RejectorModel, Scorer};
use eqa_defer::training::train;
use eqa_defer::{AgentId, AgentPredictionRecord, CostParams, Execution, SpanPair, ValidationMode};

#[derive(Parser)]
#[command(name = "eqa-defer", version, about = "Cost-aware query allocation for extractive QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and sample train/eval logs from it.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Records per log.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a rejector on a log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Score a rejector (or a forced agent, or the vote ensemble) on a log.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["model", "ensemble"])]
        force_agent: Option<usize>,
        #[arg(long)]
        ensemble: bool,
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Train and evaluate one rejector per beta1 value and write the curve.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        eval_log: Option<PathBuf>,
        /// Comma-separated ascending beta1 values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bayes-optimal allocation and risk on a world.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: Option<PathBuf>,
        /// Also check the closed-form rule against brute force on a grid.
        #[arg(long)]
        agreement: bool,
    },
    /// Both sides of the surrogate consistency bound for a model on a world.
    Bound {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Route a single query.
    Allocate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        features: Vec<f64>,
        /// Per-agent spans as `start:end`, comma-separated, main model first.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        predictions: Vec<String>,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, conflicts_with = "permissive")]
    strict: bool,
    #[arg(long)]
    permissive: bool,
    #[arg(long)]
    nu: Option<f64>,
    /// Expert-1 cost; later experts scale by their GFLOPs ratio.
    #[arg(long)]
    beta1: Option<f64>,
    /// Disable data parallelism.
    #[arg(long)]
    serial: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Joint,
    PerHead,
}

struct Run {
    cfg: RunConfig,
    params: CostParams,
    exec: Execution,
    hash: String,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(nu) = common.nu {
            cfg.nu = nu;
        }
        if let Some(m) = common.mode {
            cfg.mode = match m {
                ModeArg::Joint => AllocationMode::Joint,
                ModeArg::PerHead => AllocationMode::PerHead,
            };
        }
        if common.strict {
            cfg.validation = ValidationMode::Strict;
        }
        if common.permissive {
            cfg.validation = ValidationMode::Permissive;
        }
        let (params, warn) = match common.beta1 {
            Some(b) => cfg.cost_params_for_beta1(b)?,
            None => cfg.cost_params()?,
        };
        if warn {
            eprintln!("warning: alpha_j + beta_j > 1 for some expert; tau weights can be negative");
        }
        let exec = if common.serial {
            Execution::Serial
        } else {
            Execution::default()
        };
        let hash = cfg.hash();
        Ok(Run {
            cfg,
            params,
            exec,
            hash,
        })
    }

    fn out_path(&self, explicit: Option<PathBuf>, name: &str) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p);
        }
        std::fs::create_dir_all(&self.cfg.output_dir)
            .with_context(|| format!("creating {}", self.cfg.output_dir.display()))?;
        Ok(self.cfg.output_dir.join(name))
    }

    fn stamp(&self) -> Vec<(&'static str, String)> {
        vec![("config_hash", self.hash.clone()), ("seed", self.cfg.seed.to_string())]
    }

    fn log(&self, explicit: Option<PathBuf>, fallback: Option<&PathBuf>) -> Result<Vec<AgentPredictionRecord>> {
        let path = explicit
            .or_else(|| fallback.cloned())
            .context("no log given (use --log or the config)")?;
        let log = load_agent_log(&path)?;
        if let Some(r) = log.first() {
            if r.num_agents() != self.params.num_agents() {
                bail!(
                    "log {} has {} agents but the config declares {}",
                    path.display(),
                    r.num_agents(),
                    self.params.num_agents()
                );
            }
        }
        Ok(log)
    }

    fn model(&self, explicit: Option<PathBuf>) -> Result<RejectorModel> {
        let path = explicit
            .or_else(|| self.cfg.model_in.clone())
            .context("no model given (use --model)")?;
        Ok(load_model(&path)?)
    }
}

fn print(value: &serde_json::Value) {
    let _ = writeln!(
        std::io::stdout(),
        "{}",
        serde_json::to_string_pretty(value).expect("json")
    );
}

fn parse_span(text: &str) -> Result<SpanPair> {
    let (s, e) = text
        .split_once(':')
        .with_context(|| format!("span `{text}` is not start:end"))?;
    Ok(SpanPair::new(s.trim().parse()?, e.trim().parse()?)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, n } => {
            let run = Run::new(&common)?;
            let n = n.unwrap_or(run.cfg.n_records);
            let world = generate_world(&run.cfg.cluster, &run.params, run.cfg.seed)?;
            let train_log = sample_log(&world, n, run.cfg.seed.wrapping_add(1))?;
            let eval_log = sample_log(&world, n, run.cfg.seed.wrapping_add(2))?;
            let world_path = run.out_path(None, "world.json")?;
            let train_path = run.out_path(None, "train.jsonl")?;
            let eval_path = run.out_path(None, "eval.jsonl")?;
            write_json(
                &WorldFile {
                    config_hash: run.hash.clone(),
                    seed: run.cfg.seed,
                    world: world.clone(),
                },
                &world_path,
            )?;
            write_agent_log(&train_log, &train_path)?;
            write_agent_log(&eval_log, &eval_path)?;
            print(&json!({
                "config_hash": run.hash,
                "seed": run.cfg.seed,
                "world": world_path,
                "train_log": train_path,
                "eval_log": eval_path,
                "points": world.points.len(),
                "records": n,
                "bayes_risk": {
                    "joint": bayes_risk(&world, &run.params, AllocationMode::Joint)?,
                    "per_head": bayes_risk(&world, &run.params, AllocationMode::PerHead)?,
                },
            }));
        }
        Command::Train {
            common,
            log,
            model_out,
            trace_out,
        } => {
            let run = Run::new(&common)?;
            let log = run.log(log, run.cfg.log.as_ref())?;
            let first = log.first().context("log is empty")?;
            let train_cfg = run.cfg.train_config();
            let model = RejectorModel::init(
                run.cfg.architecture,
                run.cfg.head_mode,
                first.features.len(),
                run.params.num_agents(),
                run.cfg.seed,
            )?;
            let (model, trace) = train(&log, model, &train_cfg, &run.params, run.exec)?;
            let model_path = run.out_path(model_out.or_else(|| run.cfg.model_out.clone()), "model.eqdr")?;
            let trace_path = run.out_path(trace_out, "trace.csv")?;
            save_model(&model, &model_path)?;
            write_trace(&trace, &run.stamp(), &trace_path)?;
            print(&json!({
                "config_hash": run.hash,
                "seed": run.cfg.seed,
                "model": model_path,
                "trace": trace_path,
                "steps": trace.len(),
                "final_loss": trace.last().map(|t| t.mean_loss),
            }));
        }
        Command::Evaluate {
            common,
            log,
            model,
            force_agent,
            ensemble,
            report_out,
        } => {
            let run = Run::new(&common)?;
            let fallback = run.cfg.eval_log.clone().or_else(|| run.cfg.log.clone());
            let log = run.log(log, fallback.as_ref())?;
            let n = run.params.num_agents();
            let report = if ensemble {
                ensemble_baseline(&log, &run.params)?
            } else {
                let scorer: Box<dyn Scorer> = match force_agent {
                    Some(k) if k < n => Box::new(ForcedAgent {
                        agent: AgentId(k),
                        num_agents: n,
                    }),
                    Some(k) => bail!("agent {k} out of range (0..{n})"),
                    None => Box::new(run.model(model)?),
                };
                evaluate_system(&log, scorer.as_ref(), &run.params, run.cfg.mode, run.exec)?
            };
            let out = json!({ "config_hash": run.hash, "seed": run.cfg.seed, "report": report });
            if let Some(p) = report_out {
                write_json(&out, &p)?;
            }
            print(&out);
        }
        Command::Sweep {
            common,
            log,
            eval_log,
            grid,
            out,
        } => {
            let run = Run::new(&common)?;
            let train_log = run.log(log, run.cfg.log.as_ref())?;
            let eval_log = match eval_log.or_else(|| run.cfg.eval_log.clone()) {
                Some(p) => run.log(Some(p), None)?,
                None => train_log.clone(),
            };
            let grid = match (grid, common.beta1) {
                (Some(g), _) => g,
                (None, Some(b)) => vec![b],
                (None, None) => run.cfg.beta_grid.clone(),
            };
            for b in &grid {
                run.cfg
                    .cost_params_for_beta1(*b)
                    .with_context(|| format!("beta1 = {b}"))?;
            }
            let sweep = SweepConfig {
                architecture: run.cfg.architecture,
                head_mode: run.cfg.head_mode,
                train: run.cfg.train_config(),
                mode: run.cfg.mode,
                cost_ratio_divisor: run.cfg.cost_ratio_divisor,
            };
            let rows = beta_sweep(&train_log, &eval_log, &run.params, &grid, &sweep, run.exec)?;
            let path = run.out_path(out, "curve.csv")?;
            write_curve(&rows, run.params.num_agents(), &run.stamp(), &path)?;
            print(&json!({ "config_hash": run.hash, "seed": run.cfg.seed, "curve": path, "rows": rows }));
        }
        Command::Oracle {
            common,
            world,
            agreement,
        } => {
            let run = Run::new(&common)?;
            let world = load_world_arg(world, &run)?;
            let mut out = json!({
                "config_hash": run.hash,
                "seed": run.cfg.seed,
                "bayes_risk": {
                    "joint": bayes_risk(&world, &run.params, AllocationMode::Joint)?,
                    "per_head": bayes_risk(&world, &run.params, AllocationMode::PerHead)?,
                },
                "allocation": {
                    "joint": bayes_allocation(&world, &run.params, AllocationMode::Joint)?,
                    "per_head": bayes_allocation(&world, &run.params, AllocationMode::PerHead)?,
                },
            });
            if agreement {
                let (checked, agreed) = exhaustive_agreement(0.05, &[1, 2, 3], &[0.0, 1.0], &[0.0, 0.1, 0.3]);
                out["agreement"] = json!({ "checked": checked, "agreed": agreed });
                if checked != agreed {
                    print(&out);
                    bail!(
                        "closed-form rule disagrees with brute force on {} rows",
                        checked - agreed
                    );
                }
            }
            print(&out);
        }
        Command::Bound { common, world, model } => {
            let run = Run::new(&common)?;
            let world = load_world_arg(world, &run)?;
            let model = run.model(model)?;
            let scores = world_scores(&world, &model, run.exec)?;
            let report = bound_check(&world, &scores, &run.params, run.cfg.nu)?;
            let risk = empirical_deferral_risk(&model, &world, &run.params, AllocationMode::PerHead, run.exec)?;
            print(&json!({ "config_hash": run.hash, "seed": run.cfg.seed, "risk": risk, "bound": report }));
        }
        Command::Allocate {
            common,
            model,
            features,
            predictions,
        } => {
            let run = Run::new(&common)?;
            let model = run.model(model)?;
            let predictions = predictions.iter().map(|p| parse_span(p)).collect::<Result<Vec<_>>>()?;
            let record = AgentPredictionRecord {
                query_id: "cli".into(),
                features,
                gold: SpanPair::NO_ANSWER,
                predictions,
            };
            record.check_dims(model.input_dim(), model.num_agents())?;
            let a = allocate(&model, &record, run.cfg.mode)?;
            print(&json!({
                "start_agent": a.start_agent,
                "end_agent": a.end_agent,
                "span": a.span,
                "deferred": a.deferred(),
            }));
        }
    }
    Ok(())
}

fn load_world_arg(explicit: Option<PathBuf>, run: &Run) -> Result<eqa_defer::oracle::SyntheticWorld> {
    let path: PathBuf = explicit
        .or_else(|| run.cfg.world.clone())
        .context("no world given (use --world)")?;
    load_world(Path::new(&path)).with_context(|| format!("loading world {}", path.display()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
