//! Command-line front end.
//!
//! Data (reports, CSV) goes to stdout or `--out`; diagnostics go to stderr
//! as a single `error: <kind>: <message>` line.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{curve_csv, default_k, evaluate, param_report, sensitivity_curve};
use crate::error::{Error, Result};
use crate::experiment::ranking_snapshots;
use crate::igia::compute_igia;
use crate::io::{load_igia, load_model, save_igia, save_model, DType, RunConfig};
use crate::model::ModelState;
use crate::scoring::{apply_prune, layer_param_counts, make_prune_plan, rank_layers, score_layers, PlanRequest, PrunePlan};
use crate::trainer::{make_dataset, run_finetune, Dataset, TaskSpec, TrainConfig, TrainMode};

/// Step fractions used by `sensitivity` when none are given.
pub const DEFAULT_FRACTIONS: &str = "0.0002,0.0005,0.0008,0.01,0.05,0.1,0.25,0.5,1.0";

#[derive(Debug, Parser)]
#[command(name = "gradprune", version, about = "Gradient-guided layer pruning for LoRA fine-tuning")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// key=value run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data and training; falls back to IGPK_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub task: Option<String>,
    #[arg(long, global = true)]
    pub dataset_size: Option<usize>,
    /// Total training steps `T`.
    #[arg(long, global = true)]
    pub total_steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a freshly initialized model.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f64")]
        dtype: String,
    },
    /// Run the adapter probe and store the IGIA matrices.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Probe for `ceil(f · T)` steps.
        #[arg(long, conflicts_with = "steps")]
        steps_fraction: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print layer scores and the importance ranking.
    Score {
        #[arg(long)]
        igia: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a prune plan from IGIA scores.
    Plan {
        #[arg(long)]
        igia: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        merge: Option<usize>,
        /// Comma-separated layer ids that may not be pruned (default: first layer).
        #[arg(long)]
        protect: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge and drop layers, from a plan file or computed on the fly.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        igia: PathBuf,
        #[arg(long, conflicts_with_all = ["n", "merge"])]
        plan: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        merge: Option<usize>,
        #[arg(long)]
        sparsity: Option<f64>,
        /// sign-sum, weighted-avg, adaptive-isotropic or adaptive-fisher.
        #[arg(long)]
        merge_strategy: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and fold any adapters into its weights.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Held-out loss, perplexity and accuracy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ranking overlap of early-step snapshots against the full run, as CSV.
    Sensitivity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = DEFAULT_FRACTIONS)]
        fractions: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<(RunConfig, u64)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(t) = &common.task {
        cfg.task = t.clone();
    }
    if let Some(n) = common.dataset_size {
        cfg.dataset_size = n;
    }
    if let Some(t) = common.total_steps {
        cfg.train.total_steps = t;
        cfg.train.probe_steps = cfg.train.probe_steps.min(t);
    }
    let seed = cfg.resolved_seed()?;
    cfg.train.seed = seed;
    Ok((cfg, seed))
}

fn dataset(cfg: &RunConfig, model: &ModelState, seed: u64) -> Result<Dataset> {
    let spec = TaskSpec {
        vocab_size: model.config.vocab_size,
        max_seq: model.config.max_seq,
    };
    make_dataset(&cfg.task, cfg.dataset_size, seed, spec)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_ids(s: &str) -> Result<BTreeSet<usize>> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad layer id `{x}`")))
        })
        .collect()
}

fn parse_fractions(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad step fraction `{x}`")))
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let (mut cfg, seed) = resolve(&cli.common)?;
    match cli.command {
        Command::Init { out, dtype } => {
            cfg.model.validate()?;
            let model = ModelState::build(&cfg.model, seed)?;
            save_model(&out, &model, dtype.parse::<DType>()?)?;
            println!(
                "model layers={} params={} block_params={}",
                model.layer_ids().len(),
                model.base_param_count(),
                model.block_param_count()
            );
        }
        Command::Probe {
            model,
            out,
            steps_fraction,
            steps,
        } => {
            if let Some(f) = steps_fraction {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!("steps fraction {f} not in (0, 1]")));
                }
                cfg.train.probe_steps = cfg.train.steps_for_fraction(f).max(1);
            }
            if let Some(t) = steps {
                cfg.train.probe_steps = t;
            }
            cfg.train.mode = TrainMode::Lora;
            cfg.validate()?;
            let m = load_model(&model)?;
            let data = dataset(&cfg, &m, seed)?;
            let igia = compute_igia(&m, &data, &cfg.train)?;
            save_igia(&out, &igia)?;
            println!("probe steps={} linears={}", cfg.train.probe_steps, igia.len());
        }
        Command::Score { igia, out } => {
            let scores = score_layers(&load_igia(&igia)?)?;
            let mut text = String::from("layer,score\n");
            for (id, s) in &scores.0 {
                writeln!(text, "{id},{s}").unwrap();
            }
            let ranking: Vec<String> = rank_layers(&scores).iter().map(|x| x.to_string()).collect();
            writeln!(text, "# ranking {}", ranking.join(" ")).unwrap();
            emit(out.as_deref(), &text)?;
        }
        Command::Plan {
            igia,
            model,
            n,
            merge,
            protect,
            out,
        } => {
            let scores = score_layers(&load_igia(&igia)?)?;
            let m = load_model(&model)?;
            let request = PlanRequest {
                prune_count: n.unwrap_or(cfg.prune_count),
                merge_count: merge.unwrap_or(cfg.merge_count),
                protect: protect.as_deref().map(parse_ids).transpose()?,
            };
            let plan = make_prune_plan(&scores, &request, &layer_param_counts(&m))?;
            write_text(&out, &plan.to_directives())?;
            print!("{}", plan.report(Some(&scores)));
        }
        Command::Prune {
            model,
            igia,
            plan,
            n,
            merge,
            sparsity,
            merge_strategy,
            tau,
            out,
        } => {
            if let Some(p) = sparsity {
                cfg.merge.sparsity_p = p;
            }
            if let Some(s) = merge_strategy {
                cfg.merge.strategy = s;
            }
            if tau.is_some() {
                cfg.merge.tau = tau;
            }
            cfg.prune_count = n.unwrap_or(cfg.prune_count);
            cfg.merge_count = merge.unwrap_or(cfg.merge_count);
            cfg.validate()?;
            let m = load_model(&model)?;
            let igia = load_igia(&igia)?;
            let plan = match plan {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    PrunePlan::parse_directives(&text)?
                }
                None => make_prune_plan(
                    &score_layers(&igia)?,
                    &PlanRequest::new(cfg.prune_count, cfg.merge_count),
                    &layer_param_counts(&m),
                )?,
            };
            let pruned = apply_prune(&m, &plan, &igia, &cfg.merge)?;
            save_model(&out, &pruned, DType::F64)?;
            print!("{}", param_report(&m, &pruned).to_text());
        }
        Command::Finetune {
            model,
            out,
            mode,
            lr,
            epochs,
        } => {
            if let Some(mode) = mode {
                cfg.train.mode = mode;
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = lr;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let m = load_model(&model)?;
            let data = dataset(&cfg, &m, seed)?;
            let (trained, losses) = run_finetune(m, &data, &cfg.train)?;
            save_model(&out, &trained, DType::F64)?;
            println!(
                "finetune steps={} final_loss={}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval { model, out } => {
            let m = load_model(&model)?;
            let data = dataset(&cfg, &m, seed)?;
            emit(out.as_deref(), &evaluate(&m, &data.heldout)?.to_text())?;
        }
        Command::Sensitivity {
            model,
            fractions,
            k,
            out,
        } => {
            cfg.validate()?;
            let m = load_model(&model)?;
            let data = dataset(&cfg, &m, seed)?;
            let run = TrainConfig {
                mode: TrainMode::Lora,
                ..cfg.train.clone()
            };
            let (snaps, reference) = ranking_snapshots(&m, &data, &run, &parse_fractions(&fractions)?)?;
            let k = k.unwrap_or_else(|| default_k(m.layer_ids().len()));
            emit(out.as_deref(), &curve_csv(&sensitivity_curve(&snaps, &reference, k)?, k))?;
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
