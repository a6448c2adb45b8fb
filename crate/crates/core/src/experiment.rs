//! Seeded toy-scale runs: ranking sensitivity, prune comparisons and the
//! sparsity sweep.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::analysis::{evaluate, EvalReport, RankingSnapshot};
use crate::error::{Error, Result};
use crate::igia::{compute_igia, IgiaAccumulator, IgiaMap};
use crate::merging::MergeConfig;
use crate::model::{GradRecord, ModelConfig, ModelState};
use crate::scoring::{apply_prune, layer_param_counts, make_prune_plan, rank_layers, score_layers, LayerScores, PlanRequest, PrunePlan};
use crate::trainer::{make_dataset, run_finetune, run_probe, Dataset, GradientSink, TaskSpec, TrainConfig, TrainMode};

/// Captures the layer ranking whenever the accumulated step count hits one
/// of `at`.
pub struct SnapshotSink {
    acc: IgiaAccumulator,
    at: BTreeSet<usize>,
    pub snapshots: Vec<RankingSnapshot>,
}

impl SnapshotSink {
    pub fn new(model: &ModelState, at: impl IntoIterator<Item = usize>) -> Self {
        Self {
            acc: IgiaAccumulator::for_model(model),
            at: at.into_iter().collect(),
            snapshots: Vec::new(),
        }
    }
}

impl GradientSink for SnapshotSink {
    fn consume(&mut self, record: &GradRecord) -> Result<()> {
        self.acc.accumulate(record)?;
        let step = self.acc.steps();
        if self.at.contains(&step) {
            let scores = score_layers(&self.acc.finalize()?)?;
            self.snapshots.push(RankingSnapshot {
                step,
                ranking: rank_layers(&scores),
            });
        }
        Ok(())
    }
}

/// Trains adapters for `config.total_steps` steps and returns the rankings
/// implied by the first `ceil(f·T)` steps for each fraction, plus the
/// full-run ranking as reference.
pub fn ranking_snapshots(
    model: &ModelState,
    data: &Dataset,
    config: &TrainConfig,
    fractions: &[f64],
) -> Result<(Vec<RankingSnapshot>, RankingSnapshot)> {
    let total = config.total_steps;
    if total == 0 {
        return Err(Error::Config("sensitivity needs total_steps >= 1".into()));
    }
    let mut steps = BTreeSet::new();
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("step fraction {f} not in (0, 1]")));
        }
        steps.insert(config.steps_for_fraction(f).clamp(1, total));
    }
    steps.insert(total);
    let mut sink = SnapshotSink::new(model, steps.iter().copied());
    let run = TrainConfig {
        probe_steps: total,
        ..config.clone()
    };
    run_probe(model, data, &run, &mut sink)?;
    let reference = sink.snapshots.last().cloned().expect("total step is always captured");
    let wanted: BTreeSet<usize> = fractions
        .iter()
        .map(|&f| config.steps_for_fraction(f).clamp(1, total))
        .collect();
    let snapshots = sink.snapshots.into_iter().filter(|s| wanted.contains(&s.step)).collect();
    Ok((snapshots, reference))
}

/// Settings of a seeded toy run.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub model: ModelConfig,
    pub seed: u64,
    /// Optional full-weight pre-training before the downstream task.
    pub pretrain_task: Option<String>,
    pub pretrain: TrainConfig,
    pub task: String,
    pub dataset_size: usize,
    /// Downstream adapter training; its `probe_steps` drive the IGIA.
    pub train: TrainConfig,
    /// Fine-tuning applied after pruning, before evaluation.
    pub recovery: Option<TrainConfig>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 7,
            pretrain_task: Some("copy".into()),
            pretrain: TrainConfig {
                total_steps: 100,
                probe_steps: 0,
                learning_rate: 0.05,
                epochs: 1000,
                mode: TrainMode::Fft,
                momentum: 0.9,
                ..TrainConfig::default()
            },
            task: "copy".into(),
            dataset_size: 1000,
            train: TrainConfig {
                total_steps: 2000,
                probe_steps: 20,
                learning_rate: 0.05,
                epochs: 1000,
                ..TrainConfig::default()
            },
            recovery: Some(TrainConfig {
                total_steps: 200,
                probe_steps: 0,
                learning_rate: 0.05,
                epochs: 1000,
                ..TrainConfig::default()
            }),
        }
    }
}

fn spec(model: &ModelConfig) -> TaskSpec {
    TaskSpec {
        vocab_size: model.vocab_size,
        max_seq: model.max_seq,
    }
}

/// Base model, downstream data and the probe's IGIA.
pub struct ToyRun {
    pub config: ToyConfig,
    pub base: ModelState,
    pub data: Dataset,
    pub igia: IgiaMap,
    pub scores: LayerScores,
}

impl ToyRun {
    pub fn prepare(config: ToyConfig) -> Result<Self> {
        let seed = config.seed;
        let mut base = ModelState::build(&config.model, seed)?;
        if let Some(task) = &config.pretrain_task {
            let pre = make_dataset(task, config.dataset_size, seed.wrapping_add(1), spec(&config.model))?;
            let cfg = TrainConfig {
                seed: seed.wrapping_add(2),
                ..config.pretrain.clone()
            };
            base = run_finetune(base, &pre, &cfg)?.0;
        }
        let data = make_dataset(&config.task, config.dataset_size, seed.wrapping_add(3), spec(&config.model))?;
        let train = TrainConfig {
            seed: seed.wrapping_add(4),
            ..config.train.clone()
        };
        let igia = compute_igia(&base, &data, &train)?;
        let scores = score_layers(&igia)?;
        Ok(Self {
            config,
            base,
            data,
            igia,
            scores,
        })
    }

    pub fn ranking(&self) -> Vec<usize> {
        rank_layers(&self.scores)
    }

    pub fn plan(&self, prune_count: usize, merge_count: usize) -> Result<PrunePlan> {
        make_prune_plan(
            &self.scores,
            &PlanRequest::new(prune_count, merge_count),
            &layer_param_counts(&self.base),
        )
    }

    fn finish(&self, model: ModelState) -> Result<EvalReport> {
        let model = match &self.config.recovery {
            Some(cfg) => {
                let cfg = TrainConfig {
                    seed: self.config.seed.wrapping_add(5),
                    ..cfg.clone()
                };
                run_finetune(model, &self.data, &cfg)?.0
            }
            None => model,
        };
        evaluate(&model, &self.data.heldout)
    }

    pub fn eval_base(&self) -> Result<EvalReport> {
        self.finish(self.base.clone())
    }

    /// Drops layers outright, bypassing plan rules.
    pub fn drop_eval(&self, layers: &BTreeSet<usize>) -> Result<EvalReport> {
        self.finish(self.base.drop_layers(layers)?)
    }

    pub fn prune_eval(&self, plan: &PrunePlan, merge: &MergeConfig) -> Result<EvalReport> {
        self.finish(apply_prune(&self.base, plan, &self.igia, merge)?)
    }

    /// Held-out reports for each sparsity under a fixed plan shape.
    pub fn sparsity_sweep(
        &self,
        prune_count: usize,
        merge_count: usize,
        strategy: &str,
        ps: &[f64],
    ) -> Result<Vec<(f64, EvalReport)>> {
        let plan = self.plan(prune_count, merge_count)?;
        ps.iter()
            .map(|&p| {
                let cfg = MergeConfig {
                    sparsity_p: p,
                    strategy: strategy.into(),
                    ..MergeConfig::default()
                };
                Ok((p, self.prune_eval(&plan, &cfg)?))
            })
            .collect()
    }
}

/// Sparsity with the lowest held-out loss; the lower `p` wins ties.
pub fn best_sparsity(sweep: &[(f64, EvalReport)]) -> Option<f64> {
    sweep
        .iter()
        .fold(None::<&(f64, EvalReport)>, |best, cur| match best {
            Some(b) if b.1.loss <= cur.1.loss => Some(b),
            _ => Some(cur),
        })
        .map(|(p, _)| *p)
}

/// Columns `sparsity,loss,perplexity,accuracy`.
pub fn sweep_csv(sweep: &[(f64, EvalReport)]) -> String {
    let mut out = String::from("sparsity,loss,perplexity,accuracy\n");
    for (p, r) in sweep {
        writeln!(out, "{p},{},{},{}", r.loss, r.perplexity, r.accuracy).unwrap();
    }
    out
}
