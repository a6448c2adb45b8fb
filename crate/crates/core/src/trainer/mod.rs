//! Optimization loop, probe phase and post-pruning fine-tuning.

mod data;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use data::{
    make_dataset, make_dataset_with, BatchSampler, CopyTask, Dataset, ModularAdditionTask,
    PatternTask, Sample, Task, TaskConstructor, TaskRegistry, TaskSpec, SEP,
};

use crate::error::{Error, Result};
use crate::model::{GradRecord, ModelState, ParamKind};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Full fine-tuning: every base parameter is updated, adapters stay frozen.
    Fft,
    /// Adapter-only training; base weights are bitwise frozen.
    Lora,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Fft => "fft",
            TrainMode::Lora => "lora",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fft" => Ok(TrainMode::Fft),
            "lora" => Ok(TrainMode::Lora),
            other => Err(Error::Config(format!("unknown training mode `{other}` (fft, lora)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `T`: the full training budget in optimizer steps. When nonzero it also
    /// caps fine-tuning runs.
    pub total_steps: usize,
    /// `t`: steps whose gradients feed the importance estimate.
    pub probe_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub mode: TrainMode,
    pub seed: u64,
    /// Heavy-ball momentum; zero gives plain SGD.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            probe_steps: 20,
            batch_size: 8,
            learning_rate: 0.05,
            epochs: 1,
            mode: TrainMode::Lora,
            seed: 0,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    /// Large-model settings: lr 1e-5, batch 64, 3 epochs, probe on the first
    /// 1% of steps.
    pub fn reference_profile(total_steps: usize) -> Self {
        Self {
            total_steps,
            probe_steps: (total_steps as f64 * 0.01).ceil() as usize,
            batch_size: 64,
            learning_rate: 1e-5,
            epochs: 3,
            mode: TrainMode::Lora,
            seed: 0,
            momentum: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probe_steps > self.total_steps {
            return Err(Error::Config(format!(
                "probe_steps ({}) must not exceed total_steps ({})",
                self.probe_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// `ceil(fraction · T)`.
    pub fn steps_for_fraction(&self, fraction: f64) -> usize {
        (fraction * self.total_steps as f64).ceil() as usize
    }
}

/// Consumer of per-step adapter gradients.
pub trait GradientSink {
    fn consume(&mut self, record: &GradRecord) -> Result<()>;
}

impl GradientSink for Vec<GradRecord> {
    fn consume(&mut self, record: &GradRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    /// Pre-update adapter gradients.
    pub record: GradRecord,
}

/// SGD (optionally with momentum) over the parameters selected by the mode.
pub struct Trainer {
    config: TrainConfig,
    velocity: BTreeMap<String, Tensor>,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One forward/backward over the batch followed by one parameter update.
    pub fn step(&mut self, model: &mut ModelState, batch: &[&Sample]) -> Result<StepOutput> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let step = self.step + 1;
        let full = self.config.mode == TrainMode::Fft;
        let total: usize = batch.iter().map(|s| s.scored()).sum();
        if total == 0 {
            return Err(Error::Input("batch has no scored positions".into()));
        }
        let weight = 1.0 / total as f64;
        let mut grads = BTreeMap::new();
        let mut loss_sum = 0.0;
        for sample in batch {
            let pass = model.forward(&sample.input).and_then(|(_, tape)| {
                model.backward_into(&tape, &sample.target, sample.score_from, full, weight, &mut grads)
            });
            loss_sum += pass.map_err(|e| diverged(e, step, model))?;
        }
        let loss = loss_sum / total as f64;
        let names = model.linear_names();
        let record = GradRecord::from_grads(step, &grads, names.iter().map(String::as_str))?;
        if !loss.is_finite() {
            let linear = record.first_non_finite().unwrap_or("loss").to_string();
            return Err(Error::Diverged { step, linear });
        }

        let (lr, mu) = (self.config.learning_rate, self.config.momentum);
        let trainable = if full { ParamKind::Base } else { ParamKind::Adapter };
        let names: Vec<String> = model
            .params()
            .into_iter()
            .filter(|(_, kind, _)| *kind == trainable)
            .map(|(n, _, _)| n)
            .collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let update = if mu > 0.0 {
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(g.shape()));
                *v = v.scale(mu);
                v.add_scaled(g, 1.0)?;
                v.clone()
            } else {
                g.clone()
            };
            let param = model.param_mut(&name).expect("listed parameter");
            param.add_scaled(&update, -lr)?;
            if !param.is_finite() {
                return Err(Error::Diverged { step, linear: name });
            }
        }
        self.step = step;
        Ok(StepOutput { loss, record })
    }
}

fn diverged(err: Error, step: usize, model: &ModelState) -> Error {
    match err {
        Error::NonFinite(_) => {
            let linear = model
                .linears()
                .find(|l| !l.weight.is_finite() || !l.lora_a.is_finite() || !l.lora_b.is_finite())
                .map(|l| l.name.clone())
                .unwrap_or_else(|| "activations".to_string());
            Error::Diverged { step, linear }
        }
        other => other,
    }
}

/// Summary of a probe run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSummary {
    pub steps: usize,
    pub losses: Vec<f64>,
}

/// Runs `config.probe_steps` adapter-only steps on a copy of `model`, handing
/// each step's gradients to `sink` in order. The caller's model is untouched
/// and the probe's adapter progress is discarded.
pub fn run_probe(
    model: &ModelState,
    data: &Dataset,
    config: &TrainConfig,
    sink: &mut dyn GradientSink,
) -> Result<ProbeSummary> {
    let (summary, _) = probe_with_model(model, data, config, sink)?;
    Ok(summary)
}

/// As [`run_probe`], but also returns the probed copy of the model.
pub fn probe_with_model(
    model: &ModelState,
    data: &Dataset,
    config: &TrainConfig,
    sink: &mut dyn GradientSink,
) -> Result<(ProbeSummary, ModelState)> {
    if config.mode != TrainMode::Lora {
        return Err(Error::Config("the probe phase requires mode = lora".into()));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut probed = model.clone();
    let mut sampler = BatchSampler::new(&data.samples, config.batch_size, config.seed);
    let mut losses = Vec::with_capacity(config.probe_steps);
    for _ in 0..config.probe_steps {
        let batch = sampler.next_batch();
        let out = trainer.step(&mut probed, &batch)?;
        sink.consume(&out.record)?;
        losses.push(out.loss);
    }
    Ok((
        ProbeSummary {
            steps: config.probe_steps,
            losses,
        },
        probed,
    ))
}

/// Trains for `epochs` passes over the training split (capped at
/// `total_steps` when nonzero) and returns the per-step losses. In LoRA mode
/// the adapters are folded into the base weights at the end.
pub fn run_finetune(
    model: ModelState,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelState, Vec<f64>)> {
    let mut model = model;
    let mut trainer = Trainer::new(config.clone())?;
    let mut sampler = BatchSampler::new(&data.samples, config.batch_size, config.seed);
    let mut steps = config.epochs * sampler.batches_per_epoch();
    if config.total_steps > 0 {
        steps = steps.min(config.total_steps);
    }
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = sampler.next_batch();
        losses.push(trainer.step(&mut model, &batch)?.loss);
    }
    if config.mode == TrainMode::Lora && steps > 0 {
        model.merge_adapters()?;
    }
    Ok((model, losses))
}
