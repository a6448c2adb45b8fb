//! `key=value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors so that
//! typos do not silently fall back to defaults.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::merging::MergeConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "IGPK_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub merge: MergeConfig,
    pub prune_count: usize,
    pub merge_count: usize,
    pub task: String,
    pub dataset_size: usize,
    /// `None` until set by file, flag or environment.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            merge: MergeConfig::default(),
            prune_count: 1,
            merge_count: 0,
            task: "copy".into(),
            dataset_size: 1000,
            seed: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "n_layers" => m.n_layers = num(key, value)?,
            "d_model" => m.d_model = num(key, value)?,
            "n_heads" => m.n_heads = num(key, value)?,
            "d_ff" => m.d_ff = num(key, value)?,
            "vocab_size" => m.vocab_size = num(key, value)?,
            "max_seq" => m.max_seq = num(key, value)?,
            "lora_rank" => m.lora_rank = num(key, value)?,
            "lora_alpha" => m.lora_alpha = num(key, value)?,
            "total_steps" => t.total_steps = num(key, value)?,
            "probe_steps" => t.probe_steps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "mode" => t.mode = value.parse()?,
            "momentum" => t.momentum = num(key, value)?,
            "sparsity" => self.merge.sparsity_p = num(key, value)?,
            "merge_strategy" => self.merge.strategy = value.to_string(),
            "tau" => self.merge.tau = Some(num(key, value)?),
            "avg_weights" => {
                self.merge.avg_weights = Some(
                    value
                        .split(',')
                        .map(|w| num(key, w.trim()))
                        .collect::<Result<Vec<f64>>>()?,
                )
            }
            "prune_count" => self.prune_count = num(key, value)?,
            "merge_count" => self.merge_count = num(key, value)?,
            "task" => self.task = value.to_string(),
            "dataset_size" => self.dataset_size = num(key, value)?,
            "seed" => self.seed = Some(num(key, value)?),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Explicit seed, else `IGPK_SEED`, else 0.
    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => num(SEED_ENV, v.trim()),
            Err(_) => Ok(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.merge.validate()?;
        if self.merge_count > self.prune_count {
            return Err(Error::Config(format!(
                "merge_count ({}) exceeds prune_count ({})",
                self.merge_count, self.prune_count
            )));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let (m, t, g) = (&self.model, &self.train, &self.merge);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        kv("n_layers", m.n_layers.to_string());
        kv("d_model", m.d_model.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("max_seq", m.max_seq.to_string());
        kv("lora_rank", m.lora_rank.to_string());
        kv("lora_alpha", m.lora_alpha.to_string());
        kv("total_steps", t.total_steps.to_string());
        kv("probe_steps", t.probe_steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("epochs", t.epochs.to_string());
        kv("mode", t.mode.to_string());
        kv("momentum", t.momentum.to_string());
        kv("sparsity", g.sparsity_p.to_string());
        kv("merge_strategy", g.strategy.clone());
        if let Some(tau) = g.tau {
            kv("tau", tau.to_string());
        }
        if let Some(w) = &g.avg_weights {
            kv("avg_weights", w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
        }
        kv("prune_count", self.prune_count.to_string());
        kv("merge_count", self.merge_count.to_string());
        kv("task", self.task.clone());
        kv("dataset_size", self.dataset_size.to_string());
        if let Some(s) = self.seed {
            kv("seed", s.to_string());
        }
        out
    }
}
