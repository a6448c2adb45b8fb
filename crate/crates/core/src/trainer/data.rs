//! Synthetic next-token tasks and deterministic batching.
//!
//! Each task produces full token sequences; a [`Sample`] is the usual
//! shifted pair (`target[i] == input[i + 1]`) with loss counted only from
//! `score_from` on, i.e. on the part of the sequence that is predictable.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Token reserved for separators in every built-in task.
pub const SEP: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    pub score_from: usize,
}

impl Sample {
    /// Splits a full sequence into the shifted input/target pair.
    pub fn from_sequence(seq: &[u32], score_from: usize) -> Self {
        Self {
            input: seq[..seq.len() - 1].to_vec(),
            target: seq[1..].to_vec(),
            score_from,
        }
    }

    pub fn scored(&self) -> usize {
        self.target.len() - self.score_from
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub heldout: Vec<Sample>,
}

impl Dataset {
    /// Keeps `ceil(fraction · n)` randomly chosen training samples (at least
    /// one), in their original order. The held-out split is untouched.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("subsample fraction {fraction} not in (0, 1]")));
        }
        let keep = ((fraction * self.samples.len() as f64).ceil() as usize).clamp(1, self.samples.len());
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(keep);
        idx.sort_unstable();
        Ok(Dataset {
            name: self.name.clone(),
            seed: self.seed,
            samples: idx.into_iter().map(|i| self.samples[i].clone()).collect(),
            heldout: self.heldout.clone(),
        })
    }
}

/// Shape constraints a task must respect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub max_seq: usize,
}

/// A generator of synthetic sequences, selectable by name.
pub trait Task: Send + Sync {
    fn name(&self) -> &'static str;

    fn check(&self, spec: TaskSpec) -> Result<()>;

    fn sample(&self, spec: TaskSpec, rng: &mut ChaCha8Rng) -> Sample;
}

/// Reproduce a run of content tokens after a separator.
pub struct CopyTask {
    pub length: usize,
}

impl Task for CopyTask {
    fn name(&self) -> &'static str {
        "copy"
    }

    fn check(&self, spec: TaskSpec) -> Result<()> {
        if spec.vocab_size < 2 || 2 * self.length > spec.max_seq || self.length == 0 {
            return Err(Error::Config(format!(
                "copy task of length {} needs vocab_size >= 2 and max_seq >= {}",
                self.length,
                2 * self.length
            )));
        }
        Ok(())
    }

    fn sample(&self, spec: TaskSpec, rng: &mut ChaCha8Rng) -> Sample {
        let content: Vec<u32> = (0..self.length)
            .map(|_| rng.gen_range(1..spec.vocab_size as u32))
            .collect();
        let mut seq = content.clone();
        seq.push(SEP);
        seq.extend_from_slice(&content);
        Sample::from_sequence(&seq, self.length)
    }
}

/// `a SEP b SEP (a + b) mod m`, with digit `x` encoded as token `x + 1`.
pub struct ModularAdditionTask;

impl ModularAdditionTask {
    fn modulus(spec: TaskSpec) -> u32 {
        (spec.vocab_size as u32 - 1).min(10)
    }
}

impl Task for ModularAdditionTask {
    fn name(&self) -> &'static str {
        "modadd"
    }

    fn check(&self, spec: TaskSpec) -> Result<()> {
        if spec.vocab_size < 3 || spec.max_seq < 4 {
            return Err(Error::Config(
                "modadd task needs vocab_size >= 3 and max_seq >= 4".into(),
            ));
        }
        Ok(())
    }

    fn sample(&self, spec: TaskSpec, rng: &mut ChaCha8Rng) -> Sample {
        let m = Self::modulus(spec);
        let a = rng.gen_range(0..m);
        let b = rng.gen_range(0..m);
        let seq = [a + 1, SEP, b + 1, SEP, (a + b) % m + 1];
        Sample::from_sequence(&seq, 3)
    }
}

/// A short random motif repeated to fill the context; the tail after two
/// full repetitions is scored.
pub struct PatternTask;

impl Task for PatternTask {
    fn name(&self) -> &'static str {
        "pattern"
    }

    fn check(&self, spec: TaskSpec) -> Result<()> {
        if spec.vocab_size < 2 || spec.max_seq < 7 {
            return Err(Error::Config(
                "pattern task needs vocab_size >= 2 and max_seq >= 7".into(),
            ));
        }
        Ok(())
    }

    fn sample(&self, spec: TaskSpec, rng: &mut ChaCha8Rng) -> Sample {
        let period = rng.gen_range(2..=3usize);
        let motif: Vec<u32> = (0..period)
            .map(|_| rng.gen_range(1..spec.vocab_size as u32))
            .collect();
        let len = spec.max_seq.min(12) + 1;
        let seq: Vec<u32> = (0..len).map(|i| motif[i % period]).collect();
        Sample::from_sequence(&seq, 2 * period - 1)
    }
}

pub type TaskConstructor = fn() -> Box<dyn Task>;

/// Name → constructor map for the synthetic tasks.
pub struct TaskRegistry {
    tasks: BTreeMap<&'static str, TaskConstructor>,
}

impl Default for TaskRegistry {
    fn default() -> Self {
        let mut reg = Self {
            tasks: BTreeMap::new(),
        };
        reg.register("copy", || Box::new(CopyTask { length: 4 }));
        reg.register("modadd", || Box::new(ModularAdditionTask));
        reg.register("pattern", || Box::new(PatternTask));
        reg
    }
}

impl TaskRegistry {
    pub fn register(&mut self, name: &'static str, ctor: TaskConstructor) {
        self.tasks.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.tasks.keys().copied().collect()
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn Task>> {
        self.tasks
            .get(name)
            .map(|ctor| ctor())
            .ok_or_else(|| Error::UnknownName {
                kind: "task",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }
}

/// Deterministic corpus of `size` samples; one fifth (at least one) is held out.
pub fn make_dataset(task: &str, size: usize, seed: u64, spec: TaskSpec) -> Result<Dataset> {
    make_dataset_with(&TaskRegistry::default(), task, size, seed, spec)
}

pub fn make_dataset_with(
    registry: &TaskRegistry,
    task: &str,
    size: usize,
    seed: u64,
    spec: TaskSpec,
) -> Result<Dataset> {
    let task = registry.create(task)?;
    if size < 2 {
        return Err(Error::Config(format!("dataset size must be at least 2, got {size}")));
    }
    task.check(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<Sample> = (0..size).map(|_| task.sample(spec, &mut rng)).collect();
    let heldout = samples.split_off(size - (size / 5).max(1));
    Ok(Dataset {
        name: task.name().to_string(),
        seed,
        samples,
        heldout,
    })
}

/// Endless stream of batches; each epoch is a fresh seeded permutation.
pub struct BatchSampler<'a> {
    samples: &'a [Sample],
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(samples: &'a [Sample], batch_size: usize, seed: u64) -> Self {
        Self {
            samples,
            batch_size: batch_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xB47C_5A3D),
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    pub fn next_batch(&mut self) -> Vec<&'a Sample> {
        if self.cursor >= self.order.len() {
            self.order = (0..self.samples.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end]
            .iter()
            .map(|&i| &self.samples[i])
            .collect();
        self.cursor = end;
        batch
    }
}
