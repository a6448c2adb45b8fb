//! Initial Gradient Information Accumulation (IGIA) matrices.
//!
//! For every adapter-bearing linear, the adapter gradients of each probe step
//! are multiplied into a simulated base-weight gradient `∇B · ∇A` (shape of
//! `W`), squared elementwise and averaged over the `t` probe steps.
//!
//! The printed formula for the simulated gradient repeats `∇B` twice, which
//! cannot be multiplied; the `[out×r]·[r×in]` product is the only reading
//! that lines up with `W`, and it is what is implemented here.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{GradRecord, ModelState};
use crate::numerics::{matmul, Tensor};
use crate::trainer::{run_probe, Dataset, GradientSink, TrainConfig};

/// Nonnegative per-weight importance for one linear.
#[derive(Debug, Clone, PartialEq)]
pub struct IgiaMatrix {
    pub name: String,
    pub f: Tensor,
    pub steps_seen: usize,
}

pub type IgiaMap = BTreeMap<String, IgiaMatrix>;

/// `∇B · ∇A`, aligned with the base weight.
pub fn simulate_weight_gradient(grad_b: &Tensor, grad_a: &Tensor) -> Result<Tensor> {
    matmul(grad_b, grad_a)
}

/// Streaming sum of squared simulated gradients; memory is one `W`-shaped
/// buffer per linear.
#[derive(Debug, Clone)]
pub struct IgiaAccumulator {
    sums: BTreeMap<String, Tensor>,
    steps: usize,
    enforce_order: bool,
}

impl IgiaAccumulator {
    pub fn new<I, S>(linears: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<usize>)>,
        S: Into<String>,
    {
        Self {
            sums: linears
                .into_iter()
                .map(|(name, shape)| (name.into(), Tensor::zeros(&shape)))
                .collect(),
            steps: 0,
            enforce_order: true,
        }
    }

    /// Registers every adapter-bearing linear of `model`.
    pub fn for_model(model: &ModelState) -> Self {
        Self::new(
            model
                .linears()
                .map(|l| (l.name.clone(), l.weight.shape().to_vec())),
        )
    }

    /// Accept records regardless of their step index.
    pub fn unordered(mut self) -> Self {
        self.enforce_order = false;
        self
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sums(&self) -> &BTreeMap<String, Tensor> {
        &self.sums
    }

    pub fn accumulate(&mut self, record: &GradRecord) -> Result<()> {
        if self.enforce_order && record.step != self.steps + 1 {
            return Err(Error::OutOfOrder {
                expected: self.steps + 1,
                got: record.step,
            });
        }
        if let Some(unknown) = record.grads.keys().find(|k| !self.sums.contains_key(*k)) {
            return Err(Error::UnknownLinear(unknown.clone()));
        }
        // Validate the whole record before touching any running sum.
        let mut simulated = Vec::with_capacity(self.sums.len());
        for (name, sum) in &self.sums {
            let g = record
                .grads
                .get(name)
                .ok_or_else(|| Error::MissingIgia(format!("{name} absent from step {}", record.step)))?;
            let sim = simulate_weight_gradient(&g.b, &g.a)?;
            if sim.shape() != sum.shape() {
                return Err(Error::Dimension {
                    op: "igia accumulate",
                    left: sim.shape().to_vec(),
                    right: sum.shape().to_vec(),
                });
            }
            simulated.push(sim);
        }
        for (sum, sim) in self.sums.values_mut().zip(simulated) {
            for (s, g) in sum.data_mut().iter_mut().zip(sim.data()) {
                *s += g * g;
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// `F = sum / t` for every linear.
    pub fn finalize(&self) -> Result<IgiaMap> {
        if self.steps == 0 {
            return Err(Error::Input("cannot finalize IGIA before any step".into()));
        }
        let t = self.steps as f64;
        Ok(self
            .sums
            .iter()
            .map(|(name, sum)| {
                let mut f = sum.clone();
                for v in f.data_mut() {
                    *v /= t;
                }
                (
                    name.clone(),
                    IgiaMatrix {
                        name: name.clone(),
                        f,
                        steps_seen: self.steps,
                    },
                )
            })
            .collect())
    }
}

impl GradientSink for IgiaAccumulator {
    fn consume(&mut self, record: &GradRecord) -> Result<()> {
        self.accumulate(record)
    }
}

/// Runs the probe phase and returns one IGIA matrix per adapter-bearing linear.
pub fn compute_igia(model: &ModelState, data: &Dataset, config: &TrainConfig) -> Result<IgiaMap> {
    if config.probe_steps == 0 {
        return Err(Error::Config("probe_steps must be at least 1".into()));
    }
    let mut acc = IgiaAccumulator::for_model(model);
    run_probe(model, data, config, &mut acc)?;
    acc.finalize()
}
