//! Folding pruned layers into retained ones.
//!
//! A pruned layer's weights are first sparsified by IGIA magnitude, then
//! merged position-wise into the nearest preceding retained layer. The
//! default operation adds sign-agreeing donor entries to the target (a sum);
//! the adaptive strategies instead average or Fisher-weight agreeing entries.

mod strategy;

use std::collections::BTreeMap;

pub use strategy::{
    AdaptiveFisher, AdaptiveIsotropic, Donor, MergeInputs, MergeStrategy, SignSum, StrategyConstructor,
    StrategyRegistry, WeightedAverage,
};

use crate::error::{Error, Result};
use crate::igia::IgiaMap;
use crate::model::{linear_name, ModelState, Sublayer};
use crate::numerics::Tensor;
use crate::scoring::PrunePlan;

/// Fallback in Fisher merging when the weighted importance vanishes.
pub const FISHER_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MergeConfig {
    /// Fraction of donor entries kept before merging.
    pub sparsity_p: f64,
    /// Registered strategy name, e.g. `sign-sum`.
    pub strategy: String,
    /// Squared-IGIA threshold for the adaptive strategies; derived from
    /// `sparsity_p` when absent.
    pub tau: Option<f64>,
    /// Weights for `weighted-avg`, target first; uniform when absent.
    pub avg_weights: Option<Vec<f64>>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            sparsity_p: 0.8,
            strategy: "sign-sum".into(),
            tau: None,
            avg_weights: None,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sparsity_p) {
            return Err(Error::Config(format!("sparsity {} not in [0, 1]", self.sparsity_p)));
        }
        if let Some(tau) = self.tau {
            if tau.is_nan() || tau < 0.0 {
                return Err(Error::Config(format!("tau must be >= 0, got {tau}")));
            }
        }
        if let Some(w) = &self.avg_weights {
            validate_weights(w)?;
        }
        Ok(())
    }
}

fn validate_weights(w: &[f64]) -> Result<()> {
    if w.is_empty() || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Config("average weights must be finite and >= 0".into()));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("average weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// `ceil(p · n)`, snapping products within 1e-9 of an integer so that
/// e.g. `0.7 · 10` keeps 7 entries rather than 8.
pub fn keep_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let k = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.ceil()
    };
    (k.max(0.0) as usize).min(n)
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Entries in {−1, 0, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct SignMask(Tensor);

impl SignMask {
    pub fn of(w: &Tensor) -> Self {
        let mut m = w.clone();
        for v in m.data_mut() {
            *v = sign(*v);
        }
        SignMask(m)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Flat indices of the `keep_count(p, n)` largest entries of `f`, ties going
/// to the lower index; returned in ascending index order.
pub fn survivors(f: &Tensor, p: f64) -> Vec<usize> {
    let data = f.data();
    let k = keep_count(p, data.len());
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&i, &j| data[j].total_cmp(&data[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Keeps the entries of `w` whose IGIA value is among the top `p` fraction.
pub fn sparsify(w: &Tensor, f: &Tensor, p: f64) -> Result<Tensor> {
    check_same("sparsify", w, f)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("sparsity {p} not in [0, 1]")));
    }
    let mut out = Tensor::zeros(w.shape());
    for i in survivors(f, p) {
        out.data_mut()[i] = w.data()[i];
    }
    Ok(out)
}

/// Adds every donor entry whose sign equals the (nonzero) sign of `w1`.
pub fn sign_merge(w1: &Tensor, donors: &[Tensor]) -> Result<Tensor> {
    for d in donors {
        check_same("sign_merge", w1, d)?;
    }
    let mut out = w1.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let s = sign(w1.data()[i]);
        if s == 0.0 {
            continue;
        }
        for d in donors {
            let v = d.data()[i];
            if sign(v) == s {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// `Σ λ_i · W_i`.
pub fn weighted_average_merge(tensors: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if tensors.is_empty() || tensors.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} tensors but {} weights",
            tensors.len(),
            weights.len()
        )));
    }
    validate_weights(weights)?;
    let mut out = Tensor::zeros(tensors[0].shape());
    for (t, &w) in tensors.iter().zip(weights) {
        check_same("weighted_average_merge", &out, t)?;
        for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// `(½, ½)` when the donor entry is important enough and agrees in sign
/// with a nonzero target entry, `(1, 0)` otherwise.
pub fn adaptive_lambda(f_m: f64, sign_r: f64, sign_m: f64, tau: f64) -> (f64, f64) {
    if f_m * f_m >= tau && sign_m == sign_r && sign_r != 0.0 {
        (0.5, 0.5)
    } else {
        (1.0, 0.0)
    }
}

/// Per-entry `λ` for merging `theta_m` into `theta_r`.
pub fn adaptive_lambdas(theta_r: &Tensor, theta_m: &Tensor, f_m: &Tensor, tau: f64) -> Result<Vec<(f64, f64)>> {
    check_same("adaptive_lambdas", theta_r, theta_m)?;
    check_same("adaptive_lambdas", theta_m, f_m)?;
    Ok((0..theta_r.numel())
        .map(|i| {
            adaptive_lambda(
                f_m.data()[i],
                sign(theta_r.data()[i]),
                sign(theta_m.data()[i]),
                tau,
            )
        })
        .collect())
}

/// Threshold on `F²` whose surviving set matches [`sparsify`] at the same
/// `p` (barring ties at the boundary). `p = 0` yields `+∞`.
pub fn default_tau(f_m: &Tensor, p: f64) -> f64 {
    let k = keep_count(p, f_m.numel());
    if k == 0 {
        return f64::INFINITY;
    }
    let mut sq: Vec<f64> = f_m.data().iter().map(|v| v * v).collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    sq[k - 1]
}

/// Isotropic combination `λ_r θ_r + λ_m θ_m` per entry.
pub fn isotropic_merge(theta_r: &Tensor, theta_m: &Tensor, lambdas: &[(f64, f64)]) -> Result<Tensor> {
    check_same("isotropic_merge", theta_r, theta_m)?;
    check_lambdas(theta_r, lambdas)?;
    let mut out = theta_r.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let (lr, lm) = lambdas[i];
        if lm != 0.0 {
            *o = lr * theta_r.data()[i] + lm * theta_m.data()[i];
        }
    }
    Ok(out)
}

fn check_lambdas(t: &Tensor, lambdas: &[(f64, f64)]) -> Result<()> {
    if lambdas.len() != t.numel() {
        return Err(Error::Dimension {
            op: "lambdas",
            left: vec![lambdas.len()],
            right: vec![t.numel()],
        });
    }
    Ok(())
}

/// `(λ_r F_r θ_r + λ_m F_m θ_m) / (λ_r F_r + λ_m F_m)` per entry. Entries
/// with `λ_m = 0` or a denominator below [`FISHER_EPS`] keep `θ_r` exactly.
pub fn fisher_merge(
    theta_r: &Tensor,
    theta_m: &Tensor,
    f_r: &Tensor,
    f_m: &Tensor,
    lambdas: &[(f64, f64)],
) -> Result<Tensor> {
    check_same("fisher_merge", theta_r, theta_m)?;
    check_same("fisher_merge", theta_r, f_r)?;
    check_same("fisher_merge", theta_r, f_m)?;
    check_lambdas(theta_r, lambdas)?;
    let mut out = theta_r.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let (lr, lm) = lambdas[i];
        if lm == 0.0 {
            continue;
        }
        let (wr, wm) = (lr * f_r.data()[i], lm * f_m.data()[i]);
        let denom = wr + wm;
        if denom >= FISHER_EPS {
            *o = (wr * theta_r.data()[i] + wm * theta_m.data()[i]) / denom;
        }
    }
    Ok(out)
}

/// Applies the plan's merge assignments, returning a model whose target
/// layers carry the merged weights. Pruned layers are still present; the
/// caller removes them. Only base weights are merged; adapters and norm
/// gains are left as they are.
pub fn merge_layer(model: &ModelState, plan: &PrunePlan, igia: &IgiaMap, cfg: &MergeConfig) -> Result<ModelState> {
    merge_layer_with(&StrategyRegistry::default(), model, plan, igia, cfg)
}

pub fn merge_layer_with(
    registry: &StrategyRegistry,
    model: &ModelState,
    plan: &PrunePlan,
    igia: &IgiaMap,
    cfg: &MergeConfig,
) -> Result<ModelState> {
    cfg.validate()?;
    let strategy = registry.create(cfg)?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&donor, &target) in &plan.merge_target {
        groups.entry(target).or_default().push(donor);
    }
    let mut out = model.clone();
    for (&target, donors) in &groups {
        let target_layer = model
            .layer(target)
            .ok_or_else(|| Error::Plan(format!("merge target {target} is not in the model")))?;
        for &d in donors {
            if model.layer(d).is_none() {
                return Err(Error::Plan(format!("merged layer {d} is not in the model")));
            }
        }
        for sub in Sublayer::ALL {
            let mut inputs = MergeInputs {
                target: &target_layer.linear(sub).weight,
                target_igia: igia.get(&linear_name(target, sub)).map(|m| &m.f),
                donors: Vec::with_capacity(donors.len()),
            };
            for &d in donors {
                let name = linear_name(d, sub);
                let f = igia.get(&name).ok_or_else(|| Error::MissingIgia(name.clone()))?;
                inputs.donors.push(Donor {
                    weight: &model.layer(d).expect("checked above").linear(sub).weight,
                    igia: &f.f,
                });
            }
            let merged = strategy.merge(&inputs)?;
            if !merged.is_finite() {
                return Err(Error::NonFinite(format!("merged {}", linear_name(target, sub))));
            }
            out.layer_mut(target).expect("target exists").linear_mut(sub).weight = merged;
        }
    }
    Ok(out)
}
