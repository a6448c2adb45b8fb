use std::collections::BTreeMap;

use super::{
    adaptive_lambdas, default_tau, fisher_merge, isotropic_merge, sign_merge, sparsify, weighted_average_merge,
    MergeConfig,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One pruned layer's sublayer weight together with its IGIA matrix.
#[derive(Debug, Clone, Copy)]
pub struct Donor<'a> {
    pub weight: &'a Tensor,
    pub igia: &'a Tensor,
}

/// Operands for merging one sublayer position.
#[derive(Debug, Clone)]
pub struct MergeInputs<'a> {
    pub target: &'a Tensor,
    pub target_igia: Option<&'a Tensor>,
    /// Ascending layer order.
    pub donors: Vec<Donor<'a>>,
}

pub trait MergeStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn merge(&self, inputs: &MergeInputs<'_>) -> Result<Tensor>;
}

fn sparsified(inputs: &MergeInputs<'_>, p: f64) -> Result<Vec<Tensor>> {
    inputs.donors.iter().map(|d| sparsify(d.weight, d.igia, p)).collect()
}

/// Sparsify donors, then add sign-agreeing entries to the target.
pub struct SignSum {
    pub p: f64,
}

impl MergeStrategy for SignSum {
    fn name(&self) -> &'static str {
        "sign-sum"
    }

    fn merge(&self, inputs: &MergeInputs<'_>) -> Result<Tensor> {
        sign_merge(inputs.target, &sparsified(inputs, self.p)?)
    }
}

/// Sparsify donors, then take a fixed convex combination with the target.
pub struct WeightedAverage {
    pub p: f64,
    pub weights: Option<Vec<f64>>,
}

impl MergeStrategy for WeightedAverage {
    fn name(&self) -> &'static str {
        "weighted-avg"
    }

    fn merge(&self, inputs: &MergeInputs<'_>) -> Result<Tensor> {
        let mut tensors = vec![inputs.target.clone()];
        tensors.extend(sparsified(inputs, self.p)?);
        let weights = match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / tensors.len() as f64; tensors.len()],
        };
        weighted_average_merge(&tensors, &weights)
    }
}

fn tau_for(fixed: Option<f64>, f_m: &Tensor, p: f64) -> f64 {
    fixed.unwrap_or_else(|| default_tau(f_m, p))
}

/// Entrywise average of the target with important, sign-agreeing donor
/// entries. Several donors are folded in one at a time.
pub struct AdaptiveIsotropic {
    pub p: f64,
    pub tau: Option<f64>,
}

impl MergeStrategy for AdaptiveIsotropic {
    fn name(&self) -> &'static str {
        "adaptive-isotropic"
    }

    fn merge(&self, inputs: &MergeInputs<'_>) -> Result<Tensor> {
        let mut theta = inputs.target.clone();
        for d in &inputs.donors {
            let lambdas = adaptive_lambdas(&theta, d.weight, d.igia, tau_for(self.tau, d.igia, self.p))?;
            theta = isotropic_merge(&theta, d.weight, &lambdas)?;
        }
        Ok(theta)
    }
}

/// As [`AdaptiveIsotropic`] but weighting each side by its IGIA value. The
/// target's own IGIA matrix is used for every fold.
pub struct AdaptiveFisher {
    pub p: f64,
    pub tau: Option<f64>,
}

impl MergeStrategy for AdaptiveFisher {
    fn name(&self) -> &'static str {
        "adaptive-fisher"
    }

    fn merge(&self, inputs: &MergeInputs<'_>) -> Result<Tensor> {
        let f_r = inputs
            .target_igia
            .ok_or_else(|| Error::MissingIgia("adaptive-fisher needs the target's IGIA matrix".into()))?;
        let mut theta = inputs.target.clone();
        for d in &inputs.donors {
            let lambdas = adaptive_lambdas(&theta, d.weight, d.igia, tau_for(self.tau, d.igia, self.p))?;
            theta = fisher_merge(&theta, d.weight, f_r, d.igia, &lambdas)?;
        }
        Ok(theta)
    }
}

pub type StrategyConstructor = fn(&MergeConfig) -> Box<dyn MergeStrategy>;

/// Name → constructor map for merge strategies.
pub struct StrategyRegistry {
    entries: BTreeMap<&'static str, StrategyConstructor>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut reg = Self {
            entries: BTreeMap::new(),
        };
        reg.register("sign-sum", |c| Box::new(SignSum { p: c.sparsity_p }));
        reg.register("weighted-avg", |c| {
            Box::new(WeightedAverage {
                p: c.sparsity_p,
                weights: c.avg_weights.clone(),
            })
        });
        reg.register("adaptive-isotropic", |c| {
            Box::new(AdaptiveIsotropic {
                p: c.sparsity_p,
                tau: c.tau,
            })
        });
        reg.register("adaptive-fisher", |c| {
            Box::new(AdaptiveFisher {
                p: c.sparsity_p,
                tau: c.tau,
            })
        });
        reg
    }
}

impl StrategyRegistry {
    pub fn register(&mut self, name: &'static str, ctor: StrategyConstructor) {
        self.entries.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn create(&self, cfg: &MergeConfig) -> Result<Box<dyn MergeStrategy>> {
        self.entries
            .get(cfg.strategy.as_str())
            .map(|ctor| ctor(cfg))
            .ok_or_else(|| Error::UnknownName {
                kind: "merge strategy",
                name: cfg.strategy.clone(),
                available: self.names().join(", "),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::from_vec(x.to_vec()).unwrap()
    }

    fn cfg(name: &str) -> MergeConfig {
        MergeConfig {
            strategy: name.into(),
            sparsity_p: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn registry_names_and_unknown() {
        let reg = StrategyRegistry::default();
        for name in reg.names() {
            assert_eq!(reg.create(&cfg(name)).unwrap().name(), name);
        }
        assert!(matches!(reg.create(&cfg("ties")), Err(Error::UnknownName { .. })));
    }

    #[test]
    fn strategies_on_one_donor() {
        let reg = StrategyRegistry::default();
        let (t, ft) = (v(&[1.0, -2.0, 3.0]), v(&[1.0, 1.0, 1.0]));
        let (d, fd) = (v(&[3.0, 2.0, 1.0]), v(&[1.0, 1.0, 3.0]));
        let inputs = MergeInputs {
            target: &t,
            target_igia: Some(&ft),
            donors: vec![Donor { weight: &d, igia: &fd }],
        };
        let run = |name: &str| reg.create(&cfg(name)).unwrap().merge(&inputs).unwrap();
        assert_eq!(run("sign-sum"), v(&[4.0, -2.0, 4.0]));
        assert_eq!(run("weighted-avg"), v(&[2.0, 0.0, 2.0]));
        assert_eq!(run("adaptive-isotropic"), v(&[2.0, -2.0, 2.0]));
        // Third entry: (1·3 + 3·1) / (1 + 3) = 1.5.
        assert_eq!(run("adaptive-fisher"), v(&[2.0, -2.0, 1.5]));
    }

    #[test]
    fn fisher_requires_target_igia() {
        let t = v(&[1.0]);
        let inputs = MergeInputs {
            target: &t,
            target_igia: None,
            donors: vec![Donor { weight: &t, igia: &t }],
        };
        let s = AdaptiveFisher { p: 1.0, tau: None };
        assert!(matches!(s.merge(&inputs), Err(Error::MissingIgia(_))));
    }
}
