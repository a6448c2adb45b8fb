use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, scaled_add, Tensor};

/// Projection slots inside a transformer block, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sublayer {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Sublayer {
    pub const ALL: [Sublayer; 7] = [
        Sublayer::Q,
        Sublayer::K,
        Sublayer::V,
        Sublayer::O,
        Sublayer::Gate,
        Sublayer::Up,
        Sublayer::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Sublayer::Q => "q",
            Sublayer::K => "k",
            Sublayer::V => "v",
            Sublayer::O => "o",
            Sublayer::Gate => "gate",
            Sublayer::Up => "up",
            Sublayer::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Sublayer> {
        Sublayer::ALL.into_iter().find(|sub| sub.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Qualified linear name, `layer.<id>.<sublayer>`.
pub fn linear_name(layer: usize, sub: Sublayer) -> String {
    format!("layer.{layer}.{}", sub.as_str())
}

/// Inverse of [`linear_name`].
pub fn parse_linear_name(name: &str) -> Option<(usize, Sublayer)> {
    let rest = name.strip_prefix("layer.")?;
    let (layer, sub) = rest.split_once('.')?;
    Some((layer.parse().ok()?, Sublayer::parse(sub)?))
}

/// A frozen base weight `W: [out×in]` plus adapter factors
/// `A: [r×in]` and `B: [out×r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWithLora {
    pub name: String,
    pub weight: Tensor,
    pub lora_a: Tensor,
    pub lora_b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

/// Adapter gradients for one linear.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Tensor,
    pub b: Tensor,
}

pub(crate) struct LinearBackward {
    pub dx: Tensor,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
    pub grad_w: Option<Tensor>,
}

impl LinearWithLora {
    pub(crate) fn init(
        name: String,
        out_dim: usize,
        in_dim: usize,
        weight_scale: f64,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = weight_scale / (in_dim as f64).sqrt();
        let weight = uniform(&[out_dim, in_dim], bound, rng);
        let lora_a = uniform(&[rank, in_dim], 1.0 / (in_dim as f64).sqrt(), rng);
        Self {
            name,
            weight,
            lora_a,
            lora_b: Tensor::zeros(&[out_dim, rank]),
            rank,
            alpha,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Multiplier applied to `B·A`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `y = x·Wᵀ + s·(x·Aᵀ)·Bᵀ`; also returns `u = x·Aᵀ` for the backward pass.
    pub(crate) fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let base = matmul_nt(x, &self.weight)?;
        let u = matmul_nt(x, &self.lora_a)?;
        let delta = matmul_nt(&u, &self.lora_b)?;
        Ok((scaled_add(&base, &delta, self.scaling())?, u))
    }

    pub(crate) fn backward(
        &self,
        x: &Tensor,
        u: &Tensor,
        dy: &Tensor,
        full: bool,
    ) -> Result<LinearBackward> {
        let s = self.scaling();
        let t = matmul(dy, &self.lora_b)?;
        let mut dx = matmul(dy, &self.weight)?;
        dx.add_scaled(&matmul(&t, &self.lora_a)?, s)?;
        let grad_a = matmul_tn(&t, x)?.scale(s);
        let grad_b = matmul_tn(dy, u)?.scale(s);
        let grad_w = if full { Some(matmul_tn(dy, x)?) } else { None };
        Ok(LinearBackward {
            dx,
            grad_a,
            grad_b,
            grad_w,
        })
    }

    /// Zeroes the adapter contribution while keeping `A`.
    pub fn reset_adapter(&mut self) {
        self.lora_b = Tensor::zeros(self.lora_b.shape());
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let (out, inp, r) = (self.out_dim(), self.in_dim(), self.rank);
        if self.lora_a.shape() != [r, inp] || self.lora_b.shape() != [out, r] {
            return Err(Error::Dimension {
                op: "lora adapter",
                left: self.lora_b.shape().to_vec(),
                right: self.lora_a.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Folds the adapter into the base weight: `W + s·B·A`.
pub fn merge_lora(linear: &LinearWithLora) -> Result<Tensor> {
    let delta = matmul(&linear.lora_b, &linear.lora_a)?;
    scaled_add(&linear.weight, &delta, linear.scaling())
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}
