//! One pre-norm transformer block: causal multi-head attention followed by a
//! SwiGLU MLP, each wrapped in a residual connection. Backward passes are
//! derived by hand.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::lora::{linear_name, LinearBackward, LinearWithLora, Sublayer};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock {
    /// Original index of this block in the unpruned model.
    pub id: usize,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    /// Indexed by [`Sublayer::index`].
    pub linears: Vec<LinearWithLora>,
}

impl LayerBlock {
    pub fn linear(&self, sub: Sublayer) -> &LinearWithLora {
        &self.linears[sub.index()]
    }

    pub fn linear_mut(&mut self, sub: Sublayer) -> &mut LinearWithLora {
        &mut self.linears[sub.index()]
    }

    pub fn name(&self, sub: Sublayer) -> String {
        linear_name(self.id, sub)
    }

    pub fn base_param_count(&self) -> usize {
        self.attn_norm.numel()
            + self.mlp_norm.numel()
            + self.linears.iter().map(|l| l.weight.numel()).sum::<usize>()
    }
}

/// Activations retained by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BlockTape {
    x: Tensor,
    n1: Tensor,
    rms1: Vec<f64>,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    attn: Tensor,
    h: Tensor,
    n2: Tensor,
    rms2: Vec<f64>,
    gate: Tensor,
    up: Tensor,
    act: Tensor,
    u: [Tensor; 7],
}

pub(crate) fn rmsnorm(x: &Tensor, gain: &Tensor) -> (Tensor, Vec<f64>) {
    let d = x.cols();
    let g = gain.data();
    let mut out = Tensor::zeros(x.shape());
    let mut rms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = (ms + NORM_EPS).sqrt();
        for ((o, xv), gv) in out.row_mut(i).iter_mut().zip(row).zip(g) {
            *o = gv * xv / r;
        }
        rms.push(r);
    }
    (out, rms)
}

/// Returns `(dx, dgain)`.
pub(crate) fn rmsnorm_backward(
    x: &Tensor,
    rms: &[f64],
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor) {
    let d = x.cols();
    let g = gain.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dg = vec![0.0; d];
    for i in 0..x.rows() {
        let (xr, dyr, r) = (x.row(i), dy.row(i), rms[i]);
        let mut dot = 0.0;
        for j in 0..d {
            dot += g[j] * dyr[j] * xr[j];
            dg[j] += dyr[j] * xr[j] / r;
        }
        let coeff = dot / (d as f64 * r * r * r);
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = g[j] * dyr[j] / r - coeff * xr[j];
        }
    }
    (dx, Tensor::new(vec![d], dg).expect("finite gain grads"))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn head_slice(t: &Tensor, head: usize, dh: usize) -> Tensor {
    let n = t.rows();
    let mut out = Tensor::zeros(&[n, dh]);
    for i in 0..n {
        out.row_mut(i)
            .copy_from_slice(&t.row(i)[head * dh..(head + 1) * dh]);
    }
    out
}

fn write_head(dst: &mut Tensor, src: &Tensor, head: usize, dh: usize) {
    for i in 0..src.rows() {
        dst.row_mut(i)[head * dh..(head + 1) * dh].copy_from_slice(src.row(i));
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) -> Result<()> {
    dst.add_scaled(src, 1.0)
}

pub(crate) fn forward(block: &LayerBlock, x: &Tensor, n_heads: usize) -> Result<(Tensor, BlockTape)> {
    let n = x.rows();
    let d = x.cols();
    let dh = d / n_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let (n1, rms1) = rmsnorm(x, &block.attn_norm);
    let (q, uq) = block.linear(Sublayer::Q).forward(&n1)?;
    let (k, uk) = block.linear(Sublayer::K).forward(&n1)?;
    let (v, uv) = block.linear(Sublayer::V).forward(&n1)?;

    let mut attn = Tensor::zeros(&[n, d]);
    let mut probs = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let (qh, kh, vh) = (
            head_slice(&q, head, dh),
            head_slice(&k, head, dh),
            head_slice(&v, head, dh),
        );
        let mut p = matmul_nt(&qh, &kh)?;
        for i in 0..n {
            let row = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for val in row[..=i].iter_mut() {
                *val *= inv_sqrt;
                max = max.max(*val);
            }
            let mut sum = 0.0;
            for val in row[..=i].iter_mut() {
                *val = (*val - max).exp();
                sum += *val;
            }
            for val in row[..=i].iter_mut() {
                *val /= sum;
            }
            for val in row[i + 1..].iter_mut() {
                *val = 0.0;
            }
        }
        let oh = matmul(&p, &vh)?;
        write_head(&mut attn, &oh, head, dh);
        probs.push(p);
    }

    let (o, uo) = block.linear(Sublayer::O).forward(&attn)?;
    let mut h = x.clone();
    add_into(&mut h, &o)?;

    let (n2, rms2) = rmsnorm(&h, &block.mlp_norm);
    let (gate, ug) = block.linear(Sublayer::Gate).forward(&n2)?;
    let (up, uu) = block.linear(Sublayer::Up).forward(&n2)?;
    let mut act = Tensor::zeros(gate.shape());
    for ((a, g), u) in act.data_mut().iter_mut().zip(gate.data()).zip(up.data()) {
        *a = g * sigmoid(*g) * u;
    }
    let (down, ud) = block.linear(Sublayer::Down).forward(&act)?;
    let mut out = h.clone();
    add_into(&mut out, &down)?;

    let tape = BlockTape {
        x: x.clone(),
        n1,
        rms1,
        q,
        k,
        v,
        probs,
        attn,
        h,
        n2,
        rms2,
        gate,
        up,
        act,
        u: [uq, uk, uv, uo, ug, uu, ud],
    };
    Ok((out, tape))
}

/// Backpropagates `dout` through the block. Parameter gradients are added to
/// `grads` under their checkpoint names; base-weight and norm gradients only
/// when `full` is set. Returns the gradient with respect to the block input.
pub(crate) fn backward(
    block: &LayerBlock,
    tape: &BlockTape,
    dout: &Tensor,
    n_heads: usize,
    full: bool,
    grads: &mut BTreeMap<String, Tensor>,
) -> Result<Tensor> {
    let n = dout.rows();
    let d = dout.cols();
    let dh = d / n_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    // MLP branch.
    let down = block
        .linear(Sublayer::Down)
        .backward(&tape.act, &tape.u[Sublayer::Down.index()], dout, full)?;
    record(grads, block, Sublayer::Down, &down);
    let dact = down.dx;
    let mut dgate = Tensor::zeros(tape.gate.shape());
    let mut dup = Tensor::zeros(tape.up.shape());
    for i in 0..dact.numel() {
        let g = tape.gate.data()[i];
        let sg = sigmoid(g);
        let silu = g * sg;
        let dsilu = sg * (1.0 + g * (1.0 - sg));
        dup.data_mut()[i] = dact.data()[i] * silu;
        dgate.data_mut()[i] = dact.data()[i] * tape.up.data()[i] * dsilu;
    }
    let gate = block
        .linear(Sublayer::Gate)
        .backward(&tape.n2, &tape.u[Sublayer::Gate.index()], &dgate, full)?;
    record(grads, block, Sublayer::Gate, &gate);
    let up = block
        .linear(Sublayer::Up)
        .backward(&tape.n2, &tape.u[Sublayer::Up.index()], &dup, full)?;
    record(grads, block, Sublayer::Up, &up);
    let mut dn2 = gate.dx;
    add_into(&mut dn2, &up.dx)?;
    let (dh_norm, dg2) = rmsnorm_backward(&tape.h, &tape.rms2, &block.mlp_norm, &dn2);
    if full {
        accumulate(grads, format!("layer.{}.mlp_norm", block.id), &dg2);
    }
    let mut dh_total = dout.clone();
    add_into(&mut dh_total, &dh_norm)?;

    // Attention branch.
    let o = block
        .linear(Sublayer::O)
        .backward(&tape.attn, &tape.u[Sublayer::O.index()], &dh_total, full)?;
    record(grads, block, Sublayer::O, &o);
    let dattn = o.dx;
    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    for head in 0..n_heads {
        let p = &tape.probs[head];
        let qh = head_slice(&tape.q, head, dh);
        let kh = head_slice(&tape.k, head, dh);
        let vh = head_slice(&tape.v, head, dh);
        let doh = head_slice(&dattn, head, dh);
        let dp = matmul_nt(&doh, &vh)?;
        let dvh = matmul_tn(p, &doh)?;
        let mut ds = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let (prow, dprow) = (p.row(i), dp.row(i));
            let dot: f64 = prow[..=i].iter().zip(&dprow[..=i]).map(|(a, b)| a * b).sum();
            let dsrow = ds.row_mut(i);
            for j in 0..=i {
                dsrow[j] = prow[j] * (dprow[j] - dot) * inv_sqrt;
            }
        }
        let dqh = matmul(&ds, &kh)?;
        let dkh = matmul_tn(&ds, &qh)?;
        write_head(&mut dq, &dqh, head, dh);
        write_head(&mut dk, &dkh, head, dh);
        write_head(&mut dv, &dvh, head, dh);
    }
    let mut dn1 = Tensor::zeros(&[n, d]);
    for (sub, dy) in [(Sublayer::Q, &dq), (Sublayer::K, &dk), (Sublayer::V, &dv)] {
        let lb = block
            .linear(sub)
            .backward(&tape.n1, &tape.u[sub.index()], dy, full)?;
        record(grads, block, sub, &lb);
        add_into(&mut dn1, &lb.dx)?;
    }
    let (dx_norm, dg1) = rmsnorm_backward(&tape.x, &tape.rms1, &block.attn_norm, &dn1);
    if full {
        accumulate(grads, format!("layer.{}.attn_norm", block.id), &dg1);
    }
    let mut dx = dh_total;
    add_into(&mut dx, &dx_norm)?;
    Ok(dx)
}

fn record(grads: &mut BTreeMap<String, Tensor>, block: &LayerBlock, sub: Sublayer, lb: &LinearBackward) {
    let name = block.name(sub);
    accumulate(grads, format!("{name}.lora_a"), &lb.grad_a);
    accumulate(grads, format!("{name}.lora_b"), &lb.grad_b);
    if let Some(w) = &lb.grad_w {
        accumulate(grads, format!("{name}.weight"), w);
    }
}

pub(crate) fn accumulate(grads: &mut BTreeMap<String, Tensor>, name: String, g: &Tensor) {
    match grads.get_mut(&name) {
        Some(existing) => existing
            .add_scaled(g, 1.0)
            .expect("gradient shapes are fixed per parameter"),
        None => {
            grads.insert(name, g.clone());
        }
    }
}
