//! Toy decoder-only transformer with per-projection low-rank adapters.
//!
//! Parameters are addressed by stable string names that double as checkpoint
//! keys: `embed`, `pos`, `final_norm`, `head`, `layer.<id>.attn_norm`,
//! `layer.<id>.mlp_norm` and `layer.<id>.<sublayer>.{weight,lora_a,lora_b}`.
//! Layer ids are the original block indices and survive pruning.

mod block;
mod config;
mod lora;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use block::LayerBlock;
pub use config::ModelConfig;
pub use lora::{linear_name, merge_lora, parse_linear_name, AdapterGrad, LinearWithLora, Sublayer};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Tensor};
use block::BlockTape;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerBlock>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

/// Whether a parameter belongs to the frozen base model or to an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Base,
    Adapter,
}

/// Activation record produced by [`ModelState::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    tokens: Vec<u32>,
    layer_ids: Vec<usize>,
    blocks: Vec<BlockTape>,
    x_final: Tensor,
    rms_final: Vec<f64>,
    normed_final: Tensor,
    logits: Tensor,
}

impl Tape {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

/// Output of a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    /// Mean cross-entropy over the scored positions.
    pub loss: f64,
    /// Number of scored positions.
    pub count: usize,
    /// Gradients keyed by parameter name. Adapter factors are always present;
    /// base weights, norms, embeddings and head only in full mode.
    pub grads: BTreeMap<String, Tensor>,
}

/// Adapter gradients of one training step, keyed by linear name.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord {
    /// 1-based step index.
    pub step: usize,
    pub grads: BTreeMap<String, AdapterGrad>,
}

impl GradRecord {
    /// Extracts the adapter gradients of every named linear from a backward
    /// gradient map.
    pub fn from_grads<'a>(
        step: usize,
        grads: &BTreeMap<String, Tensor>,
        linears: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut out = BTreeMap::new();
        for name in linears {
            let get = |part: &str| {
                grads
                    .get(&format!("{name}.{part}"))
                    .cloned()
                    .ok_or_else(|| Error::UnknownLinear(name.to_string()))
            };
            out.insert(
                name.to_string(),
                AdapterGrad {
                    a: get("lora_a")?,
                    b: get("lora_b")?,
                },
            );
        }
        Ok(Self { step, grads: out })
    }

    /// First linear whose gradients contain a non-finite entry.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.grads
            .iter()
            .find(|(_, g)| !g.a.is_finite() || !g.b.is_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn scaled(&self, factor_a: f64, factor_b: f64) -> GradRecord {
        GradRecord {
            step: self.step,
            grads: self
                .grads
                .iter()
                .map(|(n, g)| {
                    (
                        n.clone(),
                        AdapterGrad {
                            a: g.a.scale(factor_a),
                            b: g.b.scale(factor_b),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl ModelState {
    /// Deterministic initialization: the same `(config, seed)` always yields
    /// bit-identical parameters. Adapters start with `B = 0`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let embed = lora::uniform(&[v, d], 1.0, &mut rng);
        let pos = lora::uniform(&[config.max_seq, d], 0.5, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for id in 0..config.n_layers {
            let linears = Sublayer::ALL
                .iter()
                .map(|&sub| {
                    let (out_dim, in_dim) = match sub {
                        Sublayer::Gate | Sublayer::Up => (f, d),
                        Sublayer::Down => (d, f),
                        _ => (d, d),
                    };
                    LinearWithLora::init(
                        linear_name(id, sub),
                        out_dim,
                        in_dim,
                        1.0,
                        config.lora_rank,
                        config.lora_alpha,
                        &mut rng,
                    )
                })
                .collect();
            layers.push(LayerBlock {
                id,
                attn_norm: Tensor::filled(&[d], 1.0),
                mlp_norm: Tensor::filled(&[d], 1.0),
                linears,
            });
        }
        let head = lora::uniform(&[v, d], 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            config: config.clone(),
            embed,
            pos,
            layers,
            final_norm: Tensor::filled(&[d], 1.0),
            head,
        })
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.id).collect()
    }

    pub fn layer(&self, id: usize) -> Option<&LayerBlock> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_mut(&mut self, id: usize) -> Option<&mut LayerBlock> {
        self.layers.iter_mut().find(|l| l.id == id)
    }

    pub fn linears(&self) -> impl Iterator<Item = &LinearWithLora> {
        self.layers.iter().flat_map(|l| l.linears.iter())
    }

    pub fn linear_names(&self) -> Vec<String> {
        self.linears().map(|l| l.name.clone()).collect()
    }

    /// All parameters in a fixed order, with their kind.
    pub fn params(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = vec![
            ("embed".to_string(), ParamKind::Base, &self.embed),
            ("pos".to_string(), ParamKind::Base, &self.pos),
        ];
        for layer in &self.layers {
            out.push((format!("layer.{}.attn_norm", layer.id), ParamKind::Base, &layer.attn_norm));
            out.push((format!("layer.{}.mlp_norm", layer.id), ParamKind::Base, &layer.mlp_norm));
            for lin in &layer.linears {
                out.push((format!("{}.weight", lin.name), ParamKind::Base, &lin.weight));
                out.push((format!("{}.lora_a", lin.name), ParamKind::Adapter, &lin.lora_a));
                out.push((format!("{}.lora_b", lin.name), ParamKind::Adapter, &lin.lora_b));
            }
        }
        out.push(("final_norm".to_string(), ParamKind::Base, &self.final_norm));
        out.push(("head".to_string(), ParamKind::Base, &self.head));
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "embed" => return Some(&mut self.embed),
            "pos" => return Some(&mut self.pos),
            "final_norm" => return Some(&mut self.final_norm),
            "head" => return Some(&mut self.head),
            _ => {}
        }
        let rest = name.strip_prefix("layer.")?;
        let (id, rest) = rest.split_once('.')?;
        let layer = self.layer_mut(id.parse().ok()?)?;
        match rest {
            "attn_norm" => return Some(&mut layer.attn_norm),
            "mlp_norm" => return Some(&mut layer.mlp_norm),
            _ => {}
        }
        let (sub, part) = rest.split_once('.')?;
        let lin = layer.linear_mut(Sublayer::parse(sub)?);
        match part {
            "weight" => Some(&mut lin.weight),
            "lora_a" => Some(&mut lin.lora_a),
            "lora_b" => Some(&mut lin.lora_b),
            _ => None,
        }
    }

    pub fn base_param_count(&self) -> usize {
        self.config.non_block_param_count() + self.block_param_count()
    }

    /// Base parameters held by transformer blocks (embeddings and head excluded).
    pub fn block_param_count(&self) -> usize {
        self.layers.iter().map(LayerBlock::base_param_count).sum()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.linears()
            .map(|l| l.lora_a.numel() + l.lora_b.numel())
            .sum()
    }

    /// Causal decoder logits `[seq × vocab]` and the activation record.
    pub fn forward(&self, tokens: &[u32]) -> Result<(Tensor, Tape)> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > cfg.max_seq {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                cfg.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} out of range for vocab_size {}",
                cfg.vocab_size
            )));
        }
        let n = tokens.len();
        let mut x = Tensor::zeros(&[n, cfg.d_model]);
        for (p, &t) in tokens.iter().enumerate() {
            let e = self.embed.row(t as usize);
            let q = self.pos.row(p);
            for ((o, a), b) in x.row_mut(p).iter_mut().zip(e).zip(q) {
                *o = a + b;
            }
        }
        let mut blocks = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, tape) = block::forward(layer, &x, cfg.n_heads)?;
            blocks.push(tape);
            x = out;
        }
        let (normed, rms) = block::rmsnorm(&x, &self.final_norm);
        let logits = matmul_nt(&normed, &self.head)?;
        let tape = Tape {
            tokens: tokens.to_vec(),
            layer_ids: self.layer_ids(),
            blocks,
            x_final: x,
            rms_final: rms,
            normed_final: normed,
            logits: logits.clone(),
        };
        Ok((logits, tape))
    }

    /// Mean next-token cross-entropy over positions `score_from..` and its
    /// gradients.
    pub fn backward(
        &self,
        tape: &Tape,
        targets: &[u32],
        score_from: usize,
        full: bool,
    ) -> Result<Backward> {
        let count = targets.len().saturating_sub(score_from);
        if count == 0 {
            return Err(Error::Input("no scored target positions".into()));
        }
        let mut grads = BTreeMap::new();
        let sum = self.backward_into(tape, targets, score_from, full, 1.0 / count as f64, &mut grads)?;
        Ok(Backward {
            loss: sum / count as f64,
            count,
            grads,
        })
    }

    /// Adds the gradient of `weight · Σ CE` into `grads` and returns `Σ CE`.
    pub(crate) fn backward_into(
        &self,
        tape: &Tape,
        targets: &[u32],
        score_from: usize,
        full: bool,
        weight: f64,
        grads: &mut BTreeMap<String, Tensor>,
    ) -> Result<f64> {
        let cfg = &self.config;
        if tape.layer_ids != self.layer_ids() || tape.logits.cols() != cfg.vocab_size {
            return Err(Error::Input("tape was produced by a different model".into()));
        }
        let n = tape.tokens.len();
        if targets.len() != n {
            return Err(Error::Input(format!(
                "expected {n} targets, got {}",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!("target {t} out of range")));
        }

        let mut loss_sum = 0.0;
        let mut dlogits = Tensor::zeros(tape.logits.shape());
        for p in score_from..n {
            let row = tape.logits.row(p);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            let t = targets[p] as usize;
            loss_sum += lse - row[t];
            let drow = dlogits.row_mut(p);
            for (j, dv) in drow.iter_mut().enumerate() {
                *dv = (row[j] - lse).exp() * weight;
            }
            drow[t] -= weight;
        }

        let dnormed = matmul(&dlogits, &self.head)?;
        if full {
            block::accumulate(grads, "head".into(), &matmul_tn(&dlogits, &tape.normed_final)?);
        }
        let (mut dx, dgain) =
            block::rmsnorm_backward(&tape.x_final, &tape.rms_final, &self.final_norm, &dnormed);
        if full {
            block::accumulate(grads, "final_norm".into(), &dgain);
        }
        for (layer, btape) in self.layers.iter().zip(&tape.blocks).rev() {
            dx = block::backward(layer, btape, &dx, cfg.n_heads, full, grads)?;
        }
        if full {
            let mut dembed = Tensor::zeros(self.embed.shape());
            let mut dpos = Tensor::zeros(self.pos.shape());
            for (p, &t) in tape.tokens.iter().enumerate() {
                for (o, g) in dembed.row_mut(t as usize).iter_mut().zip(dx.row(p)) {
                    *o += g;
                }
                dpos.row_mut(p).copy_from_slice(dx.row(p));
            }
            block::accumulate(grads, "embed".into(), &dembed);
            block::accumulate(grads, "pos".into(), &dpos);
        }
        Ok(loss_sum)
    }

    /// Folds every adapter into its base weight and zeroes `B`.
    pub fn merge_adapters(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            for lin in &mut layer.linears {
                lin.weight = merge_lora(lin)?;
                lin.reset_adapter();
            }
        }
        Ok(())
    }

    /// Zeroes every `B`, removing the adapter contribution.
    pub fn reset_adapters(&mut self) {
        for layer in &mut self.layers {
            for lin in &mut layer.linears {
                lin.reset_adapter();
            }
        }
    }

    /// Removes the given layers (by original id), keeping the survivors in order.
    pub fn drop_layers(&self, pruned: &BTreeSet<usize>) -> Result<ModelState> {
        let ids = self.layer_ids();
        if let Some(unknown) = pruned.iter().find(|id| !ids.contains(id)) {
            return Err(Error::Plan(format!("unknown layer index {unknown}")));
        }
        if pruned.len() >= ids.len() {
            return Err(Error::Plan("cannot prune every layer".into()));
        }
        let mut out = self.clone();
        out.layers.retain(|l| !pruned.contains(&l.id));
        Ok(out)
    }

    /// Named tensors in checkpoint order.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params()
            .into_iter()
            .map(|(name, _, t)| (name, t.clone()))
            .collect()
    }

    /// Rebuilds a model from named tensors, as written by [`Self::to_named_tensors`].
    pub fn from_named_tensors(
        config: &ModelConfig,
        layer_ids: &[usize],
        mut tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        if layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("layer ids must be strictly increasing".into()));
        }
        if layer_ids.len() > config.n_layers || layer_ids.iter().any(|&id| id >= config.n_layers) {
            return Err(Error::Input("layer ids exceed n_layers".into()));
        }
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Input(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Dimension {
                    op: "load tensor",
                    left: t.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
            Ok(t)
        };
        let (d, f, v, r) = (config.d_model, config.d_ff, config.vocab_size, config.lora_rank);
        let embed = take("embed".into(), &[v, d])?;
        let pos = take("pos".into(), &[config.max_seq, d])?;
        let mut layers = Vec::with_capacity(layer_ids.len());
        for &id in layer_ids {
            let attn_norm = take(format!("layer.{id}.attn_norm"), &[d])?;
            let mlp_norm = take(format!("layer.{id}.mlp_norm"), &[d])?;
            let mut linears = Vec::with_capacity(7);
            for sub in Sublayer::ALL {
                let name = linear_name(id, sub);
                let (out_dim, in_dim) = match sub {
                    Sublayer::Gate | Sublayer::Up => (f, d),
                    Sublayer::Down => (d, f),
                    _ => (d, d),
                };
                let lin = LinearWithLora {
                    weight: take(format!("{name}.weight"), &[out_dim, in_dim])?,
                    lora_a: take(format!("{name}.lora_a"), &[r, in_dim])?,
                    lora_b: take(format!("{name}.lora_b"), &[out_dim, r])?,
                    name,
                    rank: r,
                    alpha: config.lora_alpha,
                };
                lin.check_shapes()?;
                linears.push(lin);
            }
            layers.push(LayerBlock {
                id,
                attn_norm,
                mlp_norm,
                linears,
            });
        }
        let final_norm = take("final_norm".into(), &[d])?;
        let head = take("head".into(), &[v, d])?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Input(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            config: config.clone(),
            embed,
            pos,
            layers,
            final_norm,
            head,
        })
    }
}
