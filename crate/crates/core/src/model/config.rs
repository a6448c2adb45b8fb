use crate::error::{Error, Result};

/// Shape of the toy decoder-only transformer.
///
/// Every attention projection (`q`, `k`, `v`, `o`) and every MLP projection
/// (`gate`, `up`, `down`) carries a low-rank adapter of rank `lora_rank`,
/// applied as `W + (lora_alpha / lora_rank) · B · A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 16,
            max_seq: 16,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("lora_rank", self.lora_rank),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !self.lora_alpha.is_finite() {
            return Err(Error::Config("lora_alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Base parameters of one transformer block: two norm gains plus the
    /// seven projection matrices. Adapters are excluded.
    pub fn block_param_count(&self) -> usize {
        let d = self.d_model;
        2 * d + 4 * d * d + 3 * d * self.d_ff
    }

    /// Adapter parameters of one block (`A` and `B` for each projection).
    pub fn block_adapter_param_count(&self) -> usize {
        let (d, f, r) = (self.d_model, self.d_ff, self.lora_rank);
        4 * r * (d + d) + 3 * r * (d + f)
    }

    /// Embeddings, positional table, final norm and output head.
    pub fn non_block_param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d + self.max_seq * d + d + self.vocab_size * d
    }
}
