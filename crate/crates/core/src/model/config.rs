use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOperator {
    LayerNorm,
    RmsNorm,
    /// Normalisation without learnable affine parameters.
    SimpleNorm,
}

/// Where normalisation sits relative to each residual sublayer `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `y = x + f(N(x))`
    Pre,
    /// `y = N(x + f(x))`
    Post,
    /// `y = x + N_out(f(N_in(x)))`
    PreSandwich,
    /// `y = N_out(x + f(N_in(x)))`
    PostSandwich,
}

impl NormPlacement {
    pub const ALL: [NormPlacement; 4] = [
        NormPlacement::Pre,
        NormPlacement::Post,
        NormPlacement::PreSandwich,
        NormPlacement::PostSandwich,
    ];

    /// Residual stream inside the final normalisation scope.
    pub fn is_external(self) -> bool {
        matches!(self, NormPlacement::Post | NormPlacement::PostSandwich)
    }

    pub fn is_sandwich(self) -> bool {
        matches!(self, NormPlacement::PreSandwich | NormPlacement::PostSandwich)
    }
}

impl NormOperator {
    pub const ALL: [NormOperator; 3] = [NormOperator::LayerNorm, NormOperator::RmsNorm, NormOperator::SimpleNorm];

    pub fn has_gain(self) -> bool {
        !matches!(self, NormOperator::SimpleNorm)
    }

    pub fn has_bias(self) -> bool {
        matches!(self, NormOperator::LayerNorm)
    }
}

fn default_norm_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Transformer layers inside the recurrent unit.
    pub n_block_layers: usize,
    pub norm_operator: NormOperator,
    pub norm_placement: NormPlacement,
    #[serde(default)]
    pub n_prelude_blocks: usize,
    #[serde(default)]
    pub n_coda_blocks: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale addition model: d=64, 4 heads, d_ff=128, one layer.
    pub fn small(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_block_layers: 1,
            norm_operator: NormOperator::LayerNorm,
            norm_placement: NormPlacement::PostSandwich,
            n_prelude_blocks: 0,
            n_coda_blocks: 0,
            vocab_size,
            max_seq_len,
            tie_embeddings: false,
            norm_eps: default_norm_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return err("d_model, n_heads and d_ff must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return err("d_model must be divisible by n_heads");
        }
        if self.n_block_layers < 1 {
            return err("n_block_layers must be at least 1");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return err("vocab_size and max_seq_len must be positive");
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return err("norm_eps must be a finite nonnegative number");
        }
        Ok(())
    }
}
