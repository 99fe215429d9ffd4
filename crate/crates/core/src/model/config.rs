use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::DEFAULT_NORM_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
}

/// Shape of a decoder-only transformer.
///
/// This is also the `config` object of a weight-file header, so its JSON
/// form is part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub moe: Option<MoeConfig>,
    #[serde(default)]
    pub moe_layer_indices: BTreeSet<usize>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_norm_eps() -> f64 {
    DEFAULT_NORM_EPS
}

impl ModelConfig {
    /// Dense config with `n_heads` heads over `d_model`.
    pub fn dense(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        ffn_hidden: usize,
        vocab_size: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            head_dim: d_model / n_heads.max(1),
            ffn_hidden,
            vocab_size,
            moe: None,
            moe_layer_indices: BTreeSet::new(),
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    /// Same shape with every layer turned into an MoE layer.
    pub fn with_moe(mut self, moe: MoeConfig) -> Self {
        self.moe = Some(moe);
        self.moe_layer_indices = (0..self.n_layers).collect();
        self
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe.is_some() && self.moe_layer_indices.contains(&layer)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_model == 0 || self.vocab_size == 0 || self.n_heads == 0 {
            return bad("d_model, n_heads and vocab_size must be positive".into());
        }
        if self.n_heads * self.head_dim != self.d_model {
            return bad(format!(
                "n_heads ({}) x head_dim ({}) != d_model ({})",
                self.n_heads, self.head_dim, self.d_model
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return bad(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim
            ));
        }
        if self.norm_eps.is_nan()
            || self.norm_eps <= 0.0
            || self.rope_base.is_nan()
            || self.rope_base <= 0.0
        {
            return bad("norm_eps and rope_base must be positive".into());
        }
        match &self.moe {
            Some(moe) => {
                if moe.top_k == 0 || moe.top_k > moe.n_experts {
                    return bad(format!(
                        "top_k {} must be in 1..={}",
                        moe.top_k, moe.n_experts
                    ));
                }
                if moe.expert_hidden == 0 {
                    return bad("expert_hidden must be positive".into());
                }
            }
            None if !self.moe_layer_indices.is_empty() => {
                return bad("moe_layer_indices given without an moe section".into());
            }
            None => {}
        }
        if let Some(&i) = self.moe_layer_indices.iter().find(|&&i| i >= self.n_layers) {
            return bad(format!("moe layer index {i} >= n_layers {}", self.n_layers));
        }
        if self.ffn_hidden == 0 && self.moe_layer_indices.len() < self.n_layers {
            return bad("ffn_hidden must be positive for dense layers".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ModelError::Header(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
