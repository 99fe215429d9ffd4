use std::ops::Range;

use super::block::{block_forward, RoutingRecord};
use super::{HiddenState, KvCache, KvSlot, ModelConfig, ModelError};
use crate::numerics::{matmul, rms_norm, Matrix, SeededRng};

/// Gated SiLU MLP: `(silu(x W_gate) * (x W_up)) W_down`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w_gate: Matrix<f32>,
    pub w_up: Matrix<f32>,
    pub w_down: Matrix<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeWeights {
    /// `d_model x n_experts` gating matrix.
    pub router: Matrix<f32>,
    pub experts: Vec<Mlp>,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward {
    Dense(Mlp),
    Moe(MoeWeights),
}

/// Parameters of one pre-norm decoder block. Projections are stored
/// `in x out`, so a row-vector state multiplies from the left.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub index: usize,
    pub attn_norm: Vec<f32>,
    pub wq: Matrix<f32>,
    pub wk: Matrix<f32>,
    pub wv: Matrix<f32>,
    pub wo: Matrix<f32>,
    pub mlp_norm: Vec<f32>,
    pub ffn: FeedForward,
}

impl LayerWeights {
    /// Zeroes the attention output and MLP down projections, turning the
    /// block into the identity map.
    pub fn make_pure_residual(&mut self) {
        self.wo = Matrix::zeros(self.wo.rows(), self.wo.cols());
        match &mut self.ffn {
            FeedForward::Dense(m) => m.w_down = Matrix::zeros(m.w_down.rows(), m.w_down.cols()),
            FeedForward::Moe(moe) => {
                for m in &mut moe.experts {
                    m.w_down = Matrix::zeros(m.w_down.rows(), m.w_down.cols());
                }
            }
        }
    }
}

/// A frozen decoder-only transformer `f = L_{N-1} o ... o L_0` with
/// embedding and LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Matrix<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Matrix<f32>,
}

/// Standard deviation multiplier of the residual-writing projections
/// (attention output, MLP down). Keeps each block a moderate perturbation.
const RESIDUAL_GAIN: f64 = 0.35;

fn random_mlp(rng: &mut SeededRng, d: usize, hidden: usize) -> Mlp {
    Mlp {
        w_gate: rng.normal_matrix(d, hidden, 1.0 / (d as f64).sqrt()),
        w_up: rng.normal_matrix(d, hidden, 1.0 / (d as f64).sqrt()),
        w_down: rng.normal_matrix(hidden, d, RESIDUAL_GAIN / (hidden as f64).sqrt()),
    }
}

fn random_gain(rng: &mut SeededRng, d: usize) -> Vec<f32> {
    (0..d).map(|_| (1.0 + 0.1 * rng.normal()) as f32).collect()
}

impl Model {
    /// Seeded random model. Identical `(config, seed)` pairs give bitwise
    /// identical weights.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = SeededRng::new(seed);
        let embed = rng.normal_matrix(config.vocab_size, d, 1.0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for index in 0..config.n_layers {
            let mut lr = rng.fork(index as u64 + 1);
            let scale = 1.0 / (d as f64).sqrt();
            let attn_norm = random_gain(&mut lr, d);
            let wq = lr.normal_matrix(d, d, scale);
            let wk = lr.normal_matrix(d, d, scale);
            let wv = lr.normal_matrix(d, d, scale);
            let wo = lr.normal_matrix(d, d, RESIDUAL_GAIN * scale);
            let mlp_norm = random_gain(&mut lr, d);
            let ffn = match config.moe {
                Some(moe) if config.is_moe_layer(index) => FeedForward::Moe(MoeWeights {
                    router: lr.normal_matrix(d, moe.n_experts, scale),
                    experts: (0..moe.n_experts)
                        .map(|_| random_mlp(&mut lr, d, moe.expert_hidden))
                        .collect(),
                    top_k: moe.top_k,
                }),
                _ => FeedForward::Dense(random_mlp(&mut lr, d, config.ffn_hidden)),
            };
            layers.push(LayerWeights {
                index,
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                mlp_norm,
                ffn,
            });
        }
        let mut hr = rng.fork(0);
        let final_norm = random_gain(&mut hr, d);
        let lm_head = hr.normal_matrix(d, config.vocab_size, 1.0 / (d as f64).sqrt());
        Ok(Self {
            config: config.clone(),
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.n_layers(), self.config.d_model)
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<HiddenState, ModelError> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfVocab {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
            data.extend_from_slice(self.embed.row(t as usize));
        }
        Ok(Matrix::new(tokens.len(), d, data)?)
    }

    /// Applies layer `index`. With a slot, attention reads the cached past
    /// and the new rows are appended to it.
    pub fn layer_forward(
        &self,
        index: usize,
        x: &HiddenState,
        cache: Option<&mut KvSlot>,
        pinned: Option<&RoutingRecord>,
    ) -> Result<(HiddenState, Option<RoutingRecord>), ModelError> {
        let layer = self.layers.get(index).ok_or(ModelError::LayerOutOfRange {
            index,
            n_layers: self.n_layers(),
        })?;
        block_forward(x, layer, &self.config, cache, pinned)
    }

    /// Applies layers in `range` in order, caching each iff `cache` is given.
    pub fn run_layers(
        &self,
        range: Range<usize>,
        x: HiddenState,
        mut cache: Option<&mut KvCache>,
    ) -> Result<HiddenState, ModelError> {
        let mut x = x;
        for i in range {
            let slot = cache.as_deref_mut().map(|c| c.slot_mut(i));
            x = self.layer_forward(i, &x, slot, None)?.0;
        }
        Ok(x)
    }

    /// Final norm followed by the LM head.
    pub fn head(&self, x: &HiddenState) -> Result<Matrix<f32>, ModelError> {
        let mut normed = Vec::with_capacity(x.rows() * x.cols());
        for row in x.row_iter() {
            normed.extend(rms_norm(row, &self.final_norm, self.config.norm_eps)?);
        }
        let normed = Matrix::new(x.rows(), x.cols(), normed)?;
        Ok(matmul(&normed, &self.lm_head)?)
    }

    /// Full forward pass; the cache grows by `tokens.len()` per layer iff
    /// one is supplied.
    pub fn forward(
        &self,
        tokens: &[u32],
        cache: Option<&mut KvCache>,
    ) -> Result<Matrix<f32>, ModelError> {
        let x = self.embed(tokens)?;
        let x = self.run_layers(0..self.n_layers(), x, cache)?;
        self.head(&x)
    }
}
