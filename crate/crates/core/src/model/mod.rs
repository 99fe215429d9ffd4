//! The frozen network: pre-norm dense and MoE decoder blocks, embeddings,
//! LM head, KV cache and the on-disk weight format.

mod block;
mod cache;
mod config;
mod io;
mod weights;

pub use block::{block_forward, moe_mlp, RoutingRecord, TokenRoute};
pub use cache::{CacheEvent, KvCache, KvSlot};
pub use config::{ModelConfig, MoeConfig};
pub use io::{from_bytes, load_weights, save_weights, to_bytes, FORMAT_VERSION, MAGIC};
pub use weights::{FeedForward, LayerWeights, Mlp, Model, MoeWeights};

use thiserror::Error;

use crate::numerics::{Matrix, NumericsError};

/// Residual stream of `T` tokens, shape `T x d_model`.
pub type HiddenState = Matrix<f32>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("cache slot belongs to layer {found}, used for layer {expected}")]
    WrongCacheLayer { expected: usize, found: usize },
    #[error("cache crop to {requested} on layer {layer} holding {len} entries")]
    CropBeyondLength {
        layer: usize,
        requested: usize,
        len: usize,
    },
    #[error("token id {token} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("layer index {index} out of range for {n_layers} layers")]
    LayerOutOfRange { index: usize, n_layers: usize },
    #[error("pinned routing mismatch: {0}")]
    PinnedRouting(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, not a weight file")]
    BadMagic([u8; 4]),
    #[error("unsupported weight file version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("weight file header: {0}")]
    Header(String),
    #[error("tensor {0:?} missing from weight file")]
    MissingTensor(String),
    #[error("tensor {name:?}: header shape {found:?} inconsistent with config shape {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("weight file truncated inside {0:?}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
}
