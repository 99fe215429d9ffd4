//! The training-free loop wrapper: windows, block/layer iteration modes and
//! the iteration strategies that realize `g^(K)`.

pub mod accel;
mod integrate;
mod strategy;
mod tableau;
mod window;

pub use accel::{aitken_step, AndersonState};
pub use integrate::{
    apply_strategy, damped_step, from_residual, rk_anchored, rk_generic, CountingField, Field,
};
pub use strategy::Strategy;
pub use tableau::ButcherTableau;
pub use window::{
    default_window, looped_forward, looped_forward_traced, residual_field, run_loop,
    uniform_loop_step, window_operator_g, IterationMode, LoopConfig, LoopTrace, LoopWindow,
    WindowField, DEFAULT_DEPTH_FRACTION, DEFAULT_WINDOW_WIDTH,
};

use thiserror::Error;

use crate::model::ModelError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid loop window [{a}, {b}] for {n_layers} layers")]
    InvalidWindow { a: usize, b: usize, n_layers: usize },
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("aitken requires an even K, got {0}")]
    AitkenOddK(usize),
    #[error("tableau is not explicit: stage {stage} depends on itself or a later stage")]
    NonExplicitTableau { stage: usize },
    #[error("state became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(
        "cache protocol violated on layer {layer} after evaluation {evaluation}: \
         expected {expected} entries, found {found}"
    )]
    CacheProtocol {
        layer: usize,
        evaluation: usize,
        expected: usize,
        found: usize,
    },
}

impl LoopError {
    /// True for failures caused by the iterate blowing up rather than by
    /// misconfiguration.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            LoopError::Diverged { .. }
                | LoopError::Numerics(NumericsError::NonFinite { .. })
                | LoopError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))
        )
    }
}
