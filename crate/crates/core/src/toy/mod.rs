//! A tiny trainable network with a 2-D bottleneck, used to compare naive
//! looping of its residual block with damped sub-stepping.

mod data;
mod eval;
mod net;
mod train;

pub use data::ToyDataset;
pub use eval::{
    block_endpoints, cauchy_fraction, naive_drift, toy_eval, toy_grid, write_grid_csv,
    write_scatter_csv, GridBounds, LoopKind, LossGrid, Scatter,
};
pub use net::{finite_difference_check, ResidualLayer, ToyNet};
pub use train::{toy_train, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loop_engine::LoopError;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("degenerate grid bounds: {0}")]
    Bounds(String),
    #[error("invalid toy config: {0}")]
    Config(String),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Seed used by the lab when none is given.
pub const DEFAULT_SEED: u64 = 9;

/// Task, architecture and optimizer settings for the lab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    /// Norm of the projection fed to the sine target.
    pub sine_scale: f64,
    /// Norm of the projection fed to the tanh target.
    pub tanh_scale: f64,
    pub hidden: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub resolution: usize,
    pub ks: Vec<usize>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_train: 2048,
            n_test: 512,
            noise: 0.05,
            sine_scale: 3.0,
            tanh_scale: 1.5,
            hidden: 16,
            learning_rate: 1e-2,
            steps: 5000,
            resolution: 220,
            ks: vec![2, 4, 8],
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(ToyError::Config("dataset splits must be non-empty".into()));
        }
        if self.hidden == 0 {
            return Err(ToyError::Config("hidden width must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ToyError::Config("learning rate must be positive".into()));
        }
        if self.resolution < 2 {
            return Err(ToyError::Config(
                "grid resolution must be at least 2".into(),
            ));
        }
        if self.ks.contains(&0) {
            return Err(ToyError::Config("loop counts must be positive".into()));
        }
        Ok(())
    }
}
