use loopstack_core::loop_engine::LoopError;
use loopstack_core::model::ModelError;
use loopstack_core::toy::ToyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl HarnessError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } | HarnessError::Model(_) => 1,
            HarnessError::Invariant(_) => 2,
            HarnessError::Divergence(_) => 3,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<LoopError> for HarnessError {
    fn from(e: LoopError) -> Self {
        if e.is_divergence() {
            return HarnessError::Divergence(e.to_string());
        }
        match e {
            LoopError::CacheProtocol { .. } => HarnessError::Invariant(e.to_string()),
            LoopError::Model(m) => HarnessError::Model(m),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

impl From<ToyError> for HarnessError {
    fn from(e: ToyError) -> Self {
        match e {
            ToyError::Diverged { .. } => HarnessError::Divergence(e.to_string()),
            ToyError::Loop(l) => l.into(),
            ToyError::Io(io) => HarnessError::io("toy output", io),
            other => HarnessError::Config(other.to_string()),
        }
    }
}
