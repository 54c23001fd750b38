use std::path::PathBuf;

use thiserror::Error;

use crate::diffcore::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {stage}")]
    NonFinite { stage: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("model file: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}: non-finite {stage}")]
    Diverged {
        epoch: usize,
        stage: &'static str,
        /// Most recent model with finite loss.
        checkpoint: Box<crate::stablepolicy::StablePolicyModel>,
    },

    #[error("rollout left the finite range at step {step}")]
    RolloutDiverged {
        step: usize,
        /// States and actions up to the last finite state.
        partial: Box<crate::simeval::Trajectory>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::Dimension { expected, got })
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
