//! Globally stable neural imitation policies.
//!
//! A raw policy network is projected onto the decrease half space of a convex
//! Lyapunov potential, so every learned vector field converges to the
//! demonstrated target regardless of training quality. The crate covers the
//! differentiable machinery, training, data handling, rollouts, and metrics.

pub mod certify;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod lyapunov;
pub mod nets;
pub mod objective;
pub mod simeval;
pub mod stablepolicy;
pub mod trainer;

pub use diffcore::{Matrix, NodeId, Tape};
pub use error::{Error, Result};
pub use lyapunov::Potential;
pub use nets::{Activation, IcnnParams, MlpParams};
pub use dataio::{Bounds, Dataset, Demonstration, Split, Window};
pub use objective::{LossConfig, WindowBatch};
pub use simeval::{RolloutConfig, Trajectory};
pub use stablepolicy::{ModelConfig, PolicyMode, ProjectionActivation, StablePolicyModel};
pub use trainer::{train, TrainConfig, TrainReport};
