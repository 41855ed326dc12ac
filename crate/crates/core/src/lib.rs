//! Backpropagation-free federated fine-tuning.
//!
//! Clients estimate gradients from forward passes only: each perturbation
//! direction is identified by a seed, a client measures the loss slope along
//! it, and only `(seed, slope)` pairs travel upstream. The server rebuilds the
//! forward gradients, paces how many perturbations a round collects by their
//! variance, and filters candidate directions against the previous round's
//! gradient before dispatching them.

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod fwdgrad;
pub mod model;
pub mod pacing;
pub mod peft;
pub mod rng;
pub mod sampling;
pub mod wire;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use federation::{train, Execution, MetricsHistory, ServerState, TrainOutcome};
pub use fwdgrad::{DerivativeMode, ForwardGradientRecord, PerturbationSeed};
pub use model::{Batch, ModelSpec, ParamVector};
pub use peft::TrainableMask;
