//! Differentially private dropout training.
//!
//! A one-hidden-layer network is trained with stochastic gradient Langevin
//! dynamics where each step clips the minibatch gradient per layer and adds
//! Gaussian noise. The injected noise doubles as Gaussian dropout and, with
//! a calibrated noise multiplier, gives an `(eps, delta)` guarantee under
//! either advanced composition or zCDP accounting.

pub mod accountant;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod mechanism;
pub mod model;
pub mod renyi;

pub use accountant::{AccountantConfig, BudgetBreakdown, Method, PrivacyBudget, ZcdpBudget};
pub use dataset::{Batch, Dataset, Minibatch};
pub use error::{Error, Result};
pub use mechanism::{DropoutRateMap, DropoutSummary, NoiseSpec};
pub use model::{Gradients, ModelParams, StepSchedule};
