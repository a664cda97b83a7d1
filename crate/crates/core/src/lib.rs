//! Linear-time inference and learning for temporal and spatio-temporal
//! Gaussian processes with non-Gaussian likelihoods.
//!
//! A GP prior with a Markovian kernel is written as a linear stochastic
//! differential equation and filtered/smoothed in `O(n)`. Non-conjugate
//! likelihoods are handled by Gaussian sites refined by one of several
//! interchangeable update rules (power EP, extended EP, statistically
//! linearised EP, natural-gradient VI).

pub mod cubature;
pub mod engine;
pub mod error;
pub mod harness;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod prior;
pub mod selftest;
pub mod sites;
pub mod spatial;

pub use cubature::{CubatureRule, CubatureSpec};
pub use engine::{
    fit_hyperparameters, run_inference, Diagnostics, EnergyLedger, Engine, InferenceResult, OptimizerConfig,
    OptimizerKind, SiteStore, TrainingResult,
};
pub use error::{Error, Result};
pub use likelihood::Likelihood;
pub use model::{GpModel, Observation, StateModel, TimeGrid, TimeStep};
pub use prior::{ContinuousSsm, DiscreteTransition, KernelSpec};
pub use sites::{GaussianMoments, Rule, RuleConfig, Site};
pub use spatial::{SpatialConfig, SpatialMode};
