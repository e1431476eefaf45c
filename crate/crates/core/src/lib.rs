//! Constant step-size Langevin samplers (LMC, SGLD, SGLDFP, SGD) for
//! Gaussian-prior linear and logistic regression, with closed-form
//! stationary-moment oracles and a small experiment harness.

pub mod error;
pub mod gradients;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod samplers;
pub mod stationary;

pub use error::{Error, Result};
pub use gradients::{draw_minibatch, ControlVariate, GradEstimator, Minibatch};
pub use metrics::{fit_loglog_slope, w2_gaussian, GaussianSummary, MomentAccumulator};
pub use model::{Dataset, ModelKind, PosteriorModel};
pub use samplers::{run_chain, run_coupled_chains, ChainConfig, ChainOutput, Kernel, SamplerKind};
pub use stationary::{ExpansionContext, KronOperator, LinRegOracle};
