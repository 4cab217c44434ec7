//! Numerical verification of KL evolution along continuity flows and of the
//! flow-matching-loss-to-KL error bound, with exact density and score queries
//! through ODE solves.

pub mod autodiff;
pub mod cli;
pub mod counterexample;
pub mod error;
pub mod estimators;
pub mod mlp;
pub mod ode;
pub mod output;
pub mod paths;
pub mod rng;
pub mod trainer;

pub use autodiff::{divergence, grad_divergence, jacobian, Dual, Dual2, Scalar, VelocityField};
pub use error::{Error, Result};
pub use ode::{
    backward_logdensity, backward_logdensity_batch, backward_score, backward_score_batch,
    rk4_solve, score_transport_oracle, trapezoid, IvpConfig, LogDensityResult, ScoreResult,
};
pub use paths::{gaussian_kl, CustomSchedule, Schedule, ScheduleId, TimeGrid};
pub use rng::RngStream;
