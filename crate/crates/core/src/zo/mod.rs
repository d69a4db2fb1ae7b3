//! Backprop-free gradient estimation.

mod covariance;
mod estimator;
mod objective;
mod perturb;

pub use covariance::{covariance_deviation, covariance_deviation_masked, empirical_covariance};
pub use estimator::{
    delta_losses, delta_losses_with, fd_directional, stein_estimate, DeltaLossVector,
    DifferenceScheme,
};
pub use objective::{Linear, ModelObjective, Objective, Quadratic};
pub use perturb::{perturbation, PerturbationSpec, Support};

#[allow(unused_imports)]
pub(crate) use perturb::for_each_standard_normal;
