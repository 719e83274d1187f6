//! Stein diffusion guidance on analytic targets.
//!
//! Guided sampling from a diffusion process without retraining: clean
//! estimates come from Tweedie's formula, are refined by a kernelized Stein
//! correction on the clean manifold, renoised, and then steered toward
//! low-density, high-reward regions. Every target here is a Gaussian mixture,
//! so each approximation can be checked against exact scores, posteriors and
//! Monte-Carlo value functions.

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod multicomponent;
pub mod rng;
pub mod sampler;
pub mod schedules;
pub mod soc;
pub mod stein;
pub mod targets;

pub use error::{Error, Result};
