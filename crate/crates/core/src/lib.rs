//! Bilateral denoising diffusion on low-dimensional synthetic data.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: tensors, reverse-mode autodiff, MLPs, Adam.
//! - [`diffusion`]: closed-form schedules, marginals, posteriors and losses.
//! - [`networks`]: the noise-conditioned score network and the schedule network.
//! - [`training`]: score-network and schedule-network training loops.
//! - [`scheduling`]: backward noise-schedule prediction and its seed search.
//! - [`sampling`]: DDPM and DDIM generation over a short schedule.
//! - [`eval`]: Gaussian oracles, MMD and the bound-tightness sweep.

pub mod diffusion;
pub mod error;
pub mod eval;
pub mod json;
pub mod networks;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod scheduling;
pub mod training;

pub use error::{Error, Result};
