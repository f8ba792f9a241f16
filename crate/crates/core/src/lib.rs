//! Navigation world model toolkit.
//!
//! A conditional diffusion transformer predicts the next egocentric frame
//! from past frames and a navigation action. The crate bundles everything
//! around it: a small autodiff engine, a procedural raycast environment
//! that produces training episodes, diffusion training and sampling,
//! autoregressive rollouts, a cross-entropy-method planner with action
//! constraints, trajectory ranking, and trajectory/image metrics.

pub mod autodiff;
pub mod cdit;
pub mod conditioning;
pub mod diffusion;
pub mod evalkit;
mod error;
pub mod params;
pub mod planner;
pub mod rng;
pub mod rollout;
pub mod world;

pub use error::{Error, Result};
