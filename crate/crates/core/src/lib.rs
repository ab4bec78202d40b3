//! Distributional deep equilibrium models.
//!
//! A DDEQ maps an input point cloud `ρ` to a latent discrete measure `μ*` that is a
//! fixed point of a permutation-structured network `F_θ(·, ρ)`. The fixed point is
//! found by Wasserstein gradient descent on `½MMD²(μ, F_θ(μ, ρ))`; training uses a
//! one-step phantom gradient at the detached fixed point.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod kernel;
pub mod measure;
pub mod net;
pub mod solver;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
