//! Likelihood machinery for latent Markov models with a finite or
//! grid-discretized state space: hidden Markov models, AR(1) and
//! Ornstein-Uhlenbeck state-space models on a grid, continuous-time chains
//! observed at irregular times, and Markov-modulated Poisson processes.
//!
//! Every model class reduces to one scaled forward recursion over an initial
//! distribution, a sequence of per-step transition operators, and per-step
//! emission diagonals; see [`forward`] for the shared core.

pub mod emissions;
pub mod error;
pub mod fit;
pub mod forward;
pub mod grid;
pub mod kernels;
pub mod linalg;
pub mod simulate;

pub use error::{Error, Result};
