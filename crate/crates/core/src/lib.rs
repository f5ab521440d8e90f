//! Mixture-of-experts similarity VAE. An encoder maps samples to a latent
//! space shaped like a Gaussian mixture, a gating network learns to reproduce
//! a pairwise similarity matrix, and each mixture component gets its own
//! decoder expert for reconstruction and sampling.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod similarity;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
