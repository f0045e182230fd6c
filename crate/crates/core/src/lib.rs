//! Learning stochastic flow maps with exits from bounded domains.

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod exit_model;
pub mod generator;
pub mod knn;
pub mod neural;
pub mod pipeline;
pub mod problems;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
