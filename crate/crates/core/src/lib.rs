//! Guided sampling on analytic Gaussian-mixture worlds: condition annealing,
//! contrastive negative guidance, and long-tail augmentation experiments.

pub mod config;
pub mod dataset;
pub mod error;
pub mod guidance;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod selection;
pub mod train;
pub mod world;

pub use error::{Error, Result};
