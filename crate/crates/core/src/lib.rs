//! Weight-decay experiments on small dense and convolutional networks.
//!
//! The crate bundles a reverse-mode tensor engine, SGD with fixed, adaptive
//! and AdaDecay regularization, PGD adversarial training, synthetic and
//! file-backed datasets, magnitude pruning, and a seeded experiment harness.
//! Every run is a pure function of its [`config::ExperimentConfig`].

pub mod adversarial;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dog;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod optimizer;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
