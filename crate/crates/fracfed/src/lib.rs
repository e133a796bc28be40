//! Deterministic desk-scale federated learning simulator for studying
//! structure-aware fractal backdoor injection, baseline attacks, robust
//! aggregation defenses, and the associated structural metrics.

pub mod attacks;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod federation;
pub mod fft;
pub mod metrics;
pub mod net;
pub mod plots;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod trigger;

pub use error::{Error, Result};
pub use tensor::Tensor;
