//! Multi-BS multi-RIS pinching-antenna downlink with a three-stage complex GNN.

pub mod autodiff;
pub mod baselines;
pub mod channel;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod mappings;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod training;

pub type C64 = num_complex::Complex64;

pub use error::{Error, Result};
