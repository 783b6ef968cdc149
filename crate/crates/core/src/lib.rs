//! Terminology-grounded report generation: a dual-branch terminology
//! encoder (visual and textual) feeding a shared autoregressive decoder,
//! trained by alternating knowledge-pretraining and transfer procedures,
//! with caption metrics and a synthetic corpus for end-to-end testing.

pub mod datagen;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod eval;
pub mod encoder;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod grammar;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
