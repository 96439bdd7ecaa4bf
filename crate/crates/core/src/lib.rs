//! Content-aware storage for families of model checkpoints.
//!
//! Tensors are deduplicated by digest, fingerprinted with a bit-level sketch,
//! clustered around base tensors, and stored either in full or as a lossless
//! delta against their base.

pub mod codec;
pub mod config;
pub mod error;
pub mod fingerprint;
pub mod format;
pub mod index;
pub mod planner;
pub mod predictor;
pub mod store;
pub mod synth;

pub use config::EngineConfig;
pub use error::{Error, Result};
pub use store::{Store, TensorRecord};
