//! Multi-primitive vector quantization with adaptive per-patch allocation.
//!
//! The pipeline is patchify → encode → allocate → quantize → decode. Each
//! patch embedding is split into `M` chunks; every chunk is replaced by a
//! softmax-weighted sum of `n` primitives from its own sub-codebook, where
//! `n` comes from a small convolutional allocator.

pub mod ablation;
pub mod allocator;
pub mod autoencoder;
pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod quantizer;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
