//! sqft-forge: sparsify, quantize, and fine-tune small dense networks with
//! elastic low-rank adapters, then merge the adapters back without losing
//! sparsity or numerical precision.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: row-major `f64` matrices and a seeded splitmix64 generator.
//! - [`sparsity`]: importance scoring, mask construction, sparsity accounting.
//! - [`quant`]: group-wise affine quantization (round-to-nearest and a greedy
//!   error-compensated variant) plus dequantization.
//! - [`adapter`]: elastic low-rank adapters, masked-adapter training modes,
//!   and the two merge operations.
//! - [`train`]: reverse-mode gradients and a fine-tuning loop that updates
//!   only the adapters.
//! - [`search`]: the median-rank heuristic and hill-climbing search over rank
//!   configurations.
//! - [`pipeline`]: end-to-end orchestration, checkpoint I/O, the synthetic
//!   evaluation harness, and cost reporting.

pub mod adapter;
pub mod error;
pub mod pipeline;
pub mod quant;
pub mod search;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
