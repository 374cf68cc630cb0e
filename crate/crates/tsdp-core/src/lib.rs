//! Desk-scale laboratory for TEE-shielded DNN partitioning.
//!
//! The crate simulates the whole defender/attacker game on toy CNNs:
//!
//! - [`nn`] — deterministic tensor engine with manual per-layer backward
//!   rules, SGD training and PGD adversarial examples;
//! - [`data`] — reproducible synthetic datasets and the four-way
//!   membership-inference split;
//! - [`flops`] — per-layer FLOPs accounting and the %FLOPs utility metric
//!   with a synthetic TEE/GPU latency model;
//! - [`partition`] — plan constructors for the partition schemes
//!   (deep, shallow, magnitude, intermediate, non-linear obfuscation,
//!   backbone-substitution) and their configuration grids;
//! - [`offload`] — two-world executor with 8-bit quantization, one-time-pad
//!   masking over a prime field and Freivalds result verification;
//! - [`shadownet`] — additive-mask/permutation weight obfuscation and the
//!   pairwise-difference recovery attack;
//! - [`teeslice`] — partition-before-training: dense slice generation on a
//!   frozen public backbone, importance scalars and iterative pruning;
//! - [`attacks`] — surrogate initialization, query-based model stealing and
//!   the seven security metrics;
//! - [`sweetspot`] — configuration-grid sweeps and the minimal-utility
//!   configuration search;
//! - [`io`] — the versioned binary container for models and datasets.
//!
//! Heavy inner loops (batched passes, attack cells) are data-parallel via
//! rayon behind the default `parallel` feature; disabling it yields a
//! bit-identical sequential build.

pub mod attacks;
pub mod data;
pub mod error;
pub mod exec;
pub mod flops;
pub mod io;
pub mod nn;
pub mod offload;
pub mod partition;
pub mod rng;
pub mod shadownet;
pub mod sweetspot;
pub mod teeslice;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
