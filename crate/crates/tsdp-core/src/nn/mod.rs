//! Minimal deterministic neural-network engine.

pub mod adversarial;
pub mod engine;
pub mod graph;
pub mod ops;
pub mod train;

pub use adversarial::{grad_wrt_input, pgd_attack, PGD_EPS, PGD_STEPS};
pub use engine::{forward, forward_logits};
pub use graph::{Edge, Layer, LayerId, LayerKind, ModelBuilder, ModelGraph, OutputMode};
pub use train::{evaluate_accuracy, train_sgd, TrainConfig};
