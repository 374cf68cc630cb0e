//! SGD training with momentum, weight decay and step LR decay.
//!
//! Training is bit-reproducible: per-sample gradients are computed in
//! parallel but reduced in sample order, and all shuffling comes from a
//! stream derived from the config seed.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::engine::{backward_sample, ce_loss_and_grad, forward_sample, ParamGrads};
use crate::nn::graph::{LayerId, ModelGraph};
use crate::rng::derive;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(factor, every_n_epochs)`.
    pub lr_decay: (f64, usize),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 60,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: (0.5, 20),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Mean cross-entropy loss and gradients over a batch of sample indices.
/// Gradients are reduced in index order for determinism.
pub fn batch_grads(
    model: &ModelGraph,
    shapes: &[Vec<usize>],
    images: &Tensor,
    labels: &[usize],
    batch: &[usize],
) -> (f64, ParamGrads) {
    let per_sample = exec::map_indexed(batch.len(), |bi| {
        let i = batch[bi];
        let x = images.sample(i);
        let cache = forward_sample(model, shapes, x);
        let logits = cache.outputs.last().unwrap();
        let (loss, d_out) = ce_loss_and_grad(logits, labels[i]);
        let (grads, _) = backward_sample(model, shapes, &cache, x, &d_out);
        (loss, grads)
    });
    let scale = 1.0 / batch.len() as f64;
    let mut total = ParamGrads::zeros_like(model);
    let mut loss_sum = 0.0;
    for (loss, g) in per_sample {
        loss_sum += loss;
        total.add_assign(&g);
    }
    total.scale(scale);
    (loss_sum * scale, total)
}

/// Apply one momentum-SGD step in place. `trainable` limits the update to
/// specific layers (used by pipelines that freeze a backbone).
pub fn sgd_step(
    model: &mut ModelGraph,
    grads: &ParamGrads,
    velocity: &mut ParamGrads,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    trainable: Option<&[LayerId]>,
) {
    for (id, layer) in model.layers.iter_mut().enumerate() {
        if let Some(t) = trainable {
            if !t.contains(&id) {
                continue;
            }
        }
        for (wi, w) in layer.weights.iter_mut().enumerate() {
            let g = &grads.0[id][wi];
            let v = &mut velocity.0[id][wi];
            for ((wv, &gv), vv) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut().iter_mut())
            {
                let total_g = gv + weight_decay * *wv;
                *vv = momentum * *vv + total_g;
                *wv -= lr * *vv;
            }
        }
    }
}

pub fn train_sgd(model: &ModelGraph, dataset: &Dataset, cfg: &TrainConfig) -> Result<ModelGraph> {
    train_sgd_layers(model, dataset, cfg, None)
}

/// As `train_sgd` but optionally restricted to a set of trainable layers.
pub fn train_sgd_layers(
    model: &ModelGraph,
    dataset: &Dataset,
    cfg: &TrainConfig,
    trainable: Option<&[LayerId]>,
) -> Result<ModelGraph> {
    cfg.validate()?;
    dataset.validate()?;
    let arity = model.n_outputs()?;
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l >= arity) {
        return Err(Error::invalid(format!(
            "dataset label {bad} exceeds model output arity {arity}"
        )));
    }
    let mut model = model.clone();
    let shapes = model.infer_shapes()?;
    let mut velocity = ParamGrads::zeros_like(&model);
    let mut rng = derive(cfg.seed, "sgd-shuffle");
    let mut lr = cfg.learning_rate;
    let n = dataset.len();
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.lr_decay.1 > 0 && epoch % cfg.lr_decay.1 == 0 {
            lr *= cfg.lr_decay.0;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) =
                batch_grads(&model, &shapes, &dataset.images, &dataset.labels, batch);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                });
            }
            sgd_step(
                &mut model,
                &grads,
                &mut velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                trainable,
            );
        }
    }
    Ok(model)
}

/// Classification accuracy of `model` on `dataset`.
pub fn evaluate_accuracy(model: &ModelGraph, dataset: &Dataset) -> Result<f64> {
    let logits = crate::nn::engine::forward_logits(model, &dataset.images)?;
    let n = dataset.len();
    let correct = (0..n)
        .filter(|&i| crate::nn::engine::argmax(logits.sample(i)) == dataset.labels[i])
        .count();
    Ok(correct as f64 / n as f64)
}

/// Mean max-softmax confidence on a dataset (used by the confidence gap).
pub fn mean_confidence(model: &ModelGraph, dataset: &Dataset) -> Result<f64> {
    let logits = crate::nn::engine::forward_logits(model, &dataset.images)?;
    let n = dataset.len();
    let mut acc = 0.0;
    for i in 0..n {
        let p = crate::nn::ops::softmax(logits.sample(i));
        acc += p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_with, DistributionId, GenOptions};
    use crate::nn::graph::{ModelBuilder, OutputMode};

    fn blobs(seed: u64) -> Dataset {
        // Linearly separable 2-class data: bright vs dark templates with
        // small noise on tiny 4x4 "images".
        let opts = GenOptions {
            noise_sigma: 0.05,
            jitter: 0,
            channels: 1,
            distribution: DistributionId::Private,
        };
        gen_synthetic_with(2, 100, 4, seed, &opts).unwrap()
    }

    fn tiny_model(seed: u64) -> ModelGraph {
        ModelBuilder::new(vec![1, 4, 4], seed)
            .linear(16, 2)
            .build(OutputMode::Logits)
            .unwrap()
    }

    /// Independent oracle: batch gradient-descent logistic regression on the
    /// same data must reach >= 0.99 before we require it of `train_sgd`.
    fn logistic_oracle_accuracy(d: &Dataset) -> f64 {
        let n = d.len();
        let dim = d.images.len() / n;
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        for _ in 0..500 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for i in 0..n {
                let x = d.images.sample(i);
                let z: f64 = b + w.iter().zip(x).map(|(&wv, &xv)| wv * xv).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let t = d.labels[i] as f64;
                let err = p - t;
                for (g, &xv) in gw.iter_mut().zip(x) {
                    *g += err * xv;
                }
                gb += err;
            }
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv -= 0.5 / n as f64 * g;
            }
            b -= 0.5 / n as f64 * gb;
        }
        let correct = (0..n)
            .filter(|&i| {
                let x = d.images.sample(i);
                let z: f64 = b + w.iter().zip(x).map(|(&wv, &xv)| wv * xv).sum::<f64>();
                (z > 0.0) == (d.labels[i] == 1)
            })
            .count();
        correct as f64 / n as f64
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let d = blobs(3);
        assert!(
            logistic_oracle_accuracy(&d) >= 0.99,
            "oracle fails; data not separable enough"
        );
        let cfg = TrainConfig {
            epochs: 50,
            ..Default::default()
        };
        let m = train_sgd(&tiny_model(1), &d, &cfg).unwrap();
        assert!(evaluate_accuracy(&m, &d).unwrap() >= 0.99);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let d = blobs(3);
        let m0 = tiny_model(1);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let m = train_sgd(&m0, &d, &cfg).unwrap();
        assert_eq!(m.param_checksum(), m0.param_checksum());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let d = blobs(3);
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let a = train_sgd(&tiny_model(1), &d, &cfg).unwrap();
        let b = train_sgd(&tiny_model(1), &d, &cfg).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
    }

    #[test]
    fn labels_beyond_arity_rejected() {
        let mut d = blobs(3);
        d.meta.n_classes = 3;
        d.labels[0] = 2;
        let cfg = TrainConfig::default();
        assert!(train_sgd(&tiny_model(1), &d, &cfg).is_err());
    }
}
