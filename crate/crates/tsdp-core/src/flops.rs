//! FLOPs accounting and the %FLOPs utility metric, plus the synthetic
//! TEE/GPU latency model (TEE multiply-adds charged 30x GPU ones).

use crate::error::{Error, Result};
use crate::nn::graph::{LayerKind, ModelGraph};
use crate::partition::{PartitionPlan, Placement};
use serde::{Deserialize, Serialize};

/// Relative cost of a TEE FLOP vs a GPU FLOP in the latency model.
pub const TEE_SLOWDOWN: f64 = 30.0;
/// Per-element charge for non-linear layers; enters `sim_latency` only,
/// never the FLOPs totals.
pub const NONLINEAR_ELEM_COST: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops_tee: u64,
    pub flops_gpu: u64,
    pub flops_total: u64,
    pub pct_flops_tee: f64,
    pub sim_latency: f64,
}

impl CostReport {
    pub fn csv_row(&self, scheme: &str, config: &str) -> String {
        format!(
            "{scheme},{config},{},{},{:.6},{:.3}",
            self.flops_tee, self.flops_gpu, self.pct_flops_tee, self.sim_latency
        )
    }

    pub const CSV_HEADER: &'static str =
        "scheme,config,flops_tee,flops_gpu,pct_flops_tee,sim_latency";
}

/// Multiply-add FLOPs of one layer given its resolved output shape.
/// Linear: `2*c_in*c_out`; batchnorm: `2*c*h*w`; conv: `2*c_in*k^2*h*w*c_out`
/// (h, w are output dims). Non-linear layers count zero.
pub fn flops_of_layer(kind: &LayerKind, out_shape: &[usize]) -> Result<u64> {
    match kind {
        LayerKind::Linear { c_in, c_out } => Ok(2 * *c_in as u64 * *c_out as u64),
        LayerKind::BatchNorm { c } => {
            let spatial: usize = out_shape.iter().product::<usize>() / c;
            Ok(2 * *c as u64 * spatial as u64)
        }
        LayerKind::Conv2d { c_in, c_out, k, .. } => {
            if out_shape.len() != 3 {
                return Err(Error::invalid("conv output dims unresolved"));
            }
            let (h, w) = (out_shape[1] as u64, out_shape[2] as u64);
            Ok(2 * *c_in as u64 * (*k as u64).pow(2) * h * w * *c_out as u64)
        }
        _ => Ok(0),
    }
}

/// Per-layer FLOPs for a whole graph.
pub fn model_flops(model: &ModelGraph) -> Result<Vec<u64>> {
    let shapes = model.infer_shapes()?;
    model
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, s)| flops_of_layer(&l.kind, s))
        .collect()
}

pub fn total_flops(model: &ModelGraph) -> Result<u64> {
    Ok(model_flops(model)?.iter().sum())
}

/// Split a model's FLOPs by a plan's placements and derive the utility
/// metrics. Magnitude masks attribute a conv/linear layer's FLOPs to the
/// TEE in exact proportion to the shielded weight count (each weight owns
/// the same number of multiply-adds).
pub fn utility_of_plan(model: &ModelGraph, plan: &PartitionPlan) -> Result<CostReport> {
    plan.validate(model)?;
    let shapes = model.infer_shapes()?;
    let per_layer = model_flops(model)?;
    let mut tee = 0u64;
    let mut gpu = 0u64;
    let mut latency = 0.0f64;
    for (id, layer) in model.layers.iter().enumerate() {
        let f = per_layer[id];
        let placement = plan.placement(id);
        if f > 0 {
            let (layer_tee, layer_gpu) = match placement {
                Placement::Tee => (f, 0),
                Placement::Gpu | Placement::Obfuscated => {
                    match plan.weight_masks.as_ref().and_then(|m| m.get(&id)) {
                        Some(mask) if layer.kind.is_linear_op() => {
                            let shielded = mask.iter().filter(|&&b| b).count() as u64;
                            let total = mask.len() as u64;
                            // f is divisible by the weight count for conv and
                            // linear, so this attribution is exact.
                            let t = f / total * shielded;
                            (t, f - t)
                        }
                        _ => (0, f),
                    }
                }
            };
            tee += layer_tee;
            gpu += layer_gpu;
            latency += layer_tee as f64 * TEE_SLOWDOWN + layer_gpu as f64;
        } else {
            // Non-linear layer: fixed per-element charge in the latency model.
            let elems: usize = shapes[id].iter().product();
            let unit = if placement == Placement::Tee {
                TEE_SLOWDOWN
            } else {
                1.0
            };
            latency += elems as f64 * NONLINEAR_ELEM_COST * unit;
        }
    }
    let total = tee + gpu;
    Ok(CostReport {
        flops_tee: tee,
        flops_gpu: gpu,
        flops_total: total,
        pct_flops_tee: if total == 0 {
            0.0
        } else {
            tee as f64 / total as f64
        },
        sim_latency: latency,
    })
}
