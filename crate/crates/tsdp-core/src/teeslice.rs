//! Partition-before-training: dense slice generation on a frozen public
//! backbone, importance-scalar training, and iterative slice pruning.
//!
//! The hybrid model is a frozen public feature backbone with lightweight
//! private adapters ("slices") bridging nearby matmul layers, each gated by
//! a trainable importance scalar `alpha = sigmoid(alpha_tilde)`, plus a
//! private task head. Training never touches backbone parameters, so the
//! GPU-offloaded weight set stays bit-identical to the public backbone.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::{model_flops, total_flops, utility_of_plan};
use crate::nn::engine::{sigmoid, ParamGrads};
use crate::nn::graph::{Edge, Layer, LayerId, LayerKind, ModelGraph, OutputMode};
use crate::nn::train::{batch_grads, evaluate_accuracy, sgd_step, TrainConfig};
use crate::partition::{blocks, PartitionPlan, Placement, PlanConfig, Scheme};
use crate::rng::derive;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Slices whose gate falls below this after dense training are dropped in
/// the setup prune.
pub const ALPHA_SETUP: f64 = 0.05;
/// Default weight of the complexity penalty in the dense-training loss.
pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Adapter FLOPs budget: at most 1/18 of the bridged layer's FLOPs.
pub const ADAPTER_BUDGET_DIV: u64 = 18;
/// Maximum matmul-layer distance a slice may bridge.
pub const MAX_SLICE_SPAN: usize = 3;

/// A private adapter bridging backbone matmul layer `from` to the input of
/// matmul layer `to`: 1x1 bottleneck conv pair + BN, gated by
/// `sigmoid(alpha_tilde)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub from: LayerId,
    pub to: LayerId,
    /// 1x1 conv `c_from -> c_mid` (strided if spatial dims shrink).
    pub reduce: [Tensor; 2],
    /// 1x1 conv `c_mid -> c_to`.
    pub expand: [Tensor; 2],
    pub bn_weights: [Tensor; 2],
    pub bn_buffers: [Tensor; 2],
    pub alpha_tilde: f64,
    pub flops: u64,
    stride: usize,
}

impl Slice {
    pub fn alpha(&self) -> f64 {
        sigmoid(self.alpha_tilde)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Tolerable relative accuracy drop (ACC_tol = (1-delta)*acc_vic).
    pub delta: f64,
    pub alpha_setup: f64,
    /// Slices pruned per round.
    pub n: usize,
    pub rounds: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            delta: 0.01,
            alpha_setup: ALPHA_SETUP,
            n: 2,
            rounds: 10,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta) || self.delta == 0.0 {
            return Err(Error::invalid("delta must be in (0,1)"));
        }
        if !(0.0..1.0).contains(&self.alpha_setup) || self.alpha_setup == 0.0 {
            return Err(Error::invalid("alpha_setup must be in (0,1)"));
        }
        if self.n == 0 {
            return Err(Error::invalid("must prune at least one slice per round"));
        }
        Ok(())
    }
}

/// Frozen public backbone features + private slices + private task head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridModel {
    /// Public backbone minus its own head block. Never trained here.
    pub features: ModelGraph,
    /// Private task classifier (single linear layer over feature tip).
    pub head: Layer,
    pub slices: Vec<Slice>,
    backbone_checksum: [u8; 32],
}

/// Composite-graph layer ids of one slice's four layers.
#[derive(Debug, Clone, Copy)]
pub struct SliceIds {
    pub reduce: LayerId,
    pub expand: LayerId,
    pub bn: LayerId,
    pub gate: LayerId,
}

/// Where each hybrid part landed in the assembled graph.
#[derive(Debug, Clone)]
pub struct AssembleMap {
    pub backbone_ids: Vec<LayerId>,
    pub head_id: LayerId,
    pub slice_ids: Vec<SliceIds>,
}

impl AssembleMap {
    /// Layers the private-training phases may update.
    pub fn trainable(&self) -> Vec<LayerId> {
        let mut ids: Vec<LayerId> = self
            .slice_ids
            .iter()
            .flat_map(|s| [s.reduce, s.expand, s.bn, s.gate])
            .collect();
        ids.push(self.head_id);
        ids
    }
}

/// One round of the pruning log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneRound {
    pub round: usize,
    pub acc: f64,
    pub slices_remaining: usize,
    pub pct_flops_tee: f64,
    /// Gate values at evaluation time, keyed by (from, to).
    pub alphas: Vec<(LayerId, LayerId, f64)>,
    /// Pairs pruned after this round's evaluation (empty if none).
    pub pruned: Vec<(LayerId, LayerId)>,
    pub stored: bool,
}

impl PruneRound {
    pub const CSV_HEADER: &'static str = "round,acc,slices_remaining,pct_flops_tee";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{:.6}",
            self.round, self.acc, self.slices_remaining, self.pct_flops_tee
        )
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub model: HybridModel,
    pub log: Vec<PruneRound>,
    /// True when no pruned model ever met the accuracy tolerance and the
    /// dense input model was returned instead.
    pub failed: bool,
}

fn he_filters(shape: &[usize], fan_in: usize, rng: &mut crate::rng::Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl HybridModel {
    /// Generate the densely sliced model: one slice per eligible matmul
    /// pair (p, i) with `1 <= i - p <= 3`, adapters sized to the 1/18
    /// FLOPs budget, gates initialized to 0.5.
    pub fn build_dense(backbone: &ModelGraph, n_classes: usize, seed: u64) -> Result<HybridModel> {
        backbone.validate()?;
        let bb_blocks = blocks(backbone);
        if bb_blocks.len() < 2 {
            return Err(Error::invalid("backbone too shallow to slice"));
        }
        // Features = backbone minus its head block.
        let keep: usize = bb_blocks[..bb_blocks.len() - 1].iter().map(|b| b.len()).sum();
        let features = ModelGraph {
            layers: backbone.layers[..keep].to_vec(),
            input_shape: backbone.input_shape.clone(),
            output_mode: OutputMode::Logits,
        };
        features.validate()?;
        let shapes = features.infer_shapes()?;
        let per_flops = model_flops(&features)?;
        let matmuls: Vec<LayerId> = features
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_linear_op())
            .map(|(i, _)| i)
            .collect();

        let mut rng = derive(seed, "teeslice-slices");
        let mut slices = Vec::new();
        for (ai, &p) in matmuls.iter().enumerate() {
            for &i in matmuls.iter().skip(ai + 1).take(MAX_SLICE_SPAN) {
                let span = matmuls.iter().position(|&m| m == i).unwrap() - ai;
                if span > MAX_SLICE_SPAN {
                    break;
                }
                if let Some(slice) = make_slice(&features, &shapes, &per_flops, p, i, &mut rng) {
                    slices.push(slice);
                }
            }
        }
        if slices.is_empty() {
            return Err(Error::invalid(
                "backbone admits no eligible slice pairs (too shallow or shape-incompatible)",
            ));
        }

        let feat_dim: usize = shapes.last().unwrap().iter().product();
        let head = Layer {
            kind: LayerKind::Linear {
                c_in: feat_dim,
                c_out: n_classes,
            },
            inputs: vec![Edge::Input], // rewired at assembly
            weights: vec![
                he_filters(&[n_classes, feat_dim], feat_dim, &mut rng),
                Tensor::zeros(&[n_classes]),
            ],
            buffers: vec![],
        };
        let backbone_checksum = features.param_checksum();
        Ok(HybridModel {
            features,
            head,
            slices,
            backbone_checksum,
        })
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.alpha()).collect()
    }

    /// The privacy-isolation invariant: the frozen feature backbone still
    /// hashes to its build-time checksum.
    pub fn backbone_unchanged(&self) -> bool {
        self.features.param_checksum() == self.backbone_checksum
    }

    /// Build-time checksum of the frozen backbone (for serialization).
    pub fn backbone_checksum(&self) -> [u8; 32] {
        self.backbone_checksum
    }

    /// Reassemble a hybrid from serialized parts.
    pub fn from_parts(
        features: ModelGraph,
        head: Layer,
        slices: Vec<Slice>,
        backbone_checksum: [u8; 32],
    ) -> Result<HybridModel> {
        features.validate()?;
        Ok(HybridModel {
            features,
            head,
            slices,
            backbone_checksum,
        })
    }

    /// Materialize the composite graph: backbone features with adapters
    /// merged into their target layers' inputs, topped by the head.
    pub fn assemble(&self) -> Result<(ModelGraph, AssembleMap)> {
        let mut layers: Vec<Layer> = Vec::new();
        let mut map_ids = vec![0usize; self.features.layers.len()];
        let mut slice_ids: Vec<Option<SliceIds>> = vec![None; self.slices.len()];
        for (fid, layer) in self.features.layers.iter().enumerate() {
            let remap = |e: &Edge| match e {
                Edge::Input => Edge::Input,
                Edge::Layer(src) => Edge::Layer(map_ids[*src]),
            };
            let mut acc_edge = remap(&layer.inputs[0]);
            for (si, slice) in self.slices.iter().enumerate() {
                if slice.to != fid {
                    continue;
                }
                let src = Edge::Layer(map_ids[slice.from]);
                let reduce_id = layers.len();
                let c_from = slice.reduce[0].shape()[1];
                let c_mid = slice.reduce[0].shape()[0];
                let c_to = slice.expand[0].shape()[0];
                layers.push(Layer {
                    kind: LayerKind::Conv2d {
                        c_in: c_from,
                        c_out: c_mid,
                        k: 1,
                        stride: slice.stride,
                        pad: 0,
                    },
                    inputs: vec![src],
                    weights: slice.reduce.to_vec(),
                    buffers: vec![],
                });
                let expand_id = layers.len();
                layers.push(Layer {
                    kind: LayerKind::Conv2d {
                        c_in: c_mid,
                        c_out: c_to,
                        k: 1,
                        stride: 1,
                        pad: 0,
                    },
                    inputs: vec![Edge::Layer(reduce_id)],
                    weights: slice.expand.to_vec(),
                    buffers: vec![],
                });
                let bn_id = layers.len();
                layers.push(Layer {
                    kind: LayerKind::BatchNorm { c: c_to },
                    inputs: vec![Edge::Layer(expand_id)],
                    weights: slice.bn_weights.to_vec(),
                    buffers: slice.bn_buffers.to_vec(),
                });
                let gate_id = layers.len();
                layers.push(Layer {
                    kind: LayerKind::AlphaGate,
                    inputs: vec![Edge::Layer(bn_id)],
                    weights: vec![Tensor::from_flat(vec![slice.alpha_tilde])],
                    buffers: vec![],
                });
                let add_id = layers.len();
                layers.push(Layer {
                    kind: LayerKind::ResidualAdd,
                    inputs: vec![acc_edge, Edge::Layer(gate_id)],
                    weights: vec![],
                    buffers: vec![],
                });
                acc_edge = Edge::Layer(add_id);
                slice_ids[si] = Some(SliceIds {
                    reduce: reduce_id,
                    expand: expand_id,
                    bn: bn_id,
                    gate: gate_id,
                });
            }
            let mut out_layer = layer.clone();
            out_layer.inputs = layer.inputs.iter().map(|e| remap(e)).collect();
            out_layer.inputs[0] = acc_edge;
            map_ids[fid] = layers.len();
            layers.push(out_layer);
        }
        let head_id = layers.len();
        let mut head = self.head.clone();
        head.inputs = vec![Edge::Layer(*map_ids.last().unwrap())];
        layers.push(head);
        let graph = ModelGraph {
            layers,
            input_shape: self.features.input_shape.clone(),
            output_mode: OutputMode::Logits,
        };
        graph.validate()?;
        Ok((
            graph,
            AssembleMap {
                backbone_ids: map_ids,
                head_id,
                slice_ids: slice_ids.into_iter().map(|s| s.unwrap()).collect(),
            },
        ))
    }

    /// Copy trained slice/head parameters back from a composite graph.
    fn writeback(&mut self, g: &ModelGraph, map: &AssembleMap) {
        for (slice, ids) in self.slices.iter_mut().zip(&map.slice_ids) {
            slice.reduce = [
                g.layers[ids.reduce].weights[0].clone(),
                g.layers[ids.reduce].weights[1].clone(),
            ];
            slice.expand = [
                g.layers[ids.expand].weights[0].clone(),
                g.layers[ids.expand].weights[1].clone(),
            ];
            slice.bn_weights = [
                g.layers[ids.bn].weights[0].clone(),
                g.layers[ids.bn].weights[1].clone(),
            ];
            slice.bn_buffers = [
                g.layers[ids.bn].buffers[0].clone(),
                g.layers[ids.bn].buffers[1].clone(),
            ];
            slice.alpha_tilde = g.layers[ids.gate].weights[0].data()[0];
        }
        self.head.weights = g.layers[map.head_id].weights.clone();
    }

    pub fn accuracy(&self, d: &Dataset) -> Result<f64> {
        let (g, _) = self.assemble()?;
        evaluate_accuracy(&g, d)
    }

    /// Drop slices whose gate value is below `threshold`.
    pub fn prune_below(&mut self, threshold: f64) -> Vec<(LayerId, LayerId)> {
        let (dropped, kept): (Vec<Slice>, Vec<Slice>) = self
            .slices
            .drain(..)
            .partition(|s| s.alpha() < threshold);
        self.slices = kept;
        dropped.into_iter().map(|s| (s.from, s.to)).collect()
    }

    /// Drop the `n` slices with the smallest gates; ties break toward the
    /// lexicographically smaller (from, to) pair.
    pub fn prune_n_smallest(&mut self, n: usize) -> Vec<(LayerId, LayerId)> {
        let mut order: Vec<usize> = (0..self.slices.len()).collect();
        order.sort_by(|&a, &b| {
            let (sa, sb) = (&self.slices[a], &self.slices[b]);
            sa.alpha()
                .partial_cmp(&sb.alpha())
                .unwrap()
                .then((sa.from, sa.to).cmp(&(sb.from, sb.to)))
        });
        let doomed: Vec<usize> = order.into_iter().take(n).collect();
        let mut pruned = Vec::new();
        let mut kept = Vec::new();
        for (i, s) in self.slices.drain(..).enumerate() {
            if doomed.contains(&i) {
                pruned.push((s.from, s.to));
            } else {
                kept.push(s);
            }
        }
        self.slices = kept;
        pruned.sort_unstable();
        pruned
    }

    /// Slice + head training with the complexity-penalized loss
    /// `CE + lambda * sum(sigmoid(alpha_tilde) * flops(A) / flops(backbone))`.
    /// The backbone is frozen by construction.
    pub fn train_dense(
        &self,
        d: &Dataset,
        cfg: &TrainConfig,
        lambda: f64,
    ) -> Result<HybridModel> {
        cfg.validate()?;
        d.validate()?;
        let (mut g, map) = self.assemble()?;
        let trainable = map.trainable();
        let shapes = g.infer_shapes()?;
        let bb_flops = total_flops(&self.features)? as f64;
        let penalty_scale: Vec<f64> = self
            .slices
            .iter()
            .map(|s| lambda * s.flops as f64 / bb_flops)
            .collect();
        let mut velocity = ParamGrads::zeros_like(&g);
        let mut rng = derive(cfg.seed, "teeslice-dense");
        let mut lr = cfg.learning_rate;
        let n = d.len();
        for epoch in 0..cfg.epochs {
            if epoch > 0 && cfg.lr_decay.1 > 0 && epoch % cfg.lr_decay.1 == 0 {
                lr *= cfg.lr_decay.0;
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
                let (loss, mut grads) = batch_grads(&g, &shapes, &d.images, &d.labels, batch);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: bi });
                }
                // d/d(alpha_tilde) of the complexity penalty.
                for (ids, &scale) in map.slice_ids.iter().zip(&penalty_scale) {
                    let a = sigmoid(g.layers[ids.gate].weights[0].data()[0]);
                    grads.0[ids.gate][0].data_mut()[0] += scale * a * (1.0 - a);
                }
                sgd_step(
                    &mut g,
                    &grads,
                    &mut velocity,
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                    Some(&trainable),
                );
            }
        }
        let mut out = self.clone();
        out.writeback(&g, &map);
        debug_assert!(out.backbone_unchanged());
        Ok(out)
    }

    /// Deployment split: backbone matmuls and BN (public parameters) to the
    /// GPU; slices, head, and backbone non-linear layers to the TEE.
    pub fn deploy_plan(&self) -> Result<(ModelGraph, PartitionPlan)> {
        let (g, map) = self.assemble()?;
        let backbone_set: std::collections::BTreeSet<LayerId> =
            map.backbone_ids.iter().copied().collect();
        let mut placements: BTreeMap<LayerId, Placement> = BTreeMap::new();
        for (id, layer) in g.layers.iter().enumerate() {
            let on_gpu = backbone_set.contains(&id)
                && (layer.kind.is_linear_op() || matches!(layer.kind, LayerKind::BatchNorm { .. }));
            placements.insert(id, if on_gpu { Placement::Gpu } else { Placement::Tee });
        }
        let plan = PartitionPlan {
            scheme: Scheme::TeeSlice,
            placements,
            weight_masks: None,
            scalars: None,
            config: PlanConfig::None,
            warnings: Vec::new(),
        };
        plan.validate(&g)?;
        Ok((g, plan))
    }
}

/// Construct one adapter if the pair is shape-eligible and an adapter fits
/// the FLOPs budget.
fn make_slice(
    features: &ModelGraph,
    shapes: &[Vec<usize>],
    per_flops: &[u64],
    from: LayerId,
    to: LayerId,
    rng: &mut crate::rng::Rng,
) -> Option<Slice> {
    let src_shape = &shapes[from];
    let dst_shape = match &features.layers[to].inputs[0] {
        Edge::Input => &features.input_shape,
        Edge::Layer(s) => &shapes[*s],
    };
    if src_shape.len() != 3 || dst_shape.len() != 3 {
        return None;
    }
    let (c_from, hs, ws) = (src_shape[0], src_shape[1], src_shape[2]);
    let (c_to, hd, wd) = (dst_shape[0], dst_shape[1], dst_shape[2]);
    if hd == 0 || wd == 0 || hs % hd != 0 || ws % wd != 0 || hs / hd != ws / wd {
        return None;
    }
    let stride = hs / hd;
    let spatial = (hd * wd) as u64;
    let budget = per_flops[to] / ADAPTER_BUDGET_DIV;
    let bn_flops = 2 * c_to as u64 * spatial;
    if budget <= bn_flops {
        return None;
    }
    // reduce: 2*c_from*c_mid*spatial, expand: 2*c_mid*c_to*spatial.
    let c_mid = ((budget - bn_flops) / (2 * spatial * (c_from + c_to) as u64)) as usize;
    if c_mid == 0 {
        return None;
    }
    let flops = 2 * spatial * (c_mid as u64) * (c_from + c_to) as u64 + bn_flops;
    Some(Slice {
        from,
        to,
        reduce: [
            he_filters(&[c_mid, c_from, 1, 1], c_from, rng),
            Tensor::zeros(&[c_mid]),
        ],
        expand: [
            he_filters(&[c_to, c_mid, 1, 1], c_mid, rng),
            Tensor::zeros(&[c_to]),
        ],
        bn_weights: [Tensor::filled(&[c_to], 1.0), Tensor::zeros(&[c_to])],
        bn_buffers: [Tensor::zeros(&[c_to]), Tensor::filled(&[c_to], 1.0)],
        alpha_tilde: 0.0,
        flops,
        stride,
    })
}

/// Iterative slice pruning: setup-prune weak gates, then rounds of
/// {evaluate; if above tolerance: store, prune the n smallest gates,
/// retrain}. Returns the last stored model; if no round ever met the
/// tolerance, the dense input model with `failed = true`.
pub fn iterative_prune(
    dense: &HybridModel,
    train: &Dataset,
    eval: &Dataset,
    pc: &PruneConfig,
    acc_vic: f64,
    tcfg: &TrainConfig,
    lambda: f64,
) -> Result<PruneOutcome> {
    pc.validate()?;
    if !(acc_vic > 0.0 && acc_vic <= 1.0) {
        return Err(Error::invalid("acc_vic must be in (0,1]"));
    }
    let acc_tol = (1.0 - pc.delta) * acc_vic;
    let mut cur = dense.clone();
    cur.prune_below(pc.alpha_setup);
    if pc.rounds == 0 {
        return Ok(PruneOutcome {
            model: cur,
            log: Vec::new(),
            failed: false,
        });
    }
    let mut stored: Option<HybridModel> = None;
    let mut log: Vec<PruneRound> = Vec::new();
    for round in 1..=pc.rounds {
        let acc = cur.accuracy(eval)?;
        let (g, plan) = cur.deploy_plan()?;
        let pct = utility_of_plan(&g, &plan)?.pct_flops_tee;
        let alphas: Vec<(LayerId, LayerId, f64)> = cur
            .slices
            .iter()
            .map(|s| (s.from, s.to, s.alpha()))
            .collect();
        let ok = acc > acc_tol;
        let mut pruned = Vec::new();
        if ok {
            stored = Some(cur.clone());
            pruned = cur.prune_n_smallest(pc.n);
        }
        log.push(PruneRound {
            round,
            acc,
            slices_remaining: alphas.len(),
            pct_flops_tee: pct,
            alphas,
            pruned: pruned.clone(),
            stored: ok,
        });
        if !ok || pruned.is_empty() {
            break;
        }
        cur = cur.train_dense(train, tcfg, lambda)?;
    }
    match stored {
        Some(model) => Ok(PruneOutcome {
            model,
            log,
            failed: false,
        }),
        None => Ok(PruneOutcome {
            model: dense.clone(),
            log,
            failed: true,
        }),
    }
}
