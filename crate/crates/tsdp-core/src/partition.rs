//! Partition plans: which layers run in the trusted world, on the GPU, or
//! obfuscated, for each defense scheme.
//!
//! Layer counting uses block granularity: every conv/linear starts a block
//! and trailing batchnorm/activation/pool layers attach to it. Depth-style
//! schemes count raw layers but snap the shielded set outward to block
//! boundaries, so an activation is never split from its producing layer.

use crate::error::{Error, Result};
use crate::nn::graph::{LayerId, ModelGraph};
use crate::rng::derive;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    Deep,
    Shallow,
    Magnitude,
    Intermediate,
    NonLinearObf,
    Ennclave,
    TeeSlice,
    NoShield,
    BlackBox,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::Deep => "deep",
            Scheme::Shallow => "shallow",
            Scheme::Magnitude => "magnitude",
            Scheme::Intermediate => "intermediate",
            Scheme::NonLinearObf => "nonlinear_obf",
            Scheme::Ennclave => "ennclave",
            Scheme::TeeSlice => "teeslice",
            Scheme::NoShield => "noshield",
            Scheme::BlackBox => "blackbox",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    Tee,
    Gpu,
    Obfuscated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlanConfig {
    None,
    Depth(usize),
    Ratio(f64),
    SeededRatio { ratio: f64, seed: u64 },
}

impl PlanConfig {
    /// Compact human/CSV label.
    pub fn label(&self) -> String {
        match self {
            PlanConfig::None => "-".into(),
            PlanConfig::Depth(n) => format!("depth{n}"),
            PlanConfig::Ratio(r) => format!("ratio{r}"),
            PlanConfig::SeededRatio { ratio, seed } => format!("ratio{ratio}s{seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: Scheme,
    /// Placement per layer id (all layers, weighted or not).
    pub placements: BTreeMap<LayerId, Placement>,
    /// Magnitude only: per-layer shielded-weight mask over the flat
    /// multiply-weight array.
    pub weight_masks: Option<BTreeMap<LayerId, Vec<bool>>>,
    /// Intermediate (SOTER) only: blinding scalar per offloaded layer.
    pub scalars: Option<BTreeMap<LayerId, f64>>,
    pub config: PlanConfig,
    pub warnings: Vec<String>,
}

impl PartitionPlan {
    pub fn placement(&self, id: LayerId) -> Placement {
        self.placements[&id]
    }

    /// Plan invariants from the scheme taxonomy.
    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        for id in 0..model.layers.len() {
            if !self.placements.contains_key(&id) {
                return Err(Error::invalid(format!("layer {id} has no placement")));
            }
        }
        if (self.scheme == Scheme::Magnitude) != self.weight_masks.is_some() {
            return Err(Error::invalid(
                "weight_masks present iff scheme is Magnitude",
            ));
        }
        if (self.scheme == Scheme::Intermediate) != self.scalars.is_some() {
            return Err(Error::invalid("scalars present iff scheme is Intermediate"));
        }
        match self.scheme {
            Scheme::NoShield => {
                if self.placements.values().any(|&p| p != Placement::Gpu) {
                    return Err(Error::invalid("NoShield must place everything on GPU"));
                }
            }
            Scheme::BlackBox => {
                if self.placements.values().any(|&p| p != Placement::Tee) {
                    return Err(Error::invalid("BlackBox must place everything in TEE"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Ids of weighted layers whose parameters are visible to the attacker
    /// (GPU placement; obfuscated layers are exposed only through the
    /// obfuscation, and partially-masked magnitude layers expose their
    /// unshielded weights).
    pub fn offloaded_weighted(&self, model: &ModelGraph) -> Vec<LayerId> {
        model
            .weighted_layers()
            .into_iter()
            .filter(|id| self.placements[id] == Placement::Gpu)
            .collect()
    }

    pub fn same_placements(&self, other: &PartitionPlan) -> bool {
        self.placements == other.placements
    }
}

/// Group layer ids into blocks: a conv/linear head plus its trailing
/// non-matmul layers.
pub fn blocks(model: &ModelGraph) -> Vec<Vec<LayerId>> {
    let mut out: Vec<Vec<LayerId>> = Vec::new();
    for (id, layer) in model.layers.iter().enumerate() {
        let starts_block = layer.kind.is_linear_op();
        if starts_block || out.is_empty() {
            out.push(vec![id]);
        } else {
            out.last_mut().unwrap().push(id);
        }
    }
    out
}

fn uniform_plan(model: &ModelGraph, scheme: Scheme, placement: Placement) -> PartitionPlan {
    PartitionPlan {
        scheme,
        placements: (0..model.layers.len()).map(|id| (id, placement)).collect(),
        weight_masks: None,
        scalars: None,
        config: PlanConfig::None,
        warnings: Vec::new(),
    }
}

pub fn plan_noshield(model: &ModelGraph) -> PartitionPlan {
    uniform_plan(model, Scheme::NoShield, Placement::Gpu)
}

pub fn plan_blackbox(model: &ModelGraph) -> PartitionPlan {
    uniform_plan(model, Scheme::BlackBox, Placement::Tee)
}

/// Shield the last `n_deep` layers (snapped outward to block boundaries).
pub fn plan_deep(model: &ModelGraph, n_deep: usize) -> Result<PartitionPlan> {
    depth_plan(model, n_deep, Scheme::Deep)
}

/// Shield the first `n_shallow` layers (snapped outward to block boundaries).
pub fn plan_shallow(model: &ModelGraph, n_shallow: usize) -> Result<PartitionPlan> {
    depth_plan(model, n_shallow, Scheme::Shallow)
}

fn depth_plan(model: &ModelGraph, n: usize, scheme: Scheme) -> Result<PartitionPlan> {
    let total = model.layers.len();
    if n > total {
        return Err(Error::invalid(format!(
            "depth {n} exceeds layer count {total}"
        )));
    }
    let blocks = blocks(model);
    let mut tee: Vec<LayerId> = Vec::new();
    let mut covered = 0usize;
    let iter: Box<dyn Iterator<Item = &Vec<LayerId>>> = match scheme {
        Scheme::Deep => Box::new(blocks.iter().rev()),
        _ => Box::new(blocks.iter()),
    };
    for block in iter {
        if covered >= n {
            break;
        }
        tee.extend_from_slice(block);
        covered += block.len();
    }
    let mut plan = uniform_plan(model, scheme, Placement::Gpu);
    for id in tee {
        plan.placements.insert(id, Placement::Tee);
    }
    plan.config = PlanConfig::Depth(n);
    Ok(plan)
}

/// Magnitude configuration grid from the sweep protocol.
pub const MAG_RATIO_GRID: [f64; 8] = [0.0, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
/// Intermediate (SOTER) configuration grid.
pub const SOTER_RATIO_GRID: [f64; 8] = [0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0];

/// Shield the globally largest-magnitude fraction of conv/linear multiply
/// weights; non-matmul layers ride in the TEE.
pub fn plan_magnitude(model: &ModelGraph, mag_ratio: f64) -> Result<PartitionPlan> {
    if !(0.0..=1.0).contains(&mag_ratio) {
        return Err(Error::invalid("mag_ratio must be in [0,1]"));
    }
    // Collect (|w|, layer, flat index) over multiply weights only.
    let mut entries: Vec<(f64, LayerId, usize)> = Vec::new();
    let mut per_layer_len: BTreeMap<LayerId, usize> = BTreeMap::new();
    for (id, layer) in model.layers.iter().enumerate() {
        if layer.kind.is_linear_op() {
            let w = layer.weights[0].data();
            per_layer_len.insert(id, w.len());
            for (i, &v) in w.iter().enumerate() {
                entries.push((v.abs(), id, i));
            }
        }
    }
    let k = (mag_ratio * entries.len() as f64).round() as usize;
    // Ties broken toward the lower flat index (stable order on equal magnitude).
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut masks: BTreeMap<LayerId, Vec<bool>> = per_layer_len
        .iter()
        .map(|(&id, &len)| (id, vec![false; len]))
        .collect();
    for &(_, id, i) in entries.iter().take(k) {
        masks.get_mut(&id).unwrap()[i] = true;
    }
    let mut plan = uniform_plan(model, Scheme::Magnitude, Placement::Tee);
    for (&id, mask) in &masks {
        let all = mask.iter().all(|&m| m);
        plan.placements.insert(
            id,
            if all { Placement::Tee } else { Placement::Gpu },
        );
    }
    plan.weight_masks = Some(masks);
    plan.config = PlanConfig::Ratio(mag_ratio);
    plan.scheme = Scheme::Magnitude;
    Ok(plan)
}

/// Shield a seeded-random fraction of blocks; offloaded matmul layers are
/// published blinded by a per-layer scalar (the executor divides it back).
pub fn plan_intermediate(
    model: &ModelGraph,
    soter_ratio: f64,
    seed: u64,
    fixed_scalar: Option<f64>,
) -> Result<PartitionPlan> {
    if !(0.0..=1.0).contains(&soter_ratio) {
        return Err(Error::invalid("soter_ratio must be in [0,1]"));
    }
    if fixed_scalar == Some(0.0) {
        return Err(Error::invalid("blinding scalar must be non-zero"));
    }
    let blocks = blocks(model);
    let n_shield = (soter_ratio * blocks.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    let mut rng = derive(seed, "soter-layers");
    order.shuffle(&mut rng);
    let shielded: Vec<usize> = order.into_iter().take(n_shield).collect();
    let mut plan = uniform_plan(model, Scheme::Intermediate, Placement::Gpu);
    for &b in &shielded {
        for &id in &blocks[b] {
            plan.placements.insert(id, Placement::Tee);
        }
    }
    let mut scalars = BTreeMap::new();
    for (id, layer) in model.layers.iter().enumerate() {
        if layer.kind.is_linear_op() && plan.placements[&id] == Placement::Gpu {
            let s = match fixed_scalar {
                Some(s) => s,
                // log-uniform over [0.5, 2]
                None => (rng.gen_range((0.5f64).ln()..=(2.0f64).ln())).exp(),
            };
            scalars.insert(id, s);
        }
    }
    plan.scalars = Some(scalars);
    plan.config = PlanConfig::SeededRatio {
        ratio: soter_ratio,
        seed,
    };
    Ok(plan)
}

/// Non-linear layers to the TEE, matmul layers obfuscated on the GPU.
pub fn plan_nonlinear_obf(model: &ModelGraph) -> PartitionPlan {
    let mut plan = uniform_plan(model, Scheme::NonLinearObf, Placement::Tee);
    let mut any_nonlinear = false;
    for (id, layer) in model.layers.iter().enumerate() {
        if layer.kind.is_linear_op() {
            plan.placements.insert(id, Placement::Obfuscated);
        } else if !layer.kind.is_weighted() {
            any_nonlinear = true;
        }
    }
    if !any_nonlinear {
        plan.warnings
            .push("model has no non-linear layers; TEE set is empty".into());
    }
    plan.config = PlanConfig::None;
    plan
}

/// Backbone-substitution variant: the offloaded shallow part is the public
/// backbone verbatim and only the victim's classifier block runs in TEE.
/// Returns the composite graph together with its plan.
pub fn plan_ennclave(
    victim: &ModelGraph,
    backbone: &ModelGraph,
) -> Result<(PartitionPlan, ModelGraph)> {
    let vic_blocks = blocks(victim);
    let bb_blocks = blocks(backbone);
    let head_block = vic_blocks
        .last()
        .ok_or_else(|| Error::invalid("victim has no layers"))?;
    if bb_blocks.len() < 2 {
        return Err(Error::invalid("backbone too shallow to substitute"));
    }
    // Composite = backbone minus its own head block, plus the victim head.
    let keep: usize = bb_blocks[..bb_blocks.len() - 1]
        .iter()
        .map(|b| b.len())
        .sum();
    let mut composite = ModelGraph {
        layers: backbone.layers[..keep].to_vec(),
        input_shape: backbone.input_shape.clone(),
        output_mode: victim.output_mode,
    };
    let offset_src = head_block[0];
    for &vid in head_block {
        let mut layer = victim.layers[vid].clone();
        for e in &mut layer.inputs {
            if let crate::nn::graph::Edge::Layer(src) = e {
                // Rewire intra-head edges; the head's external input becomes
                // the tip of the kept backbone.
                *src = if *src >= offset_src {
                    *src - offset_src + keep
                } else {
                    keep - 1
                };
            }
        }
        composite.layers.push(layer);
    }
    composite
        .validate()
        .map_err(|e| Error::invalid(format!("backbone/victim head incompatible: {e}")))?;
    let mut plan = uniform_plan(&composite, Scheme::Ennclave, Placement::Gpu);
    for id in keep..composite.layers.len() {
        plan.placements.insert(id, Placement::Tee);
    }
    plan.config = PlanConfig::None;
    Ok((plan, composite))
}
