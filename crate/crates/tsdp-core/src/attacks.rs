//! The three-phase attack pipeline and the seven security metrics:
//! surrogate initialization by weight transplant, label-only query-based
//! model stealing, and confidence/gradient membership inference.
//!
//! Attack cells are independent; everything here is deterministic per seed.

use crate::data::{Dataset, DatasetMeta, DistributionId, MiaSplit, QuerySet};
use crate::error::{Error, Result};
use crate::exec;
use crate::flops::{utility_of_plan, CostReport};
use crate::nn::adversarial::{pgd_attack, PGD_EPS, PGD_STEPS};
use crate::nn::engine::{
    argmax, backward_sample, ce_loss_and_grad, forward_logits, forward_sample,
};
use crate::nn::graph::{LayerId, LayerKind, ModelGraph};
use crate::nn::ops::softmax;
use crate::nn::train::{evaluate_accuracy, mean_confidence, train_sgd, TrainConfig};
use crate::partition::{PartitionPlan, Placement, PlanConfig, Scheme};
use crate::rng::{derive, derive_seed};
use crate::shadownet::{attack_recover_positions, attack_unmask, obfuscate, AssignMode};
use crate::tensor::Tensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Posterior entries fed to the membership classifier.
pub const MIA_TOP_K: usize = 3;

/// What the attacker is assumed to know about the deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assumption {
    /// Architecture of the deployed hybrid plus whatever its plan offloads.
    HybridKnown,
    /// Only the public backbone (meaningful against the slice scheme).
    BackboneOnly,
    /// The full victim weights; upper-bound baseline.
    VictimKnown,
}

/// A surrogate after phase one (transplant), before stealing.
#[derive(Debug, Clone)]
pub struct SurrogateInit {
    pub base: ModelGraph,
    /// Layer ids whose weights were (partially) copied from the deployment.
    pub transplanted: Vec<LayerId>,
    pub assumption: Assumption,
    /// Human-readable details, e.g. obfuscation-recovery rates.
    pub notes: Vec<String>,
}

/// Label-only query interface to the deployed victim. The wrapped model is
/// private and no method exposes logits or posteriors, so reading
/// confidences through the oracle is impossible by construction.
pub struct VictimOracle<'a> {
    model: &'a ModelGraph,
    queries: std::cell::Cell<u64>,
}

impl<'a> VictimOracle<'a> {
    pub fn new(model: &'a ModelGraph) -> Self {
        VictimOracle {
            model,
            queries: std::cell::Cell::new(0),
        }
    }

    /// Predicted class ids for a batch; the only output channel.
    pub fn labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = forward_logits(self.model, x)?;
        let n = x.shape()[0];
        self.queries.set(self.queries.get() + n as u64);
        Ok((0..n).map(|i| argmax(logits.sample(i))).collect())
    }

    pub fn n_classes(&self) -> Result<usize> {
        self.model.n_outputs()
    }

    pub fn queries_made(&self) -> u64 {
        self.queries.get()
    }
}

fn same_architecture(a: &ModelGraph, b: &ModelGraph) -> bool {
    a.input_shape == b.input_shape
        && a.layers.len() == b.layers.len()
        && a.layers
            .iter()
            .zip(&b.layers)
            .all(|(x, y)| x.kind == y.kind && x.inputs == y.inputs)
}

/// Split a matmul weight into row filters (conv: one per output channel).
fn row_filters(w: &Tensor, rows: usize) -> Vec<Tensor> {
    let inner = w.len() / rows;
    (0..rows)
        .map(|i| Tensor::from_flat(w.data()[i * inner..(i + 1) * inner].to_vec()))
        .collect()
}

fn matmul_rows(kind: &LayerKind) -> Option<usize> {
    match kind {
        LayerKind::Conv2d { c_out, .. } => Some(*c_out),
        LayerKind::Linear { c_out, .. } => Some(*c_out),
        _ => None,
    }
}

/// Phase one: build the surrogate starting point by transplanting whatever
/// the plan exposes into the public model.
///
/// `deploy_seed` is the deployment's executor seed; for the obfuscation
/// scheme it reproduces the published GPU filters the attacker observes.
pub fn surrogate_init(
    plan: &PartitionPlan,
    victim: &ModelGraph,
    public_model: &ModelGraph,
    assumption: Assumption,
    deploy_seed: u64,
) -> Result<SurrogateInit> {
    plan.validate(victim)?;
    match assumption {
        Assumption::VictimKnown => {
            return Ok(SurrogateInit {
                base: victim.clone(),
                transplanted: victim.weighted_layers(),
                assumption,
                notes: vec!["victim weights fully known".into()],
            })
        }
        Assumption::BackboneOnly => {
            if plan.scheme != Scheme::TeeSlice {
                return Err(Error::invalid(
                    "backbone-only attacker is only meaningful against the slice \
                     scheme; other plans publish the full architecture",
                ));
            }
            return Ok(SurrogateInit {
                base: public_model.clone(),
                transplanted: Vec::new(),
                assumption,
                notes: vec!["only the public backbone is known".into()],
            });
        }
        Assumption::HybridKnown => {}
    }
    if plan.scheme == Scheme::TeeSlice {
        // The offloaded backbone is frozen at the public weights, so the
        // transplant adds nothing beyond the public model itself.
        return Ok(SurrogateInit {
            base: public_model.clone(),
            transplanted: Vec::new(),
            assumption,
            notes: vec!["offloaded backbone equals the public weights".into()],
        });
    }
    if !same_architecture(victim, public_model) {
        return Err(Error::invalid(
            "public model architecture does not match the deployed victim",
        ));
    }
    let mut base = public_model.clone();
    let mut transplanted = Vec::new();
    let mut notes = Vec::new();
    match plan.scheme {
        Scheme::Magnitude => {
            // Elementwise: published entries are the unshielded multiply
            // weights; shielded positions stay at the public values.
            let masks = plan.weight_masks.as_ref().expect("validated");
            for (&id, mask) in masks {
                if plan.placement(id) != Placement::Gpu {
                    continue;
                }
                let mut copied = false;
                let vic = victim.layers[id].weights[0].data();
                for ((w, &shielded), &v) in base.layers[id].weights[0]
                    .data_mut()
                    .iter_mut()
                    .zip(mask)
                    .zip(vic)
                {
                    if !shielded {
                        *w = v;
                        copied = true;
                    }
                }
                if copied {
                    transplanted.push(id);
                }
            }
        }
        Scheme::NonLinearObf => {
            for (id, layer) in victim.layers.iter().enumerate() {
                if plan.placement(id) != Placement::Obfuscated {
                    continue;
                }
                let rows = matmul_rows(&layer.kind).ok_or_else(|| {
                    Error::invalid(format!("layer {id} obfuscated but not a matmul"))
                })?;
                let vic_filters = row_filters(&layer.weights[0], rows);
                let obf = obfuscate(
                    &vic_filters,
                    crate::shadownet::DEFAULT_EXPANSION,
                    derive_seed(deploy_seed, &format!("obf/{id}")),
                )?;
                // The variance filter separates true-filter differences
                // (~2x weight variance) from mask-contaminated ones
                // (~mask variance = 100x weight variance); a tenth of the
                // published pooled variance sits between the two.
                let pooled: Vec<f64> = obf
                    .filters
                    .iter()
                    .flat_map(|f| f.data().iter().copied())
                    .collect();
                let threshold = Tensor::from_flat(pooled).variance() / 10.0;
                let candidates = attack_unmask(&obf.filters, threshold)?;
                let pub_filters = row_filters(&public_model.layers[id].weights[0], rows);
                let report = attack_recover_positions(
                    &candidates,
                    &pub_filters,
                    &vic_filters,
                    AssignMode::Nearest,
                )?;
                let mut replaced = 0usize;
                for k in 0..rows {
                    let best = candidates
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| report.assignments[i] == k)
                        .min_by(|a, b| {
                            a.1.l2_distance(&pub_filters[k])
                                .partial_cmp(&b.1.l2_distance(&pub_filters[k]))
                                .unwrap()
                        });
                    if let Some((_, cand)) = best {
                        let inner = cand.len();
                        base.layers[id].weights[0].data_mut()[k * inner..(k + 1) * inner]
                            .copy_from_slice(cand.data());
                        replaced += 1;
                    }
                }
                notes.push(format!(
                    "layer {id}: {replaced}/{rows} filters recovered \
                     (weights {:.2}, positions {:.2})",
                    report.weight_recovery_rate, report.position_recovery_rate
                ));
                if replaced > 0 {
                    transplanted.push(id);
                }
            }
        }
        _ => {
            // Whole-layer copy of every GPU-placed weighted layer. For the
            // blinded scheme the published multiply weights carry the
            // per-layer scalar and the bias stays in the trusted world, so
            // the surrogate keeps the public bias there.
            let scalars = plan.scalars.as_ref();
            for id in victim.weighted_layers() {
                if plan.placement(id) != Placement::Gpu {
                    continue;
                }
                match scalars.and_then(|s| s.get(&id)) {
                    Some(&s) => {
                        base.layers[id].weights[0] =
                            victim.layers[id].weights[0].map(|v| v * s);
                        notes.push(format!("layer {id}: published weights blinded"));
                    }
                    None => {
                        base.layers[id].weights = victim.layers[id].weights.clone();
                        base.layers[id].buffers = victim.layers[id].buffers.clone();
                    }
                }
                transplanted.push(id);
            }
        }
    }
    Ok(SurrogateInit {
        base,
        transplanted,
        assumption,
        notes,
    })
}

/// Phase two: train the surrogate on attacker inputs labeled by the victim
/// oracle. An empty query set returns the initialization unchanged.
pub fn model_steal(
    si: &SurrogateInit,
    oracle: &VictimOracle,
    queries: &QuerySet,
    cfg: &TrainConfig,
) -> Result<ModelGraph> {
    if queries.is_empty() {
        return Ok(si.base.clone());
    }
    let images = queries.to_tensor()?;
    let labels = oracle.labels(&images)?;
    let d = Dataset {
        images,
        labels,
        meta: DatasetMeta {
            n_classes: si.base.n_outputs()?,
            seed: cfg.seed,
            distribution: DistributionId::Public,
        },
    };
    train_sgd(&si.base, &d, cfg)
}

/// Fresh He-initialized copy of an architecture (shadow-model starting
/// point; matches the builder's initialization scheme).
pub fn reinit_weights(model: &ModelGraph, seed: u64) -> ModelGraph {
    let mut rng = derive(seed, "model-init");
    let mut gauss = |std: f64| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut out = model.clone();
    for layer in &mut out.layers {
        match layer.kind {
            LayerKind::Conv2d { c_in, k, .. } => {
                let std = (2.0 / (c_in * k * k) as f64).sqrt();
                for w in layer.weights[0].data_mut() {
                    *w = gauss(std);
                }
                layer.weights[1] = Tensor::zeros(layer.weights[1].shape());
            }
            LayerKind::Linear { c_in, .. } => {
                let std = (2.0 / c_in as f64).sqrt();
                for w in layer.weights[0].data_mut() {
                    *w = gauss(std);
                }
                layer.weights[1] = Tensor::zeros(layer.weights[1].shape());
            }
            LayerKind::BatchNorm { .. } => {
                layer.weights[0] = Tensor::filled(layer.weights[0].shape(), 1.0);
                layer.weights[1] = Tensor::zeros(layer.weights[1].shape());
                layer.buffers[0] = Tensor::zeros(layer.buffers[0].shape());
                layer.buffers[1] = Tensor::filled(layer.buffers[1].shape(), 1.0);
            }
            LayerKind::AlphaGate => {
                layer.weights[0] = Tensor::zeros(&[1]);
            }
            _ => {}
        }
    }
    out
}

/// Outcome of one membership-inference run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiaOutcome {
    pub accuracy: f64,
    /// True when the features were degenerate and 0.5 was reported.
    pub degenerate: bool,
    pub classifier: &'static str,
}

/// Sorted top-k max posteriors per sample (zero-padded below k classes).
fn confidence_features(model: &ModelGraph, d: &Dataset) -> Result<Vec<Vec<f64>>> {
    let logits = forward_logits(model, &d.images)?;
    Ok((0..d.len())
        .map(|i| {
            let mut p = softmax(logits.sample(i));
            p.sort_by(|a, b| b.partial_cmp(a).unwrap());
            p.resize(MIA_TOP_K, 0.0);
            p.truncate(MIA_TOP_K);
            p
        })
        .collect())
}

/// Per-sample (loss, input-gradient norm, last-layer parameter-gradient
/// norm) — exactly three features.
fn gradient_features(model: &ModelGraph, d: &Dataset) -> Result<Vec<Vec<f64>>> {
    let shapes = model.infer_shapes()?;
    let last = *model
        .weighted_layers()
        .iter()
        .filter(|&&id| model.layers[id].kind.is_linear_op())
        .last()
        .ok_or_else(|| Error::invalid("model has no matmul layer"))?;
    Ok(exec::map_indexed(d.len(), |i| {
        let x = d.images.sample(i);
        let cache = forward_sample(model, &shapes, x);
        let (loss, d_out) = ce_loss_and_grad(cache.outputs.last().unwrap(), d.labels[i]);
        let (grads, dx) = backward_sample(model, &shapes, &cache, x, &d_out);
        let gx = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gw = grads.0[last]
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        vec![loss, gx, gw]
    }))
}

/// Binary logistic regression on z-scored features (full-batch GD).
struct Logistic {
    w: Vec<f64>,
    b: f64,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Logistic {
    fn fit(members: &[Vec<f64>], non_members: &[Vec<f64>]) -> Logistic {
        let dim = members[0].len();
        let all = members.iter().chain(non_members);
        let n = (members.len() + non_members.len()) as f64;
        let mut mean = vec![0.0; dim];
        for f in all.clone() {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for f in all {
            for ((s, &m), &v) in std.iter_mut().zip(&mean).zip(f) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt().max(1e-12);
        }
        let z = |f: &[f64], j: usize| (f[j] - mean[j]) / std[j];
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let lr = 0.5 / n;
        for _ in 0..300 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (f, t) in members
                .iter()
                .map(|f| (f, 1.0))
                .chain(non_members.iter().map(|f| (f, 0.0)))
            {
                let s: f64 = b + (0..dim).map(|j| w[j] * z(f, j)).sum::<f64>();
                let err = 1.0 / (1.0 + (-s).exp()) - t;
                for (g, j) in gw.iter_mut().zip(0..dim) {
                    *g += err * z(f, j);
                }
                gb += err;
            }
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv -= lr * g;
            }
            b -= lr * gb;
        }
        Logistic { w, b, mean, std }
    }

    fn is_member(&self, f: &[f64]) -> bool {
        let s: f64 = self.b
            + self
                .w
                .iter()
                .enumerate()
                .map(|(j, &w)| w * (f[j] - self.mean[j]) / self.std[j])
                .sum::<f64>();
        s > 0.0
    }

    fn balanced_accuracy(&self, members: &[Vec<f64>], non_members: &[Vec<f64>]) -> f64 {
        let tpr = members.iter().filter(|f| self.is_member(f)).count() as f64
            / members.len() as f64;
        let tnr = non_members.iter().filter(|f| !self.is_member(f)).count() as f64
            / non_members.len() as f64;
        (tpr + tnr) / 2.0
    }
}

fn degenerate(members: &[Vec<f64>], non_members: &[Vec<f64>]) -> bool {
    let first = &members[0];
    members
        .iter()
        .chain(non_members)
        .all(|f| f.iter().zip(first).all(|(a, b)| (a - b).abs() < 1e-12))
}

fn mia_generic(
    surrogate: &ModelGraph,
    mia: &MiaSplit,
    shadow_cfg: &TrainConfig,
    features: impl Fn(&ModelGraph, &Dataset) -> Result<Vec<Vec<f64>>>,
    classifier: &'static str,
) -> Result<MiaOutcome> {
    // Shadow model: same architecture as the surrogate, fresh weights,
    // trained on the attacker's own labeled split.
    let init = reinit_weights(surrogate, derive_seed(shadow_cfg.seed, "shadow-init"));
    let shadow = train_sgd(&init, &mia.shadow_train, shadow_cfg)?;
    let mem = features(&shadow, &mia.shadow_train)?;
    let non = features(&shadow, &mia.shadow_test)?;
    if degenerate(&mem, &non) {
        return Ok(MiaOutcome {
            accuracy: 0.5,
            degenerate: true,
            classifier,
        });
    }
    let clf = Logistic::fit(&mem, &non);
    let t_mem = features(surrogate, &mia.target_train)?;
    let t_non = features(surrogate, &mia.target_test)?;
    if degenerate(&t_mem, &t_non) {
        return Ok(MiaOutcome {
            accuracy: 0.5,
            degenerate: true,
            classifier,
        });
    }
    Ok(MiaOutcome {
        accuracy: clf.balanced_accuracy(&t_mem, &t_non),
        degenerate: false,
        classifier,
    })
}

/// Confidence-based (transfer) membership inference: balanced accuracy of a
/// shadow-calibrated classifier over the surrogate's sorted top-3
/// posteriors on the target train/test split.
pub fn mia_confidence(
    surrogate: &ModelGraph,
    mia: &MiaSplit,
    shadow_cfg: &TrainConfig,
) -> Result<MiaOutcome> {
    mia_generic(
        surrogate,
        mia,
        shadow_cfg,
        confidence_features,
        "logistic-top3-posteriors",
    )
}

/// White-box gradient-based membership inference over (loss, input-gradient
/// norm, last-layer parameter-gradient norm).
pub fn mia_gradient(
    surrogate: &ModelGraph,
    mia: &MiaSplit,
    shadow_cfg: &TrainConfig,
) -> Result<MiaOutcome> {
    mia_generic(
        surrogate,
        mia,
        shadow_cfg,
        gradient_features,
        "logistic-loss-gradnorms",
    )
}

/// Which security metric governs a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SecurityMetric {
    MsAccuracy,
    Fidelity,
    Asr,
    ConfMia,
    GradMia,
}

impl SecurityMetric {
    pub fn label(&self) -> &'static str {
        match self {
            SecurityMetric::MsAccuracy => "ms_accuracy",
            SecurityMetric::Fidelity => "fidelity",
            SecurityMetric::Asr => "asr",
            SecurityMetric::ConfMia => "conf_mia_acc",
            SecurityMetric::GradMia => "grad_mia_acc",
        }
    }
}

/// Full per-cell result: the seven metrics plus cost and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scheme: Scheme,
    pub config: PlanConfig,
    pub seed: u64,
    pub ms_accuracy: f64,
    pub fidelity: f64,
    pub asr: f64,
    pub conf_mia_acc: f64,
    pub grad_mia_acc: f64,
    pub generalization_gap: f64,
    pub confidence_gap: f64,
    pub utility: CostReport,
    pub classifier: String,
    /// Metric names whose raw value was negative and clamped to 0.
    pub clamped: Vec<String>,
    /// Metrics replaced by a stated fallback, with the reason.
    pub skipped: Vec<String>,
}

impl AttackReport {
    pub const CSV_HEADER: &'static str = "scheme,config,seed,ms_accuracy,fidelity,asr,\
        conf_mia_acc,grad_mia_acc,generalization_gap,confidence_gap,\
        flops_tee,flops_gpu,flops_total,pct_flops_tee,sim_latency";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{:.6},{:.1}",
            self.scheme.label(),
            self.config.label(),
            self.seed,
            self.ms_accuracy,
            self.fidelity,
            self.asr,
            self.conf_mia_acc,
            self.grad_mia_acc,
            self.generalization_gap,
            self.confidence_gap,
            self.utility.flops_tee,
            self.utility.flops_gpu,
            self.utility.flops_total,
            self.utility.pct_flops_tee,
            self.utility.sim_latency,
        )
    }

    pub fn metric(&self, m: SecurityMetric) -> f64 {
        match m {
            SecurityMetric::MsAccuracy => self.ms_accuracy,
            SecurityMetric::Fidelity => self.fidelity,
            SecurityMetric::Asr => self.asr,
            SecurityMetric::ConfMia => self.conf_mia_acc,
            SecurityMetric::GradMia => self.grad_mia_acc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ms_accuracy", self.ms_accuracy),
            ("fidelity", self.fidelity),
            ("asr", self.asr),
            ("conf_mia_acc", self.conf_mia_acc),
            ("grad_mia_acc", self.grad_mia_acc),
            ("generalization_gap", self.generalization_gap),
            ("confidence_gap", self.confidence_gap),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Evaluation-side inputs shared by all metrics of one cell.
pub struct AttackContext<'a> {
    pub plan: &'a PartitionPlan,
    /// The graph the plan indexes (for the cost report).
    pub deployed: &'a ModelGraph,
    pub shadow_cfg: TrainConfig,
    pub seed: u64,
}

/// Phase three: the seven metrics of one attack cell.
pub fn compute_metrics(
    surrogate: &ModelGraph,
    victim: &ModelGraph,
    testset: &Dataset,
    mia: &MiaSplit,
    ctx: &AttackContext,
) -> Result<AttackReport> {
    let mut clamped = Vec::new();
    let mut skipped = Vec::new();

    let ms_accuracy = evaluate_accuracy(surrogate, testset)?;

    let sur_logits = forward_logits(surrogate, &testset.images)?;
    let vic_logits = forward_logits(victim, &testset.images)?;
    let n = testset.len();
    let fidelity = (0..n)
        .filter(|&i| argmax(sur_logits.sample(i)) == argmax(vic_logits.sample(i)))
        .count() as f64
        / n as f64;

    // ASR over the samples the victim classifies correctly.
    let base: Vec<usize> = (0..n)
        .filter(|&i| argmax(vic_logits.sample(i)) == testset.labels[i])
        .collect();
    let asr = if base.is_empty() {
        skipped.push("asr: victim classifies no test sample correctly".into());
        0.0
    } else {
        let sub = testset.subset(&base)?;
        let adv = pgd_attack(surrogate, &sub.images, &sub.labels, PGD_EPS, PGD_STEPS)?;
        let adv_logits = forward_logits(victim, &adv)?;
        (0..sub.len())
            .filter(|&i| argmax(adv_logits.sample(i)) != sub.labels[i])
            .count() as f64
            / sub.len() as f64
    };

    let conf = mia_confidence(surrogate, mia, &ctx.shadow_cfg)?;
    if conf.degenerate {
        skipped.push("conf_mia_acc: degenerate features, reporting 0.5".into());
    }
    let grad = mia_gradient(surrogate, mia, &ctx.shadow_cfg)?;
    if grad.degenerate {
        skipped.push("grad_mia_acc: degenerate features, reporting 0.5".into());
    }

    let clamp = |name: &str, v: f64, clamped: &mut Vec<String>| {
        if v < 0.0 {
            clamped.push(name.to_string());
            0.0
        } else {
            v
        }
    };
    let generalization_gap = clamp(
        "generalization_gap",
        evaluate_accuracy(victim, &mia.target_train)?
            - evaluate_accuracy(victim, &mia.target_test)?,
        &mut clamped,
    );
    let confidence_gap = clamp(
        "confidence_gap",
        mean_confidence(victim, &mia.target_train)?
            - mean_confidence(victim, &mia.target_test)?,
        &mut clamped,
    );

    let report = AttackReport {
        scheme: ctx.plan.scheme,
        config: ctx.plan.config.clone(),
        seed: ctx.seed,
        ms_accuracy,
        fidelity,
        asr,
        conf_mia_acc: conf.accuracy,
        grad_mia_acc: grad.accuracy,
        generalization_gap,
        confidence_gap,
        utility: utility_of_plan(ctx.deployed, ctx.plan)?,
        classifier: format!("{}+{}", conf.classifier, grad.classifier),
        clamped,
        skipped,
    };
    report.validate()?;
    Ok(report)
}

/// Knobs for one end-to-end attack cell.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub assumption: Assumption,
    pub steal_cfg: TrainConfig,
    pub shadow_cfg: TrainConfig,
    /// Deployment executor seed (reproduces published obfuscations).
    pub deploy_seed: u64,
    /// Attack cell seed; stealing/shadow streams derive from it.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            assumption: Assumption::HybridKnown,
            steal_cfg: TrainConfig::default(),
            shadow_cfg: TrainConfig::default(),
            deploy_seed: 0,
            seed: 0,
        }
    }
}

/// Transplant, steal, and score one cell.
pub fn run_attack(
    victim: &ModelGraph,
    public_model: &ModelGraph,
    plan: &PartitionPlan,
    mia: &MiaSplit,
    queries: &QuerySet,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    let si = surrogate_init(plan, victim, public_model, cfg.assumption, cfg.deploy_seed)?;
    let oracle = VictimOracle::new(victim);
    let mut steal_cfg = cfg.steal_cfg.clone();
    steal_cfg.seed = derive_seed(cfg.seed, "steal");
    let surrogate = model_steal(&si, &oracle, queries, &steal_cfg)?;
    let mut shadow_cfg = cfg.shadow_cfg.clone();
    shadow_cfg.seed = derive_seed(cfg.seed, "shadow");
    let ctx = AttackContext {
        plan,
        deployed: victim,
        shadow_cfg,
        seed: cfg.seed,
    };
    compute_metrics(&surrogate, victim, &mia.target_test, mia, &ctx)
}
