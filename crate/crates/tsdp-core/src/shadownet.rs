//! ShadowNet-style weight obfuscation and its recovery attack.
//!
//! Obfuscation publishes, for a layer of `n` filters, `m = ceil(r*n)`
//! filters: each true filter plus a random high-variance mask, followed by
//! the raw masks, under a random permutation. The attack exploits the
//! variance gap: pairwise differences that cancel a shared mask have the
//! (small) weight variance, while mask-contaminated differences keep the
//! (large) mask variance.

use crate::error::{Error, Result};
use crate::rng::derive;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Expansion ratio used throughout the experiments.
pub const DEFAULT_EXPANSION: f64 = 1.2;
/// Variance threshold separating weight-only differences from
/// mask-contaminated ones.
pub const DEFAULT_VAR_THRESHOLD: f64 = 0.01;

/// Defender-side bookkeeping. The attacker never sees this; it exists for
/// exact de-obfuscation inside the trusted world and for ground-truth
/// scoring of the attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObfSecret {
    pub n: usize,
    /// Published slot of `w_i + f'_i`, per original filter `i`.
    pub slot_of_masked: Vec<usize>,
    /// Published slot of the mask `f'_i` added to filter `i`.
    pub slot_of_mask: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObfuscatedLayer {
    /// The `m` published filters, permuted.
    pub filters: Vec<Tensor>,
    pub secret: ObfSecret,
}

impl ObfuscatedLayer {
    /// Exact defender-side recovery: `w_i = published[masked] - published[mask]`.
    pub fn deobfuscate(&self) -> Vec<Tensor> {
        (0..self.secret.n)
            .map(|i| {
                self.filters[self.secret.slot_of_masked[i]]
                    .zip(&self.filters[self.secret.slot_of_mask[i]], |a, b| a - b)
                    .expect("filter shapes equal by construction")
            })
            .collect()
    }
}

/// Obfuscate with masks drawn at 100x the empirical weight variance.
pub fn obfuscate(weights: &[Tensor], r: f64, seed: u64) -> Result<ObfuscatedLayer> {
    let var = pooled_variance(weights);
    obfuscate_with_sigma(weights, r, (100.0 * var).sqrt(), seed)
}

fn pooled_variance(weights: &[Tensor]) -> f64 {
    let all: Vec<f64> = weights.iter().flat_map(|w| w.data().iter().copied()).collect();
    Tensor::from_flat(all).variance()
}

/// Obfuscate with an explicit mask standard deviation. Masks are assigned
/// to filters with replacement, so one mask may cover several filters.
pub fn obfuscate_with_sigma(
    weights: &[Tensor],
    r: f64,
    mask_sigma: f64,
    seed: u64,
) -> Result<ObfuscatedLayer> {
    let n = weights.len();
    if n == 0 {
        return Err(Error::invalid("layer has no filters"));
    }
    if r <= 1.0 {
        return Err(Error::invalid("expansion ratio must exceed 1 (no masks otherwise)"));
    }
    let m = (r * n as f64).ceil() as usize;
    let n_masks = m - n;
    let shape = weights[0].shape().to_vec();
    let mut rng = derive(seed, "shadownet-obf");
    let masks: Vec<Tensor> = (0..n_masks)
        .map(|_| {
            let data = (0..weights[0].len())
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    mask_sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            Tensor::new(shape.clone(), data).unwrap()
        })
        .collect();
    let assignment: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_masks)).collect();
    // Pre-permutation order: masked filters then raw masks.
    let mut published: Vec<Tensor> = Vec::with_capacity(m);
    for (w, &a) in weights.iter().zip(&assignment) {
        published.push(w.zip(&masks[a], |x, f| x + f)?);
    }
    published.extend(masks.iter().cloned());
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng);
    // perm[slot] = pre-permutation index; invert for the secret.
    let mut slot_of_pre = vec![0usize; m];
    for (slot, &pre) in perm.iter().enumerate() {
        slot_of_pre[pre] = slot;
    }
    let filters: Vec<Tensor> = perm.iter().map(|&pre| published[pre].clone()).collect();
    Ok(ObfuscatedLayer {
        filters,
        secret: ObfSecret {
            n,
            slot_of_masked: (0..n).map(|i| slot_of_pre[i]).collect(),
            slot_of_mask: assignment.iter().map(|&a| slot_of_pre[n + a]).collect(),
        },
    })
}

/// Phase one of the attack: all ordered pairwise differences with variance
/// below the threshold, minus redundant filter-to-filter differences.
///
/// A difference is redundant when it equals (to within a tight tolerance)
/// the difference of two kept candidates of strictly smaller variance:
/// `w_k - w_l` decomposes over the candidates `w_k` and `w_l`, while a true
/// filter never decomposes over smaller-variance candidates.
pub fn attack_unmask(published: &[Tensor], var_threshold: f64) -> Result<Vec<Tensor>> {
    if var_threshold <= 0.0 {
        return Err(Error::invalid("variance threshold must be positive"));
    }
    let m = published.len();
    let mut candidates: Vec<Tensor> = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let d = published[i].zip(&published[j], |a, b| a - b)?;
            if d.variance() < var_threshold {
                candidates.push(d);
            }
        }
    }
    // Redundancy sweep, ascending variance. Exact decompositions sit at
    // float-rounding scale, so the match tolerance is far below the
    // variance threshold to avoid clipping sums of three true filters.
    let match_tol = var_threshold / 100.0;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[a]
            .variance()
            .partial_cmp(&candidates[b].variance())
            .unwrap()
    });
    let mut kept: Vec<Tensor> = Vec::new();
    for &ci in &order {
        let c = &candidates[ci];
        let mut redundant = false;
        'outer: for a in 0..kept.len() {
            for b in 0..kept.len() {
                if a == b {
                    continue;
                }
                let resid = c
                    .zip(&kept[a], |x, y| x - y)?
                    .zip(&kept[b], |x, y| x + y)?;
                if resid.variance() < match_tol && resid.mean().abs() < match_tol.sqrt() {
                    redundant = true;
                    break 'outer;
                }
            }
        }
        if !redundant {
            kept.push(c.clone());
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignMode {
    /// Independent nearest-neighbor per candidate (the paper's rule).
    Nearest,
    /// Globally greedy one-to-one matching, for ablation.
    Unique,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Position assigned to each candidate (indices into the public layer).
    pub assignments: Vec<usize>,
    pub weight_recovery_rate: f64,
    pub position_recovery_rate: f64,
}

/// Phase two: place candidates at the public position with smallest L2
/// distance, then score against the defender's ground truth.
pub fn attack_recover_positions(
    candidates: &[Tensor],
    public_layer: &[Tensor],
    true_filters: &[Tensor],
    mode: AssignMode,
) -> Result<RecoveryReport> {
    if public_layer.is_empty() {
        return Err(Error::invalid("public layer has no filters"));
    }
    let assignments: Vec<usize> = match mode {
        AssignMode::Nearest => candidates
            .iter()
            .map(|c| nearest(c, public_layer))
            .collect(),
        AssignMode::Unique => unique_greedy(candidates, public_layer),
    };
    // Ground-truth scoring.
    let n = true_filters.len();
    let mut weight_hits = 0usize;
    let mut position_hits = 0usize;
    for (k, truth) in true_filters.iter().enumerate() {
        let matching: Vec<usize> = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.linf_distance(truth) < 1e-6)
            .map(|(i, _)| i)
            .collect();
        if !matching.is_empty() {
            weight_hits += 1;
            if matching.iter().any(|&i| assignments[i] == k) {
                position_hits += 1;
            }
        }
    }
    Ok(RecoveryReport {
        assignments,
        weight_recovery_rate: weight_hits as f64 / n as f64,
        position_recovery_rate: position_hits as f64 / n as f64,
    })
}

fn nearest(c: &Tensor, public: &[Tensor]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in public.iter().enumerate() {
        let d = c.l2_distance(p);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn unique_greedy(candidates: &[Tensor], public: &[Tensor]) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        for (j, p) in public.iter().enumerate() {
            pairs.push((c.l2_distance(p), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut cand_done = vec![false; candidates.len()];
    let mut pos_done = vec![false; public.len()];
    let mut out = vec![usize::MAX; candidates.len()];
    for (_, i, j) in pairs {
        if !cand_done[i] && !pos_done[j] {
            cand_done[i] = true;
            pos_done[j] = true;
            out[i] = j;
        }
    }
    // Leftover candidates (more candidates than positions) fall back to
    // plain nearest.
    for (i, slot) in out.iter_mut().enumerate() {
        if *slot == usize::MAX {
            *slot = nearest(&candidates[i], public);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_filters(n: usize, len: usize, sigma: f64, seed: u64) -> Vec<Tensor> {
        let mut rng = derive(seed, "test-filters");
        (0..n)
            .map(|_| {
                Tensor::from_flat(
                    (0..len)
                        .map(|_| {
                            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                            let u2: f64 = rng.gen_range(0.0..1.0);
                            sigma
                                * (-2.0 * u1.ln()).sqrt()
                                * (2.0 * std::f64::consts::PI * u2).cos()
                        })
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn expansion_ratio_shapes_output() {
        let w = random_filters(5, 27, 0.06, 1);
        let obf = obfuscate(&w, 1.2, 0).unwrap();
        assert_eq!(obf.filters.len(), 6); // ceil(1.2 * 5)
        assert!(obfuscate(&w, 1.0, 0).is_err());
    }

    #[test]
    fn same_seed_same_obfuscation() {
        let w = random_filters(4, 18, 0.06, 2);
        let a = obfuscate(&w, 1.5, 9).unwrap();
        let b = obfuscate(&w, 1.5, 9).unwrap();
        assert_eq!(a.filters, b.filters);
    }

    #[test]
    fn defender_deobfuscation_is_exact() {
        let w = random_filters(6, 27, 0.06, 3);
        let obf = obfuscate(&w, 1.4, 4).unwrap();
        let back = obf.deobfuscate();
        for (orig, rec) in w.iter().zip(&back) {
            assert!(orig.linf_distance(rec) < 1e-12);
        }
    }

    #[test]
    fn unmask_recovers_all_true_filters() {
        let w = random_filters(8, 72, 0.06, 5); // var ~ 0.0036
        let obf = obfuscate_with_sigma(&w, 1.25, 0.7, 6).unwrap();
        let cands = attack_unmask(&obf.filters, DEFAULT_VAR_THRESHOLD).unwrap();
        for truth in &w {
            assert!(
                cands.iter().any(|c| c.linf_distance(truth) < 1e-9),
                "true filter missing from candidate set"
            );
        }
    }

    #[test]
    fn all_mask_layer_yields_no_candidates() {
        // Degenerate: publish only raw masks; every pairwise difference
        // keeps mask-level variance, so nothing survives the threshold.
        let masks = random_filters(4, 72, 0.7, 7);
        let cands = attack_unmask(&masks, DEFAULT_VAR_THRESHOLD).unwrap();
        assert!(cands.is_empty());
    }

    #[test]
    fn exact_candidates_score_perfectly_and_order_invariantly() {
        let public = random_filters(5, 27, 0.06, 8);
        let report = attack_recover_positions(&public, &public, &public, AssignMode::Nearest)
            .unwrap();
        assert_eq!(report.position_recovery_rate, 1.0);
        assert_eq!(report.weight_recovery_rate, 1.0);
        let mut shuffled = public.clone();
        shuffled.reverse();
        let r2 = attack_recover_positions(&shuffled, &public, &public, AssignMode::Nearest)
            .unwrap();
        assert_eq!(r2.position_recovery_rate, 1.0);
        assert_eq!(r2.weight_recovery_rate, 1.0);
    }

    #[test]
    fn candidate_precision_degrades_as_mask_variance_shrinks() {
        // Differences that cancel a shared mask are exact at any mask
        // scale, so recovery itself never improves with weak masks; what
        // collapses is the variance filter: mask-contaminated differences
        // flood the candidate set once mask and weight variance merge.
        let w = random_filters(6, 72, 0.06, 10);
        let mut counts = Vec::new();
        for sigma in [0.7, 0.05] {
            let obf = obfuscate_with_sigma(&w, 1.5, sigma, 11).unwrap();
            let cands = attack_unmask(&obf.filters, DEFAULT_VAR_THRESHOLD).unwrap();
            counts.push(cands.len());
        }
        // Strong masks: candidates are (signed) true filters and little else.
        assert!(counts[0] <= 3 * w.len(), "strong-mask candidates: {counts:?}");
        // Weak masks: far more contaminated differences pass the filter.
        assert!(counts[1] > 2 * counts[0], "weak-mask flood missing: {counts:?}");
    }
}
