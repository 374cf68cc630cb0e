//! Deterministic synthetic datasets and the four-way MIA split.
//!
//! Images are class-conditional: a smooth per-class template plus Gaussian
//! noise and a small integer translation jitter, clamped to `[0,1]`. Two
//! distribution ids exist so the "public pre-training" and "private
//! fine-tuning" worlds see different templates.

use crate::error::{Error, Result};
use crate::rng::{derive, derive_seed};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistributionId {
    Public,
    Private,
}

impl DistributionId {
    pub fn label(&self) -> &'static str {
        match self {
            DistributionId::Public => "public",
            DistributionId::Private => "private",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_classes: usize,
    pub seed: u64,
    pub distribution: DistributionId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `[n, c, h, w]`, values in `[0,1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if self.images.shape()[0] != self.labels.len() {
            return Err(Error::shape(
                "dataset image/label count",
                &[self.labels.len()],
                self.images.shape(),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.meta.n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.meta.n_classes
            )));
        }
        Ok(())
    }

    /// Subset by sample indices (order preserved).
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        let per: usize = self.images.sample_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.images.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Ok(Dataset {
            images: Tensor::new(shape, data)?,
            labels,
            meta: self.meta.clone(),
        })
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.meta.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Generation knobs beyond the required arguments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenOptions {
    pub channels: usize,
    pub noise_sigma: f64,
    /// Maximum absolute integer translation per axis.
    pub jitter: usize,
    pub distribution: DistributionId,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            channels: 1,
            noise_sigma: 0.1,
            jitter: 1,
            distribution: DistributionId::Private,
        }
    }
}

fn gaussian(rng: &mut crate::rng::Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Smooth per-class template: a coarse random grid upsampled bilinearly.
pub fn class_template(
    class: usize,
    side: usize,
    channels: usize,
    seed: u64,
    distribution: DistributionId,
) -> Tensor {
    let label = format!("template/{}/{}", distribution.label(), class);
    let mut rng = derive(seed, &label);
    let coarse = (side / 4).max(2);
    let mut out = vec![0.0; channels * side * side];
    for ch in 0..channels {
        let grid: Vec<f64> = (0..coarse * coarse).map(|_| rng.gen_range(0.0..1.0)).collect();
        for i in 0..side {
            for j in 0..side {
                // Bilinear sample of the coarse grid.
                let fi = i as f64 / side as f64 * (coarse - 1) as f64;
                let fj = j as f64 / side as f64 * (coarse - 1) as f64;
                let (i0, j0) = (fi.floor() as usize, fj.floor() as usize);
                let (i1, j1) = ((i0 + 1).min(coarse - 1), (j0 + 1).min(coarse - 1));
                let (di, dj) = (fi - i0 as f64, fj - j0 as f64);
                let v = grid[i0 * coarse + j0] * (1.0 - di) * (1.0 - dj)
                    + grid[i1 * coarse + j0] * di * (1.0 - dj)
                    + grid[i0 * coarse + j1] * (1.0 - di) * dj
                    + grid[i1 * coarse + j1] * di * dj;
                out[(ch * side + i) * side + j] = v;
            }
        }
    }
    Tensor::new(vec![channels, side, side], out).unwrap()
}

pub fn gen_synthetic(
    n_classes: usize,
    n_per_class: usize,
    side: usize,
    seed: u64,
) -> Result<Dataset> {
    gen_synthetic_with(n_classes, n_per_class, side, seed, &GenOptions::default())
}

pub fn gen_synthetic_with(
    n_classes: usize,
    n_per_class: usize,
    side: usize,
    seed: u64,
    opts: &GenOptions,
) -> Result<Dataset> {
    if side < 4 {
        return Err(Error::invalid("side must be at least 4"));
    }
    if n_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be positive"));
    }
    let templates: Vec<Tensor> = (0..n_classes)
        .map(|c| class_template(c, side, opts.channels, seed, opts.distribution))
        .collect();
    let label = format!("samples/{}", opts.distribution.label());
    let mut rng = derive(seed, &label);
    let per = opts.channels * side * side;
    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for class in 0..n_classes {
        let t = templates[class].data();
        for _ in 0..n_per_class {
            let j = opts.jitter as i64;
            let (dx, dy) = if j > 0 {
                (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
            } else {
                (0, 0)
            };
            for ch in 0..opts.channels {
                for i in 0..side {
                    for jj in 0..side {
                        // Clamp-to-edge translation.
                        let si = (i as i64 + dx).clamp(0, side as i64 - 1) as usize;
                        let sj = (jj as i64 + dy).clamp(0, side as i64 - 1) as usize;
                        let mut v = t[(ch * side + si) * side + sj];
                        if opts.noise_sigma > 0.0 {
                            v += opts.noise_sigma * gaussian(&mut rng);
                        }
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(class);
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, opts.channels, side, side], data)?,
        labels,
        meta: DatasetMeta {
            n_classes,
            seed,
            distribution: opts.distribution,
        },
    })
}

/// The four disjoint equal-size splits used by membership inference.
#[derive(Debug, Clone)]
pub struct MiaSplit {
    pub target_train: Dataset,
    pub target_test: Dataset,
    pub shadow_train: Dataset,
    pub shadow_test: Dataset,
    /// Original sample indices per part, for disjointness checks.
    pub indices: [Vec<usize>; 4],
}

pub fn make_mia_split(d: &Dataset, seed: u64) -> Result<MiaSplit> {
    if d.len() < 4 || d.len() % 4 != 0 {
        return Err(Error::invalid(format!(
            "MIA split needs size divisible by 4, got {}",
            d.len()
        )));
    }
    let hist = d.class_histogram();
    if let Some((c, &n)) = hist.iter().enumerate().find(|(_, &n)| n % 4 != 0) {
        return Err(Error::invalid(format!(
            "class {c} has {n} samples, not divisible by 4; stratified split impossible"
        )));
    }
    let mut rng = derive(seed, "mia-split");
    let mut parts: [Vec<usize>; 4] = Default::default();
    for class in 0..d.meta.n_classes {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let q = idx.len() / 4;
        for p in 0..4 {
            parts[p].extend_from_slice(&idx[p * q..(p + 1) * q]);
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok(MiaSplit {
        target_train: d.subset(&parts[0])?,
        target_test: d.subset(&parts[1])?,
        shadow_train: d.subset(&parts[2])?,
        shadow_test: d.subset(&parts[3])?,
        indices: parts,
    })
}

/// Unlabeled query pool for the stealing attacker; labels come from the
/// victim oracle at query time.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub sample_shape: Vec<usize>,
    pub samples: Vec<Vec<f64>>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.samples.is_empty() {
            return Err(Error::invalid("empty query set"));
        }
        let mut shape = vec![self.samples.len()];
        shape.extend_from_slice(&self.sample_shape);
        let data = self.samples.iter().flatten().copied().collect();
        Tensor::new(shape, data)
    }
}

pub fn make_attacker_queryset(d_public: &Dataset, budget: usize, seed: u64) -> Result<QuerySet> {
    if budget > d_public.len() {
        return Err(Error::invalid(format!(
            "query budget {budget} exceeds pool size {}",
            d_public.len()
        )));
    }
    let mut idx: Vec<usize> = (0..d_public.len()).collect();
    let mut rng = derive(seed, "queryset");
    idx.shuffle(&mut rng);
    idx.truncate(budget);
    Ok(QuerySet {
        sample_shape: d_public.images.sample_shape().to_vec(),
        samples: idx
            .into_iter()
            .map(|i| d_public.images.sample(i).to_vec())
            .collect(),
    })
}

/// Stable content hash of a dataset, for sweep cache keys.
pub fn dataset_hash(d: &Dataset) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in d.images.data() {
        h.update(v.to_le_bytes());
    }
    for &l in &d.labels {
        h.update((l as u64).to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Derive a per-purpose seed from a dataset's own seed.
pub fn subseed(d: &Dataset, label: &str) -> u64 {
    derive_seed(d.meta.seed, label)
}
