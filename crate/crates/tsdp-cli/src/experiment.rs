//! Whole-experiment driver behind `tsdp run`: one JSON config in, a full
//! artifact tree (datasets, models, plans, sweeps, reports, logs) out.
//!
//! Re-running with the same config is idempotent: datasets and models are
//! loaded from disk when present, and attack cells come from the cell cache.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tsdp_core::attacks::{AttackConfig, AttackReport, Assumption, SecurityMetric};
use tsdp_core::data::{
    gen_synthetic_with, make_attacker_queryset, make_mia_split, Dataset, DistributionId,
    GenOptions, MiaSplit,
};
use tsdp_core::io;
use tsdp_core::nn::graph::ModelGraph;
use tsdp_core::nn::train::{evaluate_accuracy, train_sgd, TrainConfig};
use tsdp_core::partition::{PartitionPlan, Scheme};
use tsdp_core::rng::derive_seed;
use tsdp_core::sweetspot::{self, SweepInputs, SweepSpec};
use tsdp_core::teeslice::{iterative_prune, HybridModel, PruneConfig, PruneRound};

use crate::{build_model, Arch};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    /// Samples per class; must be divisible by 4 for the membership split.
    pub per_class: usize,
    pub side: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_jitter")]
    pub jitter: usize,
}

fn default_channels() -> usize {
    1
}
fn default_noise() -> f64 {
    0.1
}
fn default_jitter() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Epochs for the attacker's surrogate and shadow models.
    #[serde(default = "default_attack_epochs")]
    pub attack_epochs: usize,
}

fn default_epochs() -> usize {
    20
}
fn default_lr() -> f64 {
    0.05
}
fn default_batch() -> usize {
    32
}
fn default_attack_epochs() -> usize {
    10
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: default_epochs(),
            lr: default_lr(),
            batch_size: default_batch(),
            attack_epochs: default_attack_epochs(),
        }
    }
}

impl TrainSpec {
    fn cfg(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs,
            learning_rate: self.lr,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub scheme: Scheme,
    /// Depths or shield ratios; must be empty for single-point schemes.
    #[serde(default)]
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// `linear`, `cnn` or `cnn-bn`.
    pub arch: String,
    #[serde(default)]
    pub train: TrainSpec,
    /// Empty list = generate datasets and victim only.
    #[serde(default)]
    pub schemes: Vec<SchemeSpec>,
    pub metric: SecurityMetric,
    pub delta: f64,
    #[serde(default)]
    pub absolute: bool,
    pub budget: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn arch(&self) -> Result<Arch> {
        match self.arch.as_str() {
            "linear" => Ok(Arch::Linear),
            "cnn" => Ok(Arch::Cnn),
            "cnn-bn" | "cnn_bn" => Ok(Arch::CnnBn),
            other => bail!("unknown arch {other:?} (expected linear, cnn or cnn-bn)"),
        }
    }

    /// Structural checks mirroring docs/experiment.schema.json.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.classes < 2 {
            bail!("dataset.classes must be at least 2");
        }
        if d.per_class == 0 || d.per_class % 4 != 0 {
            bail!("dataset.per_class must be a positive multiple of 4");
        }
        if d.side < 4 {
            bail!("dataset.side must be at least 4");
        }
        if d.channels == 0 {
            bail!("dataset.channels must be positive");
        }
        self.arch()?;
        if self.train.epochs == 0 || self.train.attack_epochs == 0 {
            bail!("train epochs must be positive");
        }
        if !(self.delta > 0.0) {
            bail!("delta must be positive");
        }
        if self.budget == 0 || self.budget > d.classes * d.per_class {
            bail!(
                "budget must be in 1..={} (the public pool size)",
                d.classes * d.per_class
            );
        }
        if self.seeds.is_empty() {
            bail!("seeds must be non-empty");
        }
        let mut seen = Vec::new();
        for s in &self.schemes {
            if seen.contains(&s.scheme) {
                bail!("scheme {} listed twice", s.scheme.label());
            }
            seen.push(s.scheme);
            // Grid arity is the sweep spec's rule; fail early and by name.
            self.sweep_spec(s).validate().map_err(|e| {
                anyhow::anyhow!("scheme {}: {e}", s.scheme.label())
            })?;
        }
        Ok(())
    }

    fn sweep_spec(&self, s: &SchemeSpec) -> SweepSpec {
        SweepSpec {
            scheme: s.scheme,
            grid: s.grid.clone(),
            metric: self.metric,
            delta: self.delta,
            seeds: self.seeds.clone(),
            absolute: self.absolute,
        }
    }
}

pub struct RunSummary {
    pub attempted: usize,
    pub completed: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub lines: Vec<String>,
    pub out_dir: PathBuf,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        writeln!(
            f,
            "{}/{} sweeps complete; artifacts under {}",
            self.completed.len(),
            self.attempted,
            self.out_dir.display()
        )?;
        for (scheme, err) in &self.failed {
            writeln!(f, "FAILED {scheme}: {err}")?;
        }
        Ok(())
    }
}

fn load_or<T>(
    path: &Path,
    load: impl FnOnce(&Path) -> tsdp_core::Result<T>,
    make: impl FnOnce() -> Result<T>,
    save: impl FnOnce(&T, &Path) -> tsdp_core::Result<()>,
) -> Result<(T, bool)> {
    if path.exists() {
        Ok((load(path).with_context(|| format!("loading {}", path.display()))?, true))
    } else {
        let v = make()?;
        save(&v, path).with_context(|| format!("writing {}", path.display()))?;
        Ok((v, false))
    }
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    cache_override: Option<PathBuf>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let t0 = Instant::now();
    let out = &cfg.out_dir;
    for sub in ["datasets", "models", "plans", "reports", "sweeps", "logs"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    let cache = cache_override.unwrap_or_else(|| out.join("cache"));
    let mut lines: Vec<String> = Vec::new();
    let log = |lines: &mut Vec<String>, s: String| {
        eprintln!("[{:7.1}s] {s}", t0.elapsed().as_secs_f64());
        lines.push(s);
    };

    // Worlds: private task data and the attacker-reachable public pool.
    let d = &cfg.dataset;
    let gen = |dist: DistributionId, label: &str| -> Result<Dataset> {
        let opts = GenOptions {
            channels: d.channels,
            noise_sigma: d.noise_sigma,
            jitter: d.jitter,
            distribution: dist,
        };
        Ok(gen_synthetic_with(
            d.classes,
            d.per_class,
            d.side,
            derive_seed(cfg.seed, label),
            &opts,
        )?)
    };
    let (private, reused) = load_or(
        &out.join("datasets/private.tsds"),
        io::load_dataset,
        || gen(DistributionId::Private, "private-data"),
        io::save_dataset,
    )?;
    log(&mut lines, format!(
        "private dataset: {} samples{}",
        private.len(),
        if reused { " (reused)" } else { "" }
    ));
    let (pool, reused) = load_or(
        &out.join("datasets/public.tsds"),
        io::load_dataset,
        || gen(DistributionId::Public, "public-data"),
        io::save_dataset,
    )?;
    log(&mut lines, format!(
        "public pool: {} samples{}",
        pool.len(),
        if reused { " (reused)" } else { "" }
    ));

    let mia = make_mia_split(&private, derive_seed(cfg.seed, "mia"))?;
    let queries = make_attacker_queryset(&pool, cfg.budget, derive_seed(cfg.seed, "queries"))?;

    // Victim on the members-only quarter; public model on the public world.
    let arch = cfg.arch()?;
    let shape = private.images.sample_shape().to_vec();
    let train_model = |data: &Dataset, label: &str| -> Result<ModelGraph> {
        let m = build_model(arch, &shape, d.classes, derive_seed(cfg.seed, &format!("{label}-init")))?;
        Ok(train_sgd(
            &m,
            data,
            &cfg.train.cfg(cfg.train.epochs, derive_seed(cfg.seed, &format!("{label}-train"))),
        )?)
    };
    let (victim, reused) = load_or(
        &out.join("models/victim.tsdp"),
        io::load_model,
        || train_model(&mia.target_train, "victim"),
        io::save_model,
    )?;
    log(&mut lines, format!(
        "victim: train acc {:.4}, test acc {:.4}{}",
        evaluate_accuracy(&victim, &mia.target_train)?,
        evaluate_accuracy(&victim, &mia.target_test)?,
        if reused { " (reused)" } else { "" }
    ));
    let (public, reused) = load_or(
        &out.join("models/public.tsdp"),
        io::load_model,
        || train_model(&pool, "public"),
        io::save_model,
    )?;
    log(&mut lines, format!(
        "public model: pool acc {:.4}{}",
        evaluate_accuracy(&public, &pool)?,
        if reused { " (reused)" } else { "" }
    ));

    // The slice pipeline runs once, up front, when requested.
    let needs_slices = cfg.schemes.iter().any(|s| s.scheme == Scheme::TeeSlice);
    let sliced = if needs_slices {
        Some(build_slices(cfg, out, &public, &victim, &mia, &mut lines, t0)?)
    } else {
        None
    };

    let attack_cfg = AttackConfig {
        assumption: Assumption::HybridKnown,
        steal_cfg: cfg.train.cfg(cfg.train.attack_epochs, 0),
        shadow_cfg: cfg.train.cfg(cfg.train.attack_epochs, 0),
        deploy_seed: cfg.seed,
        seed: cfg.seed,
    };

    let mut completed = Vec::new();
    let mut failed = Vec::new();
    for s in &cfg.schemes {
        let label = s.scheme.label();
        let spec = cfg.sweep_spec(s);
        let (oracle, ts_plan): (&ModelGraph, Option<&PartitionPlan>) = match &sliced {
            Some((deployed, plan)) if s.scheme == Scheme::TeeSlice => (deployed, Some(plan)),
            _ => (&victim, None),
        };
        let inputs = SweepInputs {
            victim: oracle,
            public: &public,
            mia: &mia,
            queries: &queries,
            attack: attack_cfg.clone(),
            teeslice_plan: ts_plan,
            cache_dir: Some(cache.clone()),
        };
        match run_one_sweep(&spec, &inputs, out, label) {
            Ok(msg) => {
                log(&mut lines, format!("{label}: {msg}"));
                completed.push(label.to_string());
            }
            Err(e) => {
                log(&mut lines, format!("{label}: FAILED: {e:#}"));
                failed.push((label.to_string(), format!("{e:#}")));
            }
        }
    }

    lines.push(format!("elapsed: {:.1}s", t0.elapsed().as_secs_f64()));
    std::fs::write(out.join("logs/run.log"), lines.join("\n") + "\n")?;
    Ok(RunSummary {
        attempted: cfg.schemes.len(),
        completed,
        failed,
        lines,
        out_dir: out.clone(),
    })
}

/// Dense hybrid build, training and pruning; returns the deployable graph
/// and its plan. All artifacts land in the tree and are reused on re-runs.
fn build_slices(
    cfg: &ExperimentConfig,
    out: &Path,
    public: &ModelGraph,
    victim: &ModelGraph,
    mia: &MiaSplit,
    lines: &mut Vec<String>,
    t0: Instant,
) -> Result<(ModelGraph, PartitionPlan)> {
    let hybrid_path = out.join("models/hybrid.tsdp");
    let (hybrid, reused) = load_or(
        &hybrid_path,
        io::load_hybrid,
        || {
            let dense = HybridModel::build_dense(
                public,
                cfg.dataset.classes,
                derive_seed(cfg.seed, "slices"),
            )?;
            let tcfg = cfg
                .train
                .cfg(cfg.train.epochs, derive_seed(cfg.seed, "slice-train"));
            let lambda = tsdp_core::teeslice::DEFAULT_LAMBDA;
            let dense = dense.train_dense(&mia.target_train, &tcfg, lambda)?;
            let acc_vic = evaluate_accuracy(victim, &mia.target_test)?;
            let outcome = iterative_prune(
                &dense,
                &mia.target_train,
                &mia.target_test,
                &PruneConfig::default(),
                acc_vic,
                &tcfg,
                lambda,
            )?;
            let mut csv = String::from(PruneRound::CSV_HEADER);
            for r in &outcome.log {
                csv.push('\n');
                csv.push_str(&r.csv_row());
            }
            csv.push('\n');
            std::fs::write(out.join("logs/teeslice-prune.csv"), csv)?;
            Ok(outcome.model)
        },
        io::save_hybrid,
    )?;
    let (deployed, plan) = hybrid.deploy_plan()?;
    io::save_model(&deployed, &out.join("models/teeslice-victim.tsdp"))?;
    io::save_json(&plan, &out.join("plans/teeslice.json"))?;
    let msg = format!(
        "slice pipeline: {} slices, acc {:.4}{}",
        hybrid.slices.len(),
        hybrid.accuracy(&mia.target_test)?,
        if reused { " (reused)" } else { "" }
    );
    eprintln!("[{:7.1}s] {msg}", t0.elapsed().as_secs_f64());
    lines.push(msg);
    Ok((deployed, plan))
}

fn run_one_sweep(
    spec: &SweepSpec,
    inputs: &SweepInputs,
    out: &Path,
    label: &str,
) -> Result<String> {
    let result = sweetspot::sweep(spec, inputs)?;
    io::save_json(&result, &out.join(format!("sweeps/{label}.json")))?;
    let fr = sweetspot::frontier(&result)?;
    std::fs::write(out.join(format!("sweeps/{label}-frontier.csv")), fr.csv())?;
    let mut csv = String::from(AttackReport::CSV_HEADER);
    for cell in &result.cells {
        for r in &cell.reports {
            csv.push('\n');
            csv.push_str(&r.csv_row());
        }
    }
    csv.push('\n');
    std::fs::write(out.join(format!("reports/{label}.csv")), csv)?;
    Ok(match result.chosen_cell() {
        Some(c) => {
            io::save_json(c, &out.join(format!("plans/{label}-chosen.json")))?;
            format!(
                "sweet spot {} (security {:.4} vs black {:.4}, pct_flops_tee {:.4})",
                c.config.label(),
                c.security,
                result.security_black,
                c.utility
            )
        }
        None => format!(
            "no config meets delta {} over black-box {:.4}",
            result.delta, result.security_black
        ),
    })
}
