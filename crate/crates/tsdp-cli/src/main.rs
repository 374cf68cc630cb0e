//! `tsdp` — experiment orchestration for the TSDP lab: dataset generation,
//! training, partitioning, attacks, the slice pipeline, sweeps and reports.

mod experiment;
mod table;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

use tsdp_core::attacks::{run_attack, AttackConfig, AttackReport, Assumption, SecurityMetric};
use tsdp_core::data::{
    gen_synthetic_with, make_attacker_queryset, make_mia_split, DistributionId, GenOptions,
};
use tsdp_core::io;
use tsdp_core::nn::engine::forward;
use tsdp_core::nn::graph::{ModelBuilder, ModelGraph, OutputMode};
use tsdp_core::nn::train::{evaluate_accuracy, train_sgd, TrainConfig};
use tsdp_core::offload::{Executor, ExecutorConfig, Fault, Protocol};
use tsdp_core::partition::{self, PartitionPlan, Scheme};
use tsdp_core::rng::{derive, derive_seed};
use tsdp_core::shadownet;
use tsdp_core::sweetspot::{self, SweepInputs, SweepSpec};
use tsdp_core::teeslice::{iterative_prune, HybridModel, PruneConfig, PruneRound};
use tsdp_core::Tensor;

/// Environment variable overriding every cache directory choice.
pub const CACHE_ENV: &str = "TSDP_CACHE_DIR";

#[derive(Parser)]
#[command(name = "tsdp", version, about = "Desk-scale TSDP laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (.tsds).
    Datagen(DatagenArgs),
    /// Train a model on a dataset and save it (.tsdp + .json sidecar).
    Train(TrainArgs),
    /// Build a partition plan for a trained model.
    Partition(PartitionArgs),
    /// Run one attack cell and emit its report.
    Attack(AttackArgs),
    /// Partition-before-training pipeline: dense slices, training, pruning.
    Teeslice(TeesliceArgs),
    /// Sweep a configuration grid and find the sweet spot.
    Sweep(SweepArgs),
    /// Render the schemes-by-metrics matrix from report/sweep files.
    Report(ReportArgs),
    /// Standalone weight-deobfuscation attack on one layer.
    ShadownetAttack(ShadownetArgs),
    /// Run the two-world executor and emit its verification log.
    OffloadDemo(OffloadArgs),
    /// Drive a whole experiment from a JSON config.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Deep,
    Shallow,
    Magnitude,
    Intermediate,
    NonlinearObf,
    Ennclave,
    Teeslice,
    Noshield,
    Blackbox,
}

impl SchemeArg {
    fn to_scheme(self) -> Scheme {
        match self {
            SchemeArg::Deep => Scheme::Deep,
            SchemeArg::Shallow => Scheme::Shallow,
            SchemeArg::Magnitude => Scheme::Magnitude,
            SchemeArg::Intermediate => Scheme::Intermediate,
            SchemeArg::NonlinearObf => Scheme::NonLinearObf,
            SchemeArg::Ennclave => Scheme::Ennclave,
            SchemeArg::Teeslice => Scheme::TeeSlice,
            SchemeArg::Noshield => Scheme::NoShield,
            SchemeArg::Blackbox => Scheme::BlackBox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    MsAccuracy,
    Fidelity,
    Asr,
    ConfMia,
    GradMia,
}

impl MetricArg {
    fn to_metric(self) -> SecurityMetric {
        match self {
            MetricArg::MsAccuracy => SecurityMetric::MsAccuracy,
            MetricArg::Fidelity => SecurityMetric::Fidelity,
            MetricArg::Asr => SecurityMetric::Asr,
            MetricArg::ConfMia => SecurityMetric::ConfMia,
            MetricArg::GradMia => SecurityMetric::GradMia,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Plain,
    Quantized,
    Masked,
}

impl ProtocolArg {
    fn to_protocol(self) -> Protocol {
        match self {
            ProtocolArg::Plain => Protocol::Plain,
            ProtocolArg::Quantized => Protocol::PlainQuantized,
            ProtocolArg::Masked => Protocol::Masked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AssumptionArg {
    HybridKnown,
    BackboneOnly,
    VictimKnown,
}

impl AssumptionArg {
    fn to_assumption(self) -> Assumption {
        match self {
            AssumptionArg::HybridKnown => Assumption::HybridKnown,
            AssumptionArg::BackboneOnly => Assumption::BackboneOnly,
            AssumptionArg::VictimKnown => Assumption::VictimKnown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    /// Single linear layer over the flattened input.
    Linear,
    /// Two 3x3 conv/ReLU stages and a linear head.
    Cnn,
    /// As `cnn` with batchnorm after each conv.
    CnnBn,
}

/// Shared architecture factory (also used by `run`).
pub fn build_model(
    arch: Arch,
    sample_shape: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    if sample_shape.len() != 3 {
        bail!("expected [c, h, w] samples, got {sample_shape:?}");
    }
    let (c, h, w) = (sample_shape[0], sample_shape[1], sample_shape[2]);
    let b = ModelBuilder::new(sample_shape.to_vec(), seed);
    let g = match arch {
        Arch::Linear => b.linear(c * h * w, n_classes),
        Arch::Cnn => b
            .conv(c, 8, 3, 1, 1)
            .relu()
            .conv(8, 8, 3, 1, 1)
            .relu()
            .linear(8 * h * w, n_classes),
        Arch::CnnBn => b
            .conv(c, 8, 3, 1, 1)
            .batchnorm(8)
            .relu()
            .conv(8, 8, 3, 1, 1)
            .batchnorm(8)
            .relu()
            .linear(8 * h * w, n_classes),
    };
    Ok(g.build(OutputMode::Logits)?)
}

#[derive(Args, Clone)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
}

impl TrainOpts {
    fn to_cfg(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Template family: public (pre-training world) or private.
    #[arg(long, value_enum, default_value_t = DistArg::Private)]
    distribution: DistArg,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 1)]
    jitter: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistArg {
    Public,
    Private,
}

impl DistArg {
    fn to_dist(self) -> DistributionId {
        match self {
            DistArg::Public => DistributionId::Public,
            DistArg::Private => DistributionId::Private,
        }
    }
}

fn cmd_datagen(a: DatagenArgs) -> Result<()> {
    let opts = GenOptions {
        channels: a.channels,
        noise_sigma: a.noise_sigma,
        jitter: a.jitter,
        distribution: a.distribution.to_dist(),
    };
    let d = gen_synthetic_with(a.classes, a.per_class, a.side, a.seed, &opts)?;
    io::save_dataset(&d, &a.out)?;
    println!(
        "wrote {} ({} samples, {} classes, {}x{}, {:?})",
        a.out.display(),
        d.len(),
        a.classes,
        a.side,
        a.side,
        opts.distribution
    );
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Arch::Cnn)]
    arch: Arch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    train: TrainOpts,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let d = io::load_dataset(&a.data)?;
    let model = build_model(
        a.arch,
        d.images.sample_shape(),
        d.meta.n_classes,
        derive_seed(a.seed, "model-init"),
    )?;
    let trained = train_sgd(&model, &d, &a.train.to_cfg(derive_seed(a.seed, "train")))?;
    let acc = evaluate_accuracy(&trained, &d)?;
    io::save_model(&trained, &a.out)?;
    println!("wrote {} (train accuracy {acc:.4})", a.out.display());
    Ok(())
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    /// Depth (deep/shallow) or shield ratio (magnitude/intermediate).
    #[arg(long)]
    config: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Public backbone (backbone-substitution scheme only).
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Where the substituted composite model goes (backbone-substitution).
    #[arg(long)]
    composite_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_partition(a: PartitionArgs) -> Result<()> {
    let model = io::load_model(&a.model)?;
    let need = |c: Option<f64>| c.context("this scheme requires --config");
    let (plan, graph) = match a.scheme.to_scheme() {
        Scheme::Deep => (partition::plan_deep(&model, need(a.config)? as usize)?, model),
        Scheme::Shallow => (
            partition::plan_shallow(&model, need(a.config)? as usize)?,
            model,
        ),
        Scheme::Magnitude => (partition::plan_magnitude(&model, need(a.config)?)?, model),
        Scheme::Intermediate => (
            partition::plan_intermediate(&model, need(a.config)?, a.seed, None)?,
            model,
        ),
        Scheme::NonLinearObf => (partition::plan_nonlinear_obf(&model), model),
        Scheme::NoShield => (partition::plan_noshield(&model), model),
        Scheme::BlackBox => (partition::plan_blackbox(&model), model),
        Scheme::Ennclave => {
            let bb = io::load_model(
                a.backbone
                    .as_ref()
                    .context("backbone substitution requires --backbone")?,
            )?;
            let (plan, composite) = partition::plan_ennclave(&model, &bb)?;
            let out = a
                .composite_out
                .clone()
                .unwrap_or_else(|| a.out.with_extension("composite.tsdp"));
            io::save_model(&composite, &out)?;
            println!("wrote composite model {}", out.display());
            (plan, composite)
        }
        Scheme::TeeSlice => {
            bail!("slice plans come from the `teeslice` subcommand, not `partition`")
        }
    };
    let cost = tsdp_core::flops::utility_of_plan(&graph, &plan)?;
    io::save_json(&plan, &a.out)?;
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {}", a.out.display());
    println!("{}", tsdp_core::flops::CostReport::CSV_HEADER);
    println!(
        "{}",
        cost.csv_row(plan.scheme.label(), &plan.config.label())
    );
    Ok(())
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    victim: PathBuf,
    #[arg(long)]
    public: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Private-world dataset (.tsds) for the membership split.
    #[arg(long)]
    data: PathBuf,
    /// Public-world dataset (.tsds) the attacker draws queries from.
    #[arg(long)]
    pool: PathBuf,
    /// Query budget.
    #[arg(long, default_value_t = 100)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AssumptionArg::HybridKnown)]
    assumption: AssumptionArg,
    #[arg(long, default_value_t = 10)]
    steal_epochs: usize,
    #[arg(long, default_value_t = 10)]
    shadow_epochs: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also append a CSV row here (header written on creation).
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    let victim = io::load_model(&a.victim)?;
    let public = io::load_model(&a.public)?;
    let plan: PartitionPlan = io::load_json(&a.plan)?;
    let data = io::load_dataset(&a.data)?;
    let pool = io::load_dataset(&a.pool)?;
    let mia = make_mia_split(&data, derive_seed(a.seed, "mia"))?;
    let queries = make_attacker_queryset(&pool, a.budget, derive_seed(a.seed, "queries"))?;
    let cfg = AttackConfig {
        assumption: a.assumption.to_assumption(),
        steal_cfg: TrainConfig {
            epochs: a.steal_epochs,
            ..Default::default()
        },
        shadow_cfg: TrainConfig {
            epochs: a.shadow_epochs,
            ..Default::default()
        },
        deploy_seed: a.seed,
        seed: a.seed,
    };
    let report = run_attack(&victim, &public, &plan, &mia, &queries, &cfg)?;
    io::save_json(&report, &a.out)?;
    if let Some(csv) = &a.csv {
        append_csv_row(csv, AttackReport::CSV_HEADER, &report.csv_row())?;
    }
    println!("wrote {}", a.out.display());
    println!(
        "scheme={} config={} ms={:.4} fidelity={:.4} asr={:.4} conf_mia={:.4} grad_mia={:.4}",
        report.scheme.label(),
        report.config.label(),
        report.ms_accuracy,
        report.fidelity,
        report.asr,
        report.conf_mia_acc,
        report.grad_mia_acc
    );
    Ok(())
}

fn append_csv_row(path: &PathBuf, header: &str, row: &str) -> Result<()> {
    use std::io::Write as _;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{row}")?;
    Ok(())
}

#[derive(Args)]
struct TeesliceArgs {
    /// Public backbone model.
    #[arg(long)]
    backbone: PathBuf,
    /// Private-world dataset; quartered like the attack split, trained on
    /// the first quarter and evaluated on the second.
    #[arg(long)]
    data: PathBuf,
    /// Victim model fixing the accuracy target; defaults to the trained
    /// dense hybrid itself.
    #[arg(long)]
    victim: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = tsdp_core::teeslice::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    #[arg(long, default_value_t = 2)]
    prune_n: usize,
    #[command(flatten)]
    train: TrainOpts,
    /// Hybrid container output.
    #[arg(long)]
    out: PathBuf,
    /// Assembled deployable graph output.
    #[arg(long)]
    model_out: PathBuf,
    /// Deployment plan output.
    #[arg(long)]
    plan_out: PathBuf,
    /// Pruning log CSV output.
    #[arg(long)]
    log_out: PathBuf,
}

fn cmd_teeslice(a: TeesliceArgs) -> Result<()> {
    let backbone = io::load_model(&a.backbone)?;
    let data = io::load_dataset(&a.data)?;
    let mia = make_mia_split(&data, derive_seed(a.seed, "mia"))?;
    let (train_set, eval_set) = (&mia.target_train, &mia.target_test);
    let dense = HybridModel::build_dense(
        &backbone,
        data.meta.n_classes,
        derive_seed(a.seed, "slices"),
    )?;
    let tcfg = a.train.to_cfg(derive_seed(a.seed, "slice-train"));
    let dense = dense.train_dense(train_set, &tcfg, a.lambda)?;
    let acc_vic = match &a.victim {
        Some(p) => evaluate_accuracy(&io::load_model(p)?, eval_set)?,
        None => dense.accuracy(eval_set)?,
    };
    let pc = PruneConfig {
        delta: a.delta,
        n: a.prune_n,
        rounds: a.rounds,
        ..Default::default()
    };
    let outcome = iterative_prune(&dense, train_set, eval_set, &pc, acc_vic, &tcfg, a.lambda)?;
    let mut log_csv = String::from(PruneRound::CSV_HEADER);
    for r in &outcome.log {
        log_csv.push('\n');
        log_csv.push_str(&r.csv_row());
    }
    log_csv.push('\n');
    if let Some(parent) = a.log_out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.log_out, log_csv)?;
    io::save_hybrid(&outcome.model, &a.out)?;
    let (deployed, plan) = outcome.model.deploy_plan()?;
    io::save_model(&deployed, &a.model_out)?;
    io::save_json(&plan, &a.plan_out)?;
    let cost = tsdp_core::flops::utility_of_plan(&deployed, &plan)?;
    let acc = outcome.model.accuracy(eval_set)?;
    println!(
        "wrote {} / {} / {} / {}",
        a.out.display(),
        a.model_out.display(),
        a.plan_out.display(),
        a.log_out.display()
    );
    println!(
        "slices={} acc={acc:.4} target={:.4} pct_flops_tee={:.4}{}",
        outcome.model.slices.len(),
        (1.0 - a.delta) * acc_vic,
        cost.pct_flops_tee,
        if outcome.failed {
            " (pruning failed; dense model kept)"
        } else {
            ""
        }
    );
    Ok(())
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep definition JSON (scheme, grid, metric, delta, seeds).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    victim: PathBuf,
    #[arg(long)]
    public: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = 100)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hybrid container (slice-scheme sweeps only).
    #[arg(long)]
    hybrid: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    steal_epochs: usize,
    #[arg(long, default_value_t = 10)]
    shadow_epochs: usize,
    /// Override the spec's governing metric.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Override the spec's security budget.
    #[arg(long)]
    delta: Option<f64>,
    /// Cell cache directory (TSDP_CACHE_DIR overrides).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory for the result JSON and frontier CSV.
    #[arg(long)]
    out: PathBuf,
}

fn cache_dir(flag: Option<PathBuf>) -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).or(flag)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut spec: SweepSpec = io::load_json(&a.spec)?;
    if let Some(m) = a.metric {
        spec.metric = m.to_metric();
    }
    if let Some(d) = a.delta {
        spec.delta = d;
    }
    let public = io::load_model(&a.public)?;
    let data = io::load_dataset(&a.data)?;
    let pool = io::load_dataset(&a.pool)?;
    let mia = make_mia_split(&data, derive_seed(a.seed, "mia"))?;
    let queries = make_attacker_queryset(&pool, a.budget, derive_seed(a.seed, "queries"))?;
    // Slice sweeps run against the assembled hybrid and its deploy plan.
    let (victim, ts_plan) = if spec.scheme == Scheme::TeeSlice {
        let h = io::load_hybrid(
            a.hybrid
                .as_ref()
                .context("slice-scheme sweeps require --hybrid")?,
        )?;
        let (deployed, plan) = h.deploy_plan()?;
        (deployed, Some(plan))
    } else {
        (io::load_model(&a.victim)?, None)
    };
    let inputs = SweepInputs {
        victim: &victim,
        public: &public,
        mia: &mia,
        queries: &queries,
        attack: AttackConfig {
            assumption: Assumption::HybridKnown,
            steal_cfg: TrainConfig {
                epochs: a.steal_epochs,
                ..Default::default()
            },
            shadow_cfg: TrainConfig {
                epochs: a.shadow_epochs,
                ..Default::default()
            },
            deploy_seed: a.seed,
            seed: a.seed,
        },
        teeslice_plan: ts_plan.as_ref(),
        cache_dir: cache_dir(a.cache),
    };
    let result = sweetspot::sweep(&spec, &inputs)?;
    let label = spec.scheme.label();
    std::fs::create_dir_all(&a.out)?;
    let result_path = a.out.join(format!("{label}.json"));
    io::save_json(&result, &result_path)?;
    let fr = sweetspot::frontier(&result)?;
    let frontier_path = a.out.join(format!("{label}-frontier.csv"));
    std::fs::write(&frontier_path, fr.csv())?;
    println!("wrote {} and {}", result_path.display(), frontier_path.display());
    match result.chosen_cell() {
        Some(c) => println!(
            "sweet spot: config={} security={:.4} (black {:.4}, delta {}) pct_flops_tee={:.4}",
            c.config.label(),
            c.security,
            result.security_black,
            result.delta,
            c.utility
        ),
        None => println!(
            "no configuration meets delta {} over black-box {:.4}",
            result.delta, result.security_black
        ),
    }
    Ok(())
}

#[derive(Args)]
struct ReportArgs {
    /// AttackReport or SweepResult JSON files.
    #[arg(long, required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// Optional CSV copy of the rendered matrix.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut reports: Vec<AttackReport> = Vec::new();
    for p in &a.reports {
        reports.extend(table::load_reports(p)?);
    }
    if reports.is_empty() {
        bail!("no attack reports found in the given files");
    }
    let rendered = table::render_matrix(&reports);
    println!("{}", rendered.text);
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, &rendered.csv)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

#[derive(Args)]
struct ShadownetArgs {
    #[arg(long)]
    model: PathBuf,
    /// Layer to obfuscate (defaults to the first conv/linear layer).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = shadownet::DEFAULT_EXPANSION)]
    expansion: f64,
    /// Pair-difference variance threshold; defaults to a tenth of the
    /// published layer's pooled variance.
    #[arg(long)]
    threshold: Option<f64>,
    /// Fine-tune perturbation applied to the published weights to form the
    /// hidden victim layer.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_shadownet(a: ShadownetArgs) -> Result<()> {
    use rand::Rng as _;
    let model = io::load_model(&a.model)?;
    let id = match a.layer {
        Some(id) => id,
        None => *model
            .weighted_layers()
            .iter()
            .find(|&&id| model.layers[id].kind.is_linear_op())
            .context("model has no conv/linear layer")?,
    };
    let layer = model
        .layers
        .get(id)
        .with_context(|| format!("layer {id} out of range"))?;
    if !layer.kind.is_linear_op() {
        bail!("layer {id} ({}) is not a conv/linear layer", layer.kind.name());
    }
    let w = &layer.weights[0];
    let rows = w.shape()[0];
    let inner = w.len() / rows;
    let public: Vec<Tensor> = (0..rows)
        .map(|i| Tensor::from_flat(w.data()[i * inner..(i + 1) * inner].to_vec()))
        .collect();
    // Victim = public + fine-tune noise; the attacker sees only the
    // obfuscated victim filters.
    let mut rng = derive(a.seed, "shadownet-finetune");
    let victim: Vec<Tensor> = public
        .iter()
        .map(|f| {
            let noise: Vec<f64> = (0..f.len())
                .map(|_| a.noise * rng.gen_range(-1.0..1.0))
                .collect();
            f.zip(&Tensor::new(f.shape().to_vec(), noise)?, |v, n| v + n)
        })
        .collect::<tsdp_core::Result<Vec<Tensor>>>()?;
    let obf = shadownet::obfuscate(&victim, a.expansion, derive_seed(a.seed, "obf"))?;
    let threshold = a.threshold.unwrap_or_else(|| {
        let all: Vec<f64> = obf
            .filters
            .iter()
            .flat_map(|f| f.data().iter().copied())
            .collect();
        Tensor::from_flat(all).variance() / 10.0
    });
    let candidates = shadownet::attack_unmask(&obf.filters, threshold)?;
    let report = shadownet::attack_recover_positions(
        &candidates,
        &public,
        &victim,
        shadownet::AssignMode::Nearest,
    )?;
    io::save_json(&report, &a.out)?;
    println!("wrote {}", a.out.display());
    println!(
        "layer={id} filters={rows} candidates={} weight_recovery={:.4} position_recovery={:.4}",
        candidates.len(),
        report.weight_recovery_rate,
        report.position_recovery_rate
    );
    Ok(())
}

#[derive(Args)]
struct OffloadArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Masked)]
    protocol: ProtocolArg,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inject a fault as layer:index:delta to watch verification fail.
    #[arg(long)]
    fault: Option<String>,
    /// Verification log output (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

fn parse_fault(s: &str) -> Result<Fault> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        bail!("--fault expects layer:index:delta");
    }
    Ok(Fault {
        layer: parts[0].parse()?,
        index: parts[1].parse()?,
        delta: parts[2].parse()?,
    })
}

fn cmd_offload(a: OffloadArgs) -> Result<()> {
    let model = io::load_model(&a.model)?;
    let plan: PartitionPlan = io::load_json(&a.plan)?;
    let data = io::load_dataset(&a.data)?;
    let n = a.samples.min(data.len());
    let x = data.subset(&(0..n).collect::<Vec<_>>())?.images;
    let cfg = ExecutorConfig {
        protocol: a.protocol.to_protocol(),
        seed: a.seed,
        ..Default::default()
    };
    let mut ex = Executor::new(&model, &plan, cfg)?;
    let fault = a.fault.as_deref().map(parse_fault).transpose()?;
    ex.set_fault(fault);
    let run = ex.forward(&x);
    let log = ex.verify_log().to_vec();
    if let Some(parent) = a.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.out, io::to_jsonl(&log)?)?;
    println!("wrote {} ({} verification records)", a.out.display(), log.len());
    match run {
        Ok(y) => {
            let reference = forward(&model, &x)?;
            println!(
                "{} samples ok; pads minted {}; max |masked - float| = {:.3e}",
                n,
                ex.pads_generated(),
                y.linf_distance(&reference)
            );
            Ok(())
        }
        Err(e) if fault.is_some() => {
            println!("verification caught the injected fault: {e}");
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration JSON (see docs/experiment.schema.json).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Cell cache directory (TSDP_CACHE_DIR overrides).
    #[arg(long)]
    cache: Option<PathBuf>,
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg: experiment::ExperimentConfig = io::load_json(&a.config)?;
    if let Some(out) = a.out_dir {
        cfg.out_dir = out;
    }
    let summary = experiment::run_experiment(&cfg, cache_dir(a.cache))?;
    print!("{summary}");
    if summary.failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow!(
            "{} of {} scheme cells failed",
            summary.failed.len(),
            summary.attempted
        ))
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Datagen(a) => cmd_datagen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Partition(a) => cmd_partition(a),
        Cmd::Attack(a) => cmd_attack(a),
        Cmd::Teeslice(a) => cmd_teeslice(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::ShadownetAttack(a) => cmd_shadownet(a),
        Cmd::OffloadDemo(a) => cmd_offload(a),
        Cmd::Run(a) => cmd_run(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
