//! Sweet-spot search: sweep a scheme's configuration grid, score every
//! cell with the attack harness, and pick the cheapest configuration whose
//! security stays within `delta` of the black-box baseline.

use crate::attacks::{run_attack, AttackConfig, AttackReport, SecurityMetric};
use crate::data::{dataset_hash, MiaSplit, QuerySet};
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::graph::ModelGraph;
use crate::partition::{self, PartitionPlan, PlanConfig, Scheme};
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// A sweep definition; this is the JSON file the CLI consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub scheme: Scheme,
    /// Grid points: depths for the depth schemes (rounded), shield ratios
    /// for the ratio schemes. Single-point schemes ignore it.
    #[serde(default)]
    pub grid: Vec<f64>,
    pub metric: SecurityMetric,
    pub delta: f64,
    pub seeds: Vec<u64>,
    /// Use the two-sided |security - black| < delta constraint instead of
    /// the one-sided default.
    #[serde(default)]
    pub absolute: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.delta <= 0.0 {
            return Err(Error::invalid("delta must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed required"));
        }
        if self.grid.is_empty() && !self.single_point() {
            return Err(Error::invalid(format!(
                "scheme {} needs a non-empty grid",
                self.scheme.label()
            )));
        }
        Ok(())
    }

    fn single_point(&self) -> bool {
        matches!(
            self.scheme,
            Scheme::NonLinearObf
                | Scheme::Ennclave
                | Scheme::TeeSlice
                | Scheme::NoShield
                | Scheme::BlackBox
        )
    }
}

/// Everything a sweep needs besides its spec.
pub struct SweepInputs<'a> {
    /// The deployed victim graph (assembled hybrid for the slice scheme).
    pub victim: &'a ModelGraph,
    pub public: &'a ModelGraph,
    pub mia: &'a MiaSplit,
    pub queries: &'a QuerySet,
    /// Template attack knobs; the per-cell seed overrides `seed`.
    pub attack: AttackConfig,
    /// Slice-scheme deployment plan (required iff scheme is TeeSlice).
    pub teeslice_plan: Option<&'a PartitionPlan>,
    /// Cell cache directory; sweeps resume from it after interruption.
    pub cache_dir: Option<PathBuf>,
}

/// One grid cell after seed-averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub config: PlanConfig,
    /// Seed-mean of the governing security metric.
    pub security: f64,
    /// Seed-mean pct_flops_tee.
    pub utility: f64,
    /// Raw per-seed reports, in seed order.
    pub reports: Vec<AttackReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub scheme: Scheme,
    pub metric: SecurityMetric,
    pub delta: f64,
    pub absolute: bool,
    /// Black-box baseline security (same metric, same seeds).
    pub security_black: f64,
    pub cells: Vec<SweepCell>,
    /// Index into `cells` of the Eq.-1 choice, if any cell satisfies the
    /// constraint.
    pub chosen: Option<usize>,
}

impl SweepResult {
    pub fn chosen_cell(&self) -> Option<&SweepCell> {
        self.chosen.map(|i| &self.cells[i])
    }

    fn satisfies(&self, cell: &SweepCell) -> bool {
        let diff = cell.security - self.security_black;
        if self.absolute {
            diff.abs() < self.delta
        } else {
            diff < self.delta
        }
    }
}

/// Build the plan (and, for backbone substitution, the deployed composite
/// graph) for one grid point.
fn build_cell(
    spec: &SweepSpec,
    inputs: &SweepInputs,
    point: Option<f64>,
    cell_seed: u64,
) -> Result<(PartitionPlan, Option<ModelGraph>)> {
    let victim = inputs.victim;
    match spec.scheme {
        Scheme::Deep => Ok((
            partition::plan_deep(victim, point.unwrap().round() as usize)?,
            None,
        )),
        Scheme::Shallow => Ok((
            partition::plan_shallow(victim, point.unwrap().round() as usize)?,
            None,
        )),
        Scheme::Magnitude => Ok((partition::plan_magnitude(victim, point.unwrap())?, None)),
        Scheme::Intermediate => Ok((
            partition::plan_intermediate(victim, point.unwrap(), cell_seed, None)?,
            None,
        )),
        Scheme::NonLinearObf => Ok((partition::plan_nonlinear_obf(victim), None)),
        Scheme::NoShield => Ok((partition::plan_noshield(victim), None)),
        Scheme::BlackBox => Ok((partition::plan_blackbox(victim), None)),
        Scheme::Ennclave => {
            let (plan, composite) = partition::plan_ennclave(victim, inputs.public)?;
            Ok((plan, Some(composite)))
        }
        Scheme::TeeSlice => {
            let plan = inputs
                .teeslice_plan
                .ok_or_else(|| Error::invalid("TeeSlice sweep needs its deployment plan"))?;
            Ok((plan.clone(), None))
        }
    }
}

fn short_hex(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable identity of the sweep's inputs, for cache keys.
fn input_fingerprint(inputs: &SweepInputs) -> String {
    let d = dataset_hash(&inputs.mia.target_train)
        ^ dataset_hash(&inputs.mia.target_test).rotate_left(16)
        ^ dataset_hash(&inputs.mia.shadow_train).rotate_left(32)
        ^ dataset_hash(&inputs.mia.shadow_test).rotate_left(48);
    format!(
        "{}-{}-{d:016x}-q{}",
        short_hex(&inputs.victim.param_checksum()),
        short_hex(&inputs.public.param_checksum()),
        inputs.queries.len()
    )
}

fn cache_path(dir: &Path, scheme: Scheme, config: &PlanConfig, fp: &str, seed: u64) -> PathBuf {
    let cfg = config.label().replace(['/', '\\'], "_");
    dir.join(format!("{}-{cfg}-{fp}-s{seed}.json", scheme.label()))
}

fn run_cell_seed(
    spec: &SweepSpec,
    inputs: &SweepInputs,
    point: Option<f64>,
    seed: u64,
    fp: &str,
) -> Result<AttackReport> {
    let cell_seed = derive_seed(seed, "sweep-cell");
    let (plan, composite) = build_cell(spec, inputs, point, cell_seed)?;
    let path = inputs
        .cache_dir
        .as_ref()
        .map(|d| cache_path(d, spec.scheme, &plan.config, fp, seed));
    if let Some(p) = &path {
        if let Ok(bytes) = std::fs::read(p) {
            if let Ok(report) = serde_json::from_slice::<AttackReport>(&bytes) {
                return Ok(report);
            }
        }
    }
    let victim = composite.as_ref().unwrap_or(inputs.victim);
    let mut cfg = inputs.attack.clone();
    cfg.seed = seed;
    let report = run_attack(victim, inputs.public, &plan, inputs.mia, inputs.queries, &cfg)?;
    if let Some(p) = &path {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(p, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Evaluate every (grid point, seed) cell — in parallel — and apply Eq. 1.
pub fn sweep(spec: &SweepSpec, inputs: &SweepInputs) -> Result<SweepResult> {
    spec.validate()?;
    let fp = input_fingerprint(inputs);
    let points: Vec<Option<f64>> = if spec.single_point() {
        vec![None]
    } else {
        spec.grid.iter().copied().map(Some).collect()
    };
    // Flattened (point, seed) jobs, plus the black-box baseline per seed.
    let n_seeds = spec.seeds.len();
    let jobs: Vec<(Option<Option<f64>>, u64)> = points
        .iter()
        .map(|p| Some(*p))
        .chain(std::iter::once(None)) // black-box baseline marker
        .flat_map(|p| spec.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let black_spec = SweepSpec {
        scheme: Scheme::BlackBox,
        grid: Vec::new(),
        ..spec.clone()
    };
    let reports: Vec<Result<AttackReport>> = exec::map_indexed(jobs.len(), |j| {
        let (point, seed) = &jobs[j];
        match point {
            Some(p) => run_cell_seed(spec, inputs, *p, *seed, &fp),
            None => run_cell_seed(&black_spec, inputs, None, *seed, &fp),
        }
    });
    let mut reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let black_reports: Vec<AttackReport> = reports.split_off(points.len() * n_seeds);
    let security_black = mean(black_reports.iter().map(|r| r.metric(spec.metric)), n_seeds);
    let mut cells = Vec::with_capacity(points.len());
    for chunk in reports.chunks(n_seeds) {
        cells.push(SweepCell {
            config: chunk[0].config.clone(),
            security: mean(chunk.iter().map(|r| r.metric(spec.metric)), n_seeds),
            utility: mean(chunk.iter().map(|r| r.utility.pct_flops_tee), n_seeds),
            reports: chunk.to_vec(),
        });
    }
    let mut result = SweepResult {
        scheme: spec.scheme,
        metric: spec.metric,
        delta: spec.delta,
        absolute: spec.absolute,
        security_black,
        cells,
        chosen: None,
    };
    // Eq. 1: minimal utility among satisfying cells; strict `<` keeps the
    // earliest grid index on ties.
    let mut best: Option<(usize, f64)> = None;
    for (i, cell) in result.cells.iter().enumerate() {
        if result.satisfies(cell) && best.map_or(true, |(_, u)| cell.utility < u) {
            best = Some((i, cell.utility));
        }
    }
    result.chosen = best.map(|(i, _)| i);
    Ok(result)
}

/// Independent re-scan of the finished cell table; the sweep's own choice
/// must always agree with this oracle.
pub fn brute_force_choice(r: &SweepResult) -> Option<usize> {
    let satisfying: Vec<usize> = (0..r.cells.len())
        .filter(|&i| {
            let diff = r.cells[i].security - r.security_black;
            if r.absolute {
                diff.abs() < r.delta
            } else {
                diff < r.delta
            }
        })
        .collect();
    let min_u = satisfying
        .iter()
        .map(|&i| r.cells[i].utility)
        .fold(f64::INFINITY, f64::min);
    satisfying.into_iter().find(|&i| r.cells[i].utility == min_u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub utility: f64,
    pub security: f64,
    pub config: PlanConfig,
}

/// Security-vs-utility curve with the horizontal baselines as metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    /// Strictly increasing in utility; equal-utility cells merged by
    /// averaging their security.
    pub points: Vec<FrontierPoint>,
    pub blackbox_security: f64,
    /// Security of the fully-offloaded cell, when the grid contains one.
    pub noshield_security: Option<f64>,
}

impl Frontier {
    pub const CSV_HEADER: &'static str = "pct_flops_tee,security,config";

    pub fn csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        for p in &self.points {
            out.push_str(&format!(
                "\n{:.6},{:.6},{}",
                p.utility,
                p.security,
                p.config.label()
            ));
        }
        out.push('\n');
        out
    }
}

pub fn frontier(r: &SweepResult) -> Result<Frontier> {
    if r.cells.is_empty() {
        return Err(Error::invalid("sweep has no cells"));
    }
    let mut order: Vec<usize> = (0..r.cells.len()).collect();
    order.sort_by(|&a, &b| {
        r.cells[a]
            .utility
            .partial_cmp(&r.cells[b].utility)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut points: Vec<FrontierPoint> = Vec::new();
    let mut run = 1usize;
    for &i in &order {
        let c = &r.cells[i];
        match points.last_mut() {
            Some(last) if (last.utility - c.utility).abs() < 1e-12 => {
                // Merge duplicate-utility cells (running mean of security).
                run += 1;
                last.security += (c.security - last.security) / run as f64;
            }
            _ => {
                run = 1;
                points.push(FrontierPoint {
                    utility: c.utility,
                    security: c.security,
                    config: c.config.clone(),
                });
            }
        }
    }
    let noshield_security = r
        .cells
        .iter()
        .find(|c| c.utility == 0.0)
        .map(|c| c.security);
    Ok(Frontier {
        points,
        blackbox_security: r.security_black,
        noshield_security,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Assumption;
    use crate::data::{
        gen_synthetic_with, make_attacker_queryset, make_mia_split, Dataset, DistributionId,
        GenOptions,
    };
    use crate::nn::graph::{ModelBuilder, ModelGraph, OutputMode};
    use crate::nn::train::{train_sgd, TrainConfig};

    fn blobs(seed: u64, n_per_class: usize, dist: DistributionId) -> Dataset {
        let opts = GenOptions {
            noise_sigma: 0.15,
            jitter: 0,
            channels: 1,
            distribution: dist,
        };
        gen_synthetic_with(2, n_per_class, 4, seed, &opts).unwrap()
    }

    fn conv_net(seed: u64) -> ModelGraph {
        ModelBuilder::new(vec![1, 4, 4], seed)
            .conv(1, 3, 3, 1, 1)
            .relu()
            .linear(3 * 4 * 4, 2)
            .build(OutputMode::Logits)
            .unwrap()
    }

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            ..Default::default()
        }
    }

    struct Fixture {
        victim: ModelGraph,
        public: ModelGraph,
        mia: crate::data::MiaSplit,
        queries: crate::data::QuerySet,
    }

    fn fixture() -> Fixture {
        let d = blobs(3, 20, DistributionId::Private); // 80 -> 20 per split
        let mia = make_mia_split(&d, 1).unwrap();
        let victim = train_sgd(&conv_net(1), &mia.target_train, &quick_cfg(8, 0)).unwrap();
        let public = conv_net(2);
        let pool = blobs(5, 30, DistributionId::Public);
        let queries = make_attacker_queryset(&pool, 30, 1).unwrap();
        Fixture {
            victim,
            public,
            mia,
            queries,
        }
    }

    fn inputs<'a>(f: &'a Fixture, cache: Option<PathBuf>) -> SweepInputs<'a> {
        SweepInputs {
            victim: &f.victim,
            public: &f.public,
            mia: &f.mia,
            queries: &f.queries,
            attack: AttackConfig {
                assumption: Assumption::HybridKnown,
                steal_cfg: quick_cfg(4, 0),
                shadow_cfg: quick_cfg(4, 0),
                deploy_seed: 0,
                seed: 0,
            },
            teeslice_plan: None,
            cache_dir: cache,
        }
    }

    fn deep_spec(delta: f64) -> SweepSpec {
        SweepSpec {
            scheme: Scheme::Deep,
            grid: vec![0.0, 1.0, 3.0],
            metric: SecurityMetric::MsAccuracy,
            delta,
            seeds: vec![0, 1],
            absolute: false,
        }
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        let mut s = deep_spec(0.05);
        s.delta = 0.0;
        assert!(s.validate().is_err());
        let mut s = deep_spec(0.05);
        s.seeds.clear();
        assert!(s.validate().is_err());
        let mut s = deep_spec(0.05);
        s.grid.clear();
        assert!(s.validate().is_err());
        // Single-point schemes accept an empty grid.
        s.scheme = Scheme::NoShield;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn vacuous_delta_picks_the_cheapest_cell() {
        let f = fixture();
        let r = sweep(&deep_spec(1.0), &inputs(&f, None)).unwrap();
        assert_eq!(r.cells.len(), 3);
        // Depth 0 offloads everything: zero TEE utility, and no other cell
        // can be cheaper.
        let chosen = r.chosen.expect("vacuous constraint must choose");
        assert_eq!(r.cells[chosen].utility, 0.0);
        assert_eq!(chosen, brute_force_choice(&r).unwrap());
    }

    #[test]
    fn tiny_delta_keeps_only_blackbox_equivalents() {
        let f = fixture();
        let mut spec = deep_spec(1e-9);
        // Depth 3 shields the whole net = the black-box cell; it matches
        // the baseline exactly (same seeds, same surrogate path).
        let r = sweep(&spec, &inputs(&f, None)).unwrap();
        match r.chosen {
            Some(i) => assert!((r.cells[i].security - r.security_black) < 1e-9),
            None => {}
        }
        assert_eq!(r.chosen, brute_force_choice(&r));
        // Two-sided option behaves the same way here.
        spec.absolute = true;
        let r2 = sweep(&spec, &inputs(&f, None)).unwrap();
        assert_eq!(r2.chosen, brute_force_choice(&r2));
    }

    #[test]
    fn chosen_always_matches_the_brute_force_oracle() {
        let f = fixture();
        for delta in [0.02, 0.1, 0.5, 1.0] {
            let r = sweep(&deep_spec(delta), &inputs(&f, None)).unwrap();
            assert_eq!(r.chosen, brute_force_choice(&r), "delta {delta}");
            if let Some(i) = r.chosen {
                for c in r.cells.iter().filter(|c| r.satisfies(c)) {
                    assert!(r.cells[i].utility <= c.utility);
                }
            }
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let f = fixture();
        let a = sweep(&deep_spec(0.1), &inputs(&f, None)).unwrap();
        let b = sweep(&deep_spec(0.1), &inputs(&f, None)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cache_round_trip_is_idempotent() {
        let f = fixture();
        let dir = std::env::temp_dir().join(format!("tsdp-sweep-cache-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let spec = deep_spec(0.1);
        let a = sweep(&spec, &inputs(&f, Some(dir.clone()))).unwrap();
        let n_files = std::fs::read_dir(&dir).unwrap().count();
        // 3 grid cells x 2 seeds + 2 black-box baseline cells.
        assert_eq!(n_files, 8);
        let b = sweep(&spec, &inputs(&f, Some(dir.clone()))).unwrap();
        assert_eq!(a, b);
        assert_eq!(std::fs::read_dir(&dir).unwrap().count(), n_files);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn frontier_is_sorted_merged_and_carries_baselines() {
        let f = fixture();
        let spec = SweepSpec {
            scheme: Scheme::Magnitude,
            grid: vec![0.0, 0.3, 0.3, 1.0],
            metric: SecurityMetric::Fidelity,
            delta: 0.5,
            seeds: vec![0],
            absolute: false,
        };
        let r = sweep(&spec, &inputs(&f, None)).unwrap();
        let fr = frontier(&r).unwrap();
        // Duplicate 0.3 cells merge: 3 distinct utilities remain.
        assert_eq!(fr.points.len(), 3);
        assert!(fr
            .points
            .windows(2)
            .all(|w| w[0].utility < w[1].utility));
        assert_eq!(fr.noshield_security, Some(r.cells[0].security));
        assert_eq!(fr.blackbox_security, r.security_black);
        let csv = fr.csv();
        assert!(csv.starts_with(Frontier::CSV_HEADER));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn single_point_scheme_yields_one_cell() {
        let f = fixture();
        let spec = SweepSpec {
            scheme: Scheme::NonLinearObf,
            grid: Vec::new(),
            metric: SecurityMetric::MsAccuracy,
            delta: 0.5,
            seeds: vec![0],
            absolute: false,
        };
        let r = sweep(&spec, &inputs(&f, None)).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.cells[0].config, PlanConfig::None);
    }

    #[test]
    fn teeslice_sweep_requires_its_plan() {
        let f = fixture();
        let spec = SweepSpec {
            scheme: Scheme::TeeSlice,
            grid: Vec::new(),
            metric: SecurityMetric::MsAccuracy,
            delta: 0.5,
            seeds: vec![0],
            absolute: false,
        };
        assert!(sweep(&spec, &inputs(&f, None)).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = deep_spec(0.05);
        let json = serde_json::to_string(&spec).unwrap();
        let back: SweepSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
        // Defaults: absolute and grid may be omitted in hand-written files.
        let s: SweepSpec = serde_json::from_str(
            r#"{"scheme":"NoShield","metric":"MsAccuracy","delta":0.1,"seeds":[0]}"#,
        )
        .unwrap();
        assert!(!s.absolute);
        assert!(s.grid.is_empty());
    }
}
