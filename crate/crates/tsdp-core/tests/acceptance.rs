//! Acceptance gate: eight criteria, each printed as one pass/fail line.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use rand::Rng as _;

use tsdp_core::attacks::{run_attack, AttackConfig, AttackReport, Assumption};
use tsdp_core::data::{gen_synthetic_with, make_attacker_queryset, make_mia_split, Dataset,
    DistributionId, GenOptions, MiaSplit, QuerySet};
use tsdp_core::flops::{flops_of_layer, utility_of_plan};
use tsdp_core::nn::adversarial::pgd_attack;
use tsdp_core::nn::engine::{backward_sample, ce_loss_and_grad, forward_sample};
use tsdp_core::nn::graph::{LayerKind, ModelBuilder, ModelGraph, OutputMode};
use tsdp_core::nn::train::{evaluate_accuracy, train_sgd, TrainConfig};
use tsdp_core::offload::{
    otp_decrypt_linear, otp_encrypt, quantize_including_zero, Challenge, Executor,
    ExecutorConfig, FieldParams, OtpPad, Protocol, freivalds_verify, sample_challenge,
};
use tsdp_core::partition::{self, PartitionPlan, Scheme};
use tsdp_core::rng::{derive, derive_seed, Rng};
use tsdp_core::shadownet;
use tsdp_core::sweetspot::{brute_force_choice, sweep, SweepInputs, SweepSpec};
use tsdp_core::teeslice::{iterative_prune, HybridModel, PruneConfig};
use tsdp_core::Tensor;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "{} criterion {n} ({name}): {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn gauss(rng: &mut Rng, sigma: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_otp_exactness() {
    let fp = FieldParams::default(); // p = 2^31 - 1
    let mut rng = derive(1, "acc-otp");

    // 1,000 random (layer, input, pad) triples: decrypting the masked
    // linear image must equal the plaintext linear image, exactly.
    let mut triples = 0usize;
    for t in 0..1000u64 {
        let rows = rng.gen_range(1..5usize);
        let inner = rng.gen_range(1..9usize);
        let w: Vec<u64> = (0..rows * inner).map(|_| rng.gen_range(0..256u64)).collect();
        let x = Tensor::from_flat((0..inner).map(|_| rng.gen_range(0.0..1.0)).collect());
        let q = quantize_including_zero(&x).unwrap();
        let mut pad = OtpPad::generate(t, inner, &fp, &mut rng);
        let g_r = fp.matmul(&w, pad.mask(), rows, inner, 1);
        let enc = otp_encrypt(&q, &mut pad, &fp).unwrap();
        let g_enc = fp.matmul(&w, &enc.values, rows, inner, 1);
        let dec = otp_decrypt_linear(&g_enc, &g_r, &fp).unwrap();
        let plain = fp.matmul(&w, &q.values, rows, inner, 1);
        assert_eq!(dec, plain, "triple {t} not exact");
        triples += 1;
    }

    // Masked vs plain-on-quantized execution is bit-identical end to end.
    let model = ModelBuilder::new(vec![1, 4, 4], 3)
        .conv(1, 3, 3, 1, 1)
        .relu()
        .linear(3 * 16, 2)
        .build(OutputMode::Logits)
        .unwrap();
    let plan = partition::plan_deep(&model, 1).unwrap();
    let d = gen_synthetic_with(2, 4, 4, 9, &GenOptions::default()).unwrap();
    let run = |protocol: Protocol| {
        let cfg = ExecutorConfig {
            protocol,
            seed: 5,
            ..Default::default()
        };
        Executor::new(&model, &plan, cfg)
            .unwrap()
            .forward(&d.images)
            .unwrap()
    };
    let masked = run(Protocol::Masked);
    let quantized = run(Protocol::PlainQuantized);
    let identical = masked
        .data()
        .iter()
        .zip(quantized.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(
        1,
        "OTP exactness",
        triples == 1000 && identical,
        &format!("{triples}/1000 triples exact; masked == plain-on-quantized bitwise: {identical}"),
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_freivalds() {
    let fp = FieldParams::default();
    let mut rng = derive(2, "acc-freivalds");
    let (rows, inner, cols) = (3, 5, 2);

    // Completeness: 10^4 correct products, all accepted.
    let mut complete = 0usize;
    for _ in 0..10_000 {
        let w: Vec<u64> = (0..rows * inner).map(|_| rng.gen_range(0..fp.p)).collect();
        let h: Vec<u64> = (0..inner * cols).map(|_| rng.gen_range(0..fp.p)).collect();
        let c = fp.matmul(&w, &h, rows, inner, cols);
        let ch = sample_challenge(&w, rows, inner, &fp, &mut rng);
        if freivalds_verify(&h, &c, &[ch], cols, &fp).unwrap() {
            complete += 1;
        }
    }

    // Soundness: 10^4 single-entry corruptions, one round, zero accepts.
    let mut false_accepts = 0usize;
    for _ in 0..10_000 {
        let w: Vec<u64> = (0..rows * inner).map(|_| rng.gen_range(0..fp.p)).collect();
        let h: Vec<u64> = (0..inner * cols).map(|_| rng.gen_range(0..fp.p)).collect();
        let mut c = fp.matmul(&w, &h, rows, inner, cols);
        let idx = rng.gen_range(0..c.len());
        c[idx] = (c[idx] + rng.gen_range(1..fp.p)) % fp.p;
        let ch = sample_challenge(&w, rows, inner, &fp, &mut rng);
        if freivalds_verify(&h, &c, &[ch], cols, &fp).unwrap() {
            false_accepts += 1;
        }
    }

    // Exhaustive small field: p=5, 2-dim output, every challenge vector;
    // every non-zero corruption accepts exactly 1/5 of the challenges.
    let fp5 = FieldParams::new(5).unwrap();
    let w5: Vec<u64> = vec![1, 2, 3, 4];
    let h5: Vec<u64> = vec![2, 3];
    let truth = fp5.matmul(&w5, &h5, 2, 2, 1);
    let mut exact_fifth = true;
    for corrupt_idx in 0..2 {
        for delta in 1..5u64 {
            let mut claimed = truth.clone();
            claimed[corrupt_idx] = (claimed[corrupt_idx] + delta) % 5;
            let mut accepts = 0usize;
            for s0 in 0..5u64 {
                for s1 in 0..5u64 {
                    let s_tilde = vec![
                        (fp5.mul(s0, w5[0]) + fp5.mul(s1, w5[2])) % 5,
                        (fp5.mul(s0, w5[1]) + fp5.mul(s1, w5[3])) % 5,
                    ];
                    let ch = Challenge { s: vec![s0, s1], s_tilde };
                    if freivalds_verify(&h5, &claimed, &[ch], 1, &fp5).unwrap() {
                        accepts += 1;
                    }
                }
            }
            exact_fifth &= accepts == 5;
        }
    }

    verdict(
        2,
        "Freivalds verification",
        complete == 10_000 && false_accepts == 0 && exact_fifth,
        &format!(
            "completeness {complete}/10000; false accepts {false_accepts}/10000; \
             exhaustive p=5 acceptance exactly 1/5: {exact_fifth}"
        ),
    );
}

// ---------------------------------------------------------------- criterion 3

/// Independent oracle: simulate the layer with explicit loops, counting one
/// FLOP per multiply and one per add, exactly as the cost model defines
/// (multiply-accumulate = 2; per-channel affine = 2 per element).
fn instrumented_flops(kind: &LayerKind, in_shape: &[usize]) -> (u64, Vec<usize>) {
    let mut count = 0u64;
    match *kind {
        LayerKind::Linear { c_in, c_out } => {
            for _o in 0..c_out {
                for _i in 0..c_in {
                    count += 2; // mul + add into the accumulator
                }
            }
            (count, vec![c_out])
        }
        LayerKind::BatchNorm { c } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            for _ in 0..c * h * w {
                count += 2; // scale, shift
            }
            (count, in_shape.to_vec())
        }
        LayerKind::Conv2d {
            c_in,
            c_out,
            k,
            stride,
            pad,
        } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            for _o in 0..c_out * oh * ow {
                for _tap in 0..c_in * k * k {
                    count += 2;
                }
            }
            (count, vec![c_out, oh, ow])
        }
        _ => (0, in_shape.to_vec()),
    }
}

#[test]
fn criterion_3_flops_oracle() {
    let mut rng = derive(3, "acc-flops");
    let mut matched = 0usize;
    for _ in 0..50 {
        let (kind, in_shape) = match rng.gen_range(0..3u8) {
            0 => {
                let c_in = rng.gen_range(1..40usize);
                let c_out = rng.gen_range(1..40usize);
                (LayerKind::Linear { c_in, c_out }, vec![c_in])
            }
            1 => {
                let c = rng.gen_range(1..8usize);
                let s = rng.gen_range(1..9usize);
                (LayerKind::BatchNorm { c }, vec![c, s, s])
            }
            _ => {
                let c_in = rng.gen_range(1..5usize);
                let c_out = rng.gen_range(1..7usize);
                let k = rng.gen_range(1..4usize);
                let side = rng.gen_range(k..k + 8);
                let kind = LayerKind::Conv2d {
                    c_in,
                    c_out,
                    k,
                    stride: 1,
                    pad: rng.gen_range(0..2usize),
                };
                (kind, vec![c_in, side, side])
            }
        };
        let (want, out_shape) = instrumented_flops(&kind, &in_shape);
        if flops_of_layer(&kind, &out_shape).unwrap() == want {
            matched += 1;
        }
    }

    // %FLOPs grows with the shielded set, under both a depth grid and the
    // magnitude ratio grid.
    let model = ModelBuilder::new(vec![1, 6, 6], 1)
        .conv(1, 3, 3, 1, 1)
        .relu()
        .conv(3, 3, 3, 1, 1)
        .relu()
        .linear(3 * 36, 3)
        .build(OutputMode::Logits)
        .unwrap();
    let mut monotone = true;
    let mut last = -1.0;
    for n in 0..=model.layers.len() {
        let pct = utility_of_plan(&model, &partition::plan_deep(&model, n).unwrap())
            .unwrap()
            .pct_flops_tee;
        monotone &= pct >= last;
        last = pct;
    }
    last = -1.0;
    for r in partition::MAG_RATIO_GRID.iter().copied() {
        let pct = utility_of_plan(&model, &partition::plan_magnitude(&model, r).unwrap())
            .unwrap()
            .pct_flops_tee;
        monotone &= pct >= last;
        last = pct;
    }

    verdict(
        3,
        "FLOPs oracle equivalence",
        matched == 50 && monotone,
        &format!("{matched}/50 shapes match the instrumented counter; %FLOPs monotone: {monotone}"),
    );
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_shadownet_reproduction() {
    let n_filters = 8;
    let dim = 72; // 3x3x8 conv filters
    let mut all_weights_recovered = true;
    let mut position_sum = 0.0;
    for seed in 0..100u64 {
        let mut rng = derive(seed, "acc-shadownet");
        // Public layer: weight var ~= 0.0036 <= 0.005.
        let public: Vec<Tensor> = (0..n_filters)
            .map(|_| Tensor::from_flat((0..dim).map(|_| gauss(&mut rng, 0.06)).collect()))
            .collect();
        // Victim: fine-tuned copy, noise sigma 0.01.
        let victim: Vec<Tensor> = public
            .iter()
            .map(|f| {
                Tensor::from_flat(f.data().iter().map(|&v| v + gauss(&mut rng, 0.01)).collect())
            })
            .collect();
        // r = 1.2, mask var 0.5625 >= 0.5, threshold 0.01.
        let obf = shadownet::obfuscate_with_sigma(&victim, 1.2, 0.75, seed).unwrap();
        let candidates = shadownet::attack_unmask(&obf.filters, 0.01).unwrap();
        let rep = shadownet::attack_recover_positions(
            &candidates,
            &public,
            &victim,
            shadownet::AssignMode::Nearest,
        )
        .unwrap();
        all_weights_recovered &= rep.weight_recovery_rate == 1.0;
        position_sum += rep.position_recovery_rate;
    }
    let mean_position = position_sum / 100.0;
    verdict(
        4,
        "deobfuscation attack reproduction",
        all_weights_recovered && mean_position >= 0.95,
        &format!(
            "weight recovery 100% on all layers: {all_weights_recovered}; \
             mean position recovery {mean_position:.4} (need >= 0.95)"
        ),
    );
}

// ---------------------------------------------------------------- criterion 5

fn easy_blobs(seed: u64, per_class: usize) -> Dataset {
    let opts = GenOptions {
        noise_sigma: 0.05,
        jitter: 0,
        channels: 1,
        distribution: DistributionId::Private,
    };
    gen_synthetic_with(2, per_class, 4, seed, &opts).unwrap()
}

fn conv4(seed: u64) -> ModelGraph {
    // 8 channels: wide enough for the hybrid's adapters to fit the 1/18
    // FLOPs budget with a non-empty bottleneck.
    ModelBuilder::new(vec![1, 4, 4], seed)
        .conv(1, 8, 3, 1, 1)
        .relu()
        .conv(8, 8, 3, 1, 1)
        .relu()
        .linear(8 * 16, 2)
        .build(OutputMode::Logits)
        .unwrap()
}

#[test]
fn criterion_5_slice_pipeline_contract() {
    let delta = 0.01;
    let mut all_ok = true;
    let mut details = Vec::new();
    for seed in 0..5u64 {
        let private = easy_blobs(derive_seed(seed, "acc5-data"), 64);
        let split = make_mia_split(&private, derive_seed(seed, "acc5-split")).unwrap();
        let (train, eval) = (&split.target_train, &split.target_test);
        let public_pool = easy_blobs(derive_seed(seed, "acc5-pub"), 16);
        let tcfg = TrainConfig {
            epochs: 60,
            seed: derive_seed(seed, "acc5-cfg"),
            ..Default::default()
        };
        let hcfg = TrainConfig {
            epochs: 120, // adapters train through a frozen backbone; give them room
            ..tcfg.clone()
        };
        let backbone = train_sgd(&conv4(derive_seed(seed, "acc5-bb")), &public_pool, &tcfg).unwrap();
        let victim = train_sgd(&conv4(derive_seed(seed, "acc5-vic")), train, &tcfg).unwrap();
        let acc_vic = evaluate_accuracy(&victim, eval).unwrap();

        let dense = HybridModel::build_dense(&backbone, 2, derive_seed(seed, "acc5-slices"))
            .unwrap()
            .train_dense(train, &hcfg, 0.1)
            .unwrap();
        let outcome =
            iterative_prune(&dense, train, eval, &PruneConfig::default(), acc_vic, &hcfg, 0.1)
                .unwrap();

        let acc = outcome.model.accuracy(eval).unwrap();
        let target = (1.0 - delta) * acc_vic;
        let acc_ok = !outcome.failed && acc + 1e-12 >= target;
        let slices_monotone = outcome
            .log
            .windows(2)
            .all(|w| w[1].slices_remaining <= w[0].slices_remaining);
        let backbone_intact = outcome.model.backbone_checksum() == dense.backbone_checksum()
            && outcome.model.features.param_checksum() == dense.features.param_checksum();
        all_ok &= acc_ok && slices_monotone && backbone_intact;
        details.push(format!(
            "s{seed}: acc {acc:.3} vs target {target:.3}, slices {} -> {}",
            dense.slices.len(),
            outcome.model.slices.len()
        ));
    }
    verdict(
        5,
        "partition-before-training contract",
        all_ok,
        &details.join("; "),
    );
}

// ---------------------------------------------------------------- criterion 6

struct ToyWorld {
    victim: ModelGraph,
    public: ModelGraph,
    mia: MiaSplit,
    queries: QuerySet,
    /// Assembled slice deployment: oracle graph and its plan.
    ts_victim: ModelGraph,
    ts_plan: PartitionPlan,
}

fn toy_world() -> ToyWorld {
    let opts = GenOptions {
        noise_sigma: 0.05,
        jitter: 0,
        channels: 1,
        distribution: DistributionId::Private,
    };
    let private = gen_synthetic_with(2, 100, 4, 71, &opts).unwrap();
    let pub_opts = GenOptions {
        distribution: DistributionId::Public,
        ..opts
    };
    let pool = gen_synthetic_with(2, 100, 4, 72, &pub_opts).unwrap();
    let mia = make_mia_split(&private, 73).unwrap();
    let queries = make_attacker_queryset(&pool, 200, 74).unwrap();
    let tcfg = TrainConfig {
        epochs: 40,
        seed: 75,
        ..Default::default()
    };
    let victim = train_sgd(&conv4(76), &mia.target_train, &tcfg).unwrap();
    let public = train_sgd(&conv4(77), &pool, &tcfg).unwrap();

    let dense = HybridModel::build_dense(&public, 2, 78)
        .unwrap()
        .train_dense(&mia.target_train, &tcfg, 0.1)
        .unwrap();
    let acc_vic = evaluate_accuracy(&victim, &mia.target_test).unwrap();
    let pruned = iterative_prune(
        &dense,
        &mia.target_train,
        &mia.target_test,
        &PruneConfig::default(),
        acc_vic,
        &tcfg,
        0.1,
    )
    .unwrap()
    .model;
    let (ts_victim, ts_plan) = pruned.deploy_plan().unwrap();
    ToyWorld {
        victim,
        public,
        mia,
        queries,
        ts_victim,
        ts_plan,
    }
}

fn attack_cfg(seed: u64) -> AttackConfig {
    AttackConfig {
        assumption: Assumption::HybridKnown,
        steal_cfg: TrainConfig {
            epochs: 30,
            learning_rate: 0.02, // blinded-weight inits diverge at the default rate
            ..Default::default()
        },
        shadow_cfg: TrainConfig {
            epochs: 30,
            ..Default::default()
        },
        deploy_seed: seed,
        seed,
    }
}

#[test]
fn criterion_6_attack_ordering() {
    let w = toy_world();
    let seeds: Vec<u64> = (0..5).collect();
    let mean = |reports: &[AttackReport], f: fn(&AttackReport) -> f64| {
        reports.iter().map(f).sum::<f64>() / reports.len() as f64
    };
    let run_scheme = |plan_of: &dyn Fn(u64) -> PartitionPlan| -> Vec<AttackReport> {
        seeds
            .iter()
            .map(|&s| {
                run_attack(&w.victim, &w.public, &plan_of(s), &w.mia, &w.queries, &attack_cfg(s))
                    .unwrap()
            })
            .collect()
    };

    let noshield = run_scheme(&|_| partition::plan_noshield(&w.victim));
    let black = run_scheme(&|_| partition::plan_blackbox(&w.victim));
    // The five schemes at their paper-default configurations.
    let defaults: Vec<(&str, Vec<AttackReport>)> = vec![
        ("deep@1", run_scheme(&|_| partition::plan_deep(&w.victim, 1).unwrap())),
        ("shallow@4", run_scheme(&|_| partition::plan_shallow(&w.victim, 4).unwrap())),
        (
            "magnitude@0.01",
            run_scheme(&|_| partition::plan_magnitude(&w.victim, 0.01).unwrap()),
        ),
        (
            "soter@0.2",
            run_scheme(&|s| partition::plan_intermediate(&w.victim, 0.2, s, None).unwrap()),
        ),
        ("obfuscated", run_scheme(&|_| partition::plan_nonlinear_obf(&w.victim))),
    ];
    let teeslice: Vec<AttackReport> = seeds
        .iter()
        .map(|&s| {
            run_attack(&w.ts_victim, &w.public, &w.ts_plan, &w.mia, &w.queries, &attack_cfg(s))
                .unwrap()
        })
        .collect();

    let ns_ms = mean(&noshield, |r| r.ms_accuracy);
    let bb_ms = mean(&black, |r| r.ms_accuracy);
    let ts_ms = mean(&teeslice, |r| r.ms_accuracy);
    let mut ordering_ok = true;
    let mut parts = vec![format!("noshield {ns_ms:.3}, blackbox {bb_ms:.3}")];
    for (name, reports) in &defaults {
        let ms = mean(reports, |r| r.ms_accuracy);
        let ok = ns_ms + 1e-9 >= ms && ms + 1e-9 >= bb_ms - 0.03;
        ordering_ok &= ok;
        parts.push(format!("{name} {ms:.3}{}", if ok { "" } else { "!" }));
    }
    let ts_ok = (ts_ms - bb_ms).abs() <= 0.03 + 1e-9;
    let ts_mia = mean(&teeslice, |r| r.conf_mia_acc);
    let bb_mia = mean(&black, |r| r.conf_mia_acc);
    let mia_ok = (ts_mia - 0.5).abs() <= 0.03 + 1e-9 && (bb_mia - 0.5).abs() <= 0.03 + 1e-9;
    parts.push(format!(
        "teeslice ms {ts_ms:.3}; conf-MIA teeslice {ts_mia:.3} / blackbox {bb_mia:.3}"
    ));
    verdict(
        6,
        "attack ordering",
        ordering_ok && ts_ok && mia_ok,
        &parts.join("; "),
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_sweet_spot_correctness() {
    let w = toy_world();
    fn inputs<'a>(
        w: &'a ToyWorld,
        victim: &'a ModelGraph,
        ts: Option<&'a PartitionPlan>,
    ) -> SweepInputs<'a> {
        SweepInputs {
            victim,
            public: &w.public,
            mia: &w.mia,
            queries: &w.queries,
            attack: attack_cfg(0),
            teeslice_plan: ts,
            cache_dir: None,
        }
    }
    let spec = |scheme: Scheme, grid: Vec<f64>, delta: f64| SweepSpec {
        scheme,
        grid,
        metric: tsdp_core::attacks::SecurityMetric::MsAccuracy,
        delta,
        seeds: vec![0, 1],
        absolute: false,
    };

    let toy_sweeps = vec![
        spec(Scheme::Deep, vec![0.0, 1.0, 2.0, 5.0], 0.05),
        spec(Scheme::Magnitude, vec![0.0, 0.5, 1.0], 0.05),
        spec(Scheme::Intermediate, vec![0.0, 0.2, 1.0], 0.05),
        spec(Scheme::NonLinearObf, vec![], 0.05),
        spec(Scheme::Deep, vec![0.0, 1.0, 2.0, 5.0], 1.1), // everything satisfies
    ];
    let mut agree = true;
    for s in &toy_sweeps {
        let result = sweep(s, &inputs(&w, &w.victim, None)).unwrap();
        agree &= result.chosen == brute_force_choice(&result);
    }

    let ts_spec = spec(Scheme::TeeSlice, vec![], 0.05);
    let ts_result = sweep(&ts_spec, &inputs(&w, &w.ts_victim, Some(&w.ts_plan))).unwrap();
    agree &= ts_result.chosen == brute_force_choice(&ts_result);
    let (ts_ok, ts_pct) = match ts_result.chosen_cell() {
        Some(c) => (c.utility < 0.15, c.utility),
        None => (false, f64::NAN),
    };
    verdict(
        7,
        "sweet-spot correctness",
        agree && ts_ok,
        &format!(
            "chosen == brute force on all {} sweeps: {agree}; \
             slice-scheme point pct_flops_tee {ts_pct:.4} (< 0.15) at delta 5pts: {ts_ok}",
            toy_sweeps.len() + 1
        ),
    );
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_numerical_hygiene() {
    // Backward vs central finite differences, all layer kinds, rtol 1e-4.
    let model = ModelBuilder::new(vec![1, 4, 4], 8)
        .conv(1, 3, 3, 1, 1)
        .batchnorm(3)
        .relu()
        .alpha_gate()
        .conv(3, 3, 3, 1, 1)
        .residual_from(3)
        .avgpool(2, 2)
        .linear(3 * 4, 2)
        .build(OutputMode::Logits)
        .unwrap();
    let d = easy_blobs(21, 2);
    let xs: Vec<Vec<f64>> = (0..3).map(|i| d.images.sample(i).to_vec()).collect();
    let ys = d.labels[..3].to_vec();
    let shapes = model.infer_shapes().unwrap();
    let loss = |m: &ModelGraph| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(x, &y)| {
                let c = forward_sample(m, &shapes, x);
                ce_loss_and_grad(c.outputs.last().unwrap(), y).0
            })
            .sum::<f64>()
    };
    let mut grads: Vec<Vec<Tensor>> = model
        .layers
        .iter()
        .map(|l| l.weights.iter().map(|w| Tensor::zeros(w.shape())).collect())
        .collect();
    for (x, &y) in xs.iter().zip(&ys) {
        let cache = forward_sample(&model, &shapes, x);
        let (_, d_out) = ce_loss_and_grad(cache.outputs.last().unwrap(), y);
        let (g, _) = backward_sample(&model, &shapes, &cache, x, &d_out);
        for (gl, nl) in grads.iter_mut().zip(g.0) {
            for (gt, nt) in gl.iter_mut().zip(nl) {
                for (a, b) in gt.data_mut().iter_mut().zip(nt.data()) {
                    *a += b;
                }
            }
        }
    }
    let h = 1e-5;
    let mut grad_ok = true;
    let mut worst = 0.0f64;
    for (lid, layer) in model.layers.iter().enumerate() {
        for (wid, w) in layer.weights.iter().enumerate() {
            let step = (w.len() / 6).max(1);
            for idx in (0..w.len()).step_by(step) {
                let mut plus = model.clone();
                plus.layers[lid].weights[wid].data_mut()[idx] += h;
                let mut minus = model.clone();
                minus.layers[lid].weights[wid].data_mut()[idx] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = grads[lid][wid].data()[idx];
                let err = (analytic - numeric).abs();
                let tol = 1e-8 + 1e-4 * numeric.abs().max(analytic.abs());
                grad_ok &= err <= tol;
                worst = worst.max(if tol > 0.0 { err / tol } else { 0.0 });
            }
        }
    }

    // PGD respects the L-infinity ball exactly.
    let trained = train_sgd(
        &conv4(5),
        &d,
        &TrainConfig {
            epochs: 10,
            ..Default::default()
        },
    )
    .unwrap();
    let full: Vec<usize> = (0..d.len()).collect();
    let x = d.subset(&full).unwrap().images;
    let adv = pgd_attack(&trained, &x, &d.labels, 0.03, 7).unwrap();
    let max_dev = adv.linf_distance(&x);
    let ball_ok = max_dev <= 0.03 + 1e-12;

    verdict(
        8,
        "numerical hygiene",
        grad_ok && ball_ok,
        &format!(
            "gradcheck worst err/tol {worst:.3}: {grad_ok}; PGD max deviation {max_dev:.6} <= 0.03: {ball_ok}"
        ),
    );
}
