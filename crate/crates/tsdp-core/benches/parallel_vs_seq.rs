//! Parallel vs sequential execution of the two hot paths: batched forward
//! passes and independent attack-style cells. Run with and without the
//! default `parallel` feature to compare both backends of `map_indexed`;
//! `map_indexed_seq` is benchmarked alongside as the in-build baseline.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use tsdp_core::data::{gen_synthetic, make_attacker_queryset};
use tsdp_core::exec;
use tsdp_core::nn::engine::forward_sample;
use tsdp_core::nn::graph::{ModelBuilder, ModelGraph, OutputMode};
use tsdp_core::nn::train::{train_sgd, TrainConfig};

fn cnn(side: usize, classes: usize, seed: u64) -> ModelGraph {
    ModelBuilder::new(vec![1, side, side], seed)
        .conv(1, 8, 3, 1, 1)
        .relu()
        .conv(8, 8, 3, 1, 1)
        .relu()
        .linear(8 * side * side, classes)
        .build(OutputMode::Logits)
        .expect("valid bench model")
}

fn bench_batched_forward(c: &mut Criterion) {
    let side = 12;
    let model = cnn(side, 4, 7);
    let data = gen_synthetic(4, 16, side, 11).expect("bench data");
    let samples: Vec<Vec<f64>> = (0..data.len())
        .map(|i| {
            let n = data.images.len() / data.len();
            data.images.data()[i * n..(i + 1) * n].to_vec()
        })
        .collect();
    let shapes = model.infer_shapes().expect("shapes");
    let mut g = c.benchmark_group("batched_forward");
    g.bench_function("map_indexed", |b| {
        b.iter(|| {
            exec::map_indexed(samples.len(), |i| forward_sample(&model, &shapes, &samples[i]))
        })
    });
    g.bench_function("map_indexed_seq", |b| {
        b.iter(|| {
            exec::map_indexed_seq(samples.len(), |i| {
                forward_sample(&model, &shapes, &samples[i])
            })
        })
    });
    g.finish();
}

/// Attack-cell shape: several independent short training runs, one per seed,
/// the way sweep cells fan out.
fn bench_attack_cells(c: &mut Criterion) {
    let side = 8;
    let model = cnn(side, 3, 3);
    let data = gen_synthetic(3, 8, side, 5).expect("bench data");
    let queries = make_attacker_queryset(&data, 12, 9).expect("bench queries");
    let cells = 4usize;
    let run_cell = |seed: u64| {
        let cfg = TrainConfig {
            epochs: 2,
            seed,
            ..Default::default()
        };
        let trained = train_sgd(&model, &data, &cfg).expect("train");
        let x = queries.to_tensor().expect("queries");
        tsdp_core::nn::engine::forward(&trained, &x).expect("forward")
    };
    let mut g = c.benchmark_group("attack_cells");
    g.sample_size(10);
    g.bench_function("map_indexed", |b| {
        b.iter_batched(
            || (),
            |_| exec::map_indexed(cells, |i| run_cell(i as u64)),
            BatchSize::SmallInput,
        )
    });
    g.bench_function("map_indexed_seq", |b| {
        b.iter_batched(
            || (),
            |_| exec::map_indexed_seq(cells, |i| run_cell(i as u64)),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, bench_batched_forward, bench_attack_cells);
criterion_main!(benches);
