//! Parallel vs sequential throughput of the data-parallel kernels.
//!
//! The `dispatch` entries run whatever the build selected (rayon under the
//! default `parallel` feature, the sequential fallback under
//! `--no-default-features`); the `sequential` entries always run the
//! sequential kernels. With the default features this directly compares the
//! two. The two paths use identical per-row arithmetic, so results are
//! bit-identical either way.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::Rng;
use std::hint::black_box;

use kinver::dataset::{generate_synthetic, SyntheticConfig};
use kinver::evaluation::{build_eval_pairs, evaluate, ModelScorer, PairScorer};
use kinver::linalg::{matmul, matmul_seq};
use kinver::loss::{batch_loss_with_grad, reference, ProjectedBatch};
use kinver::models::{Encoder, EncoderSpec, FusionClassifier};
use kinver::rng::seeded_rng;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    // (batch × in) · (in × out): the projection-head and classifier shapes
    for &(m, k, n) in &[(64usize, 512usize, 128usize), (256, 512, 512)] {
        let mut rng = seeded_rng(1);
        let a = Array2::from_shape_simple_fn((m, k), || rng.random_range(-1.0f32..1.0));
        let b = Array2::from_shape_simple_fn((k, n), || rng.random_range(-1.0f32..1.0));
        let label = format!("{m}x{k}x{n}");
        group.bench_with_input(BenchmarkId::new("dispatch", &label), &(), |bench, ()| {
            bench.iter(|| black_box(matmul(a.view(), b.view())));
        });
        group.bench_with_input(BenchmarkId::new("sequential", &label), &(), |bench, ()| {
            bench.iter(|| black_box(matmul_seq(a.view(), b.view())));
        });
    }
    group.finish();
}

fn bench_batch_loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_loss");
    for &n in &[16usize, 32] {
        let mut rng = seeded_rng(2);
        let z = Array2::from_shape_simple_fn((2 * n, 128), || rng.random_range(-1.0f64..1.0));
        let batch = ProjectedBatch::from_stacked(z, 0.07).unwrap();
        let label = format!("N{n}_P128");
        group.bench_with_input(
            BenchmarkId::new("stabilized_with_grad", &label),
            &(),
            |bench, ()| {
                bench.iter(|| black_box(batch_loss_with_grad(&batch)));
            },
        );
        group.bench_with_input(
            BenchmarkId::new("naive_reference", &label),
            &(),
            |bench, ()| {
                bench.iter(|| {
                    black_box(reference::naive_batch_loss(
                        batch.z_x(),
                        batch.z_y(),
                        0.07,
                    ))
                });
            },
        );
    }
    group.finish();
}

fn bench_evaluation(c: &mut Criterion) {
    let data = generate_synthetic(&SyntheticConfig {
        num_families: 40,
        archetype_dim: 16,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let dataset = data.dataset;
    let pairs = build_eval_pairs(&dataset, 3).unwrap();
    let mut rng = seeded_rng(4);
    let encoder = Encoder::toy(&EncoderSpec::new(dataset.input_dim(), 64, 128), &mut rng).unwrap();
    let classifier = FusionClassifier::new(128, 256, &mut rng).unwrap();
    let scorer = ModelScorer {
        encoder: &encoder,
        classifier: &classifier,
    };

    let mut group = c.benchmark_group("evaluate");
    group.bench_function(format!("dispatch/{}_pairs", pairs.len()), |bench| {
        bench.iter(|| black_box(evaluate(&dataset, &pairs, &scorer, 0.5).unwrap()));
    });
    group.bench_function(format!("sequential/{}_pairs", pairs.len()), |bench| {
        bench.iter(|| {
            // same scorer, plain fold over the pair list
            let mut correct = 0usize;
            for pair in &pairs {
                let score = scorer.score(&dataset, pair.image_x, pair.image_y).unwrap();
                if (score >= 0.5) == pair.kin {
                    correct += 1;
                }
            }
            black_box(correct)
        });
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_batch_loss, bench_evaluation);
criterion_main!(benches);
