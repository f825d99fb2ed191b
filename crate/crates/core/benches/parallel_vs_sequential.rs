// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sequential vs parallel execution of the three data-parallel hot paths.

use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use forage_lens::contrastive::PromptCondition;
use forage_lens::lens::{layer_curves, EventMeta, LensEvent, ModelHead, NormKind, TokenSetPartition};
use forage_lens::par::Execution;
use forage_lens::probe::{train_layerwise, InMemorySource, LayerSource, ProbeConfig, SplitConfig};
use forage_lens::seqstats::paired_permutation_test_with;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn permutation(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let pre: Vec<f64> = (0..200).map(|_| r.random()).collect();
    let post: Vec<f64> = pre.iter().map(|x| x + r.random_range(-0.2..0.3)).collect();
    let mut g = c.benchmark_group("permutation_test_100k");
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| paired_permutation_test_with(black_box(&pre), black_box(&post), 100_000, 7, exec).unwrap())
        });
    }
    g.finish();
}

fn lens(c: &mut Criterion) {
    let (d, vocab, n_layers, n_events) = (64, 2048, 12, 256);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let unembed: Vec<f32> = (0..d * vocab).map(|_| r.random_range(-1.0..1.0)).collect();
    let head = ModelHead::new(unembed, vec![1.0; d], NormKind::Rms, 1e-5).unwrap();
    let events: Vec<LensEvent> = (0..n_events)
        .map(|i| {
            let within: BTreeSet<u32> = (0..32).map(|_| r.random_range(0..vocab as u32)).collect();
            let between: BTreeSet<u32> = (0..96)
                .map(|_| r.random_range(0..vocab as u32))
                .filter(|t| !within.contains(t))
                .collect();
            LensEvent {
                meta: EventMeta {
                    sequence_id: format!("s{}", i / 8),
                    position: i % 8,
                    is_switch: i % 3 == 0,
                    condition: None,
                },
                residuals: (0..=n_layers)
                    .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
                    .collect(),
                partition: TokenSetPartition {
                    within,
                    between,
                    actual: r.random_range(0..vocab as u32),
                    excluded_ambiguous: BTreeSet::new(),
                },
            }
        })
        .collect();
    let mut g = c.benchmark_group("layer_curves");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| layer_curves(black_box(&events), &head, exec).unwrap()));
    }
    g.finish();
}

fn probes(c: &mut Criterion) {
    let (n_seq, per_seq, d, n_layers) = (80, 5, 48, 8);
    let n = n_seq * per_seq;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<bool> = (0..n).map(|_| r.random()).collect();
    let groups: Vec<String> = (0..n).map(|i| format!("s{}", i / per_seq)).collect();
    let layers: Vec<DMatrix<f64>> = (0..=n_layers)
        .map(|l| {
            DMatrix::from_fn(n, d, |i, j| {
                let x: f64 = StandardNormal.sample(&mut r);
                if j == 0 && labels[i] { x + 0.3 * l as f64 } else { x }
            })
        })
        .collect();
    let source = InMemorySource {
        model_tag: "bench".into(),
        condition: PromptCondition::Neutral,
        labels,
        groups,
        layers,
    };
    let sources: [&dyn LayerSource; 1] = [&source];
    let config = ProbeConfig {
        split: SplitConfig {
            repeats: 2,
            ..SplitConfig::default()
        },
        ..ProbeConfig::default()
    };
    let mut g = c.benchmark_group("train_layerwise");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train_layerwise(black_box(&sources), &config, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, permutation, lens, probes);
criterion_main!(benches);
