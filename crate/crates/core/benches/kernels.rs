//! Parallel against sequential paths for the hot kernels.
//!
//! Each group runs the same input twice, once with the rayon path enabled and
//! once with it switched off via `par::set_parallel`.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use noran::layers::{Activation, GnnStack, MpGraph, MpKind};
use noran::params::ParamStore;
use noran::relnet::{PatternMask, RelationNetwork};
use noran::rng::{self, streams};
use noran::synth::random_kg;
use noran::tensor::{kernels, Tape};
use noran::par;
use rand::Rng;

const PATHS: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, streams::PARAMS);
    (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        for (label, on) in PATHS {
            par::set_parallel(on);
            group.bench_with_input(BenchmarkId::new(label, n), &n, |bench, &n| {
                bench.iter(|| kernels::matmul(&a, &b, n, n, n))
            });
        }
    }
    par::set_parallel(true);
    group.finish();
}

fn relnet_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("relnet_build");
    for triples in [1000usize, 4000] {
        let kg = random_kg(triples / 2, 20, triples, 3);
        for (label, on) in PATHS {
            par::set_parallel(on);
            group.bench_with_input(BenchmarkId::new(label, triples), &kg, |bench, kg| {
                bench.iter(|| RelationNetwork::build(kg, PatternMask::ALL, None, 0))
            });
        }
    }
    par::set_parallel(true);
    group.finish();
}

fn gnn_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("gnn_forward_backward");
    let width = 32;
    let kg = random_kg(1000, 20, 2000, 4);
    let net = RelationNetwork::build(&kg, PatternMask::ALL, None, 0);
    let graph = MpGraph::from_network(&net);
    let n = graph.node_count();
    let x0 = random_matrix(n, width, 5);
    for kind in [MpKind::Gcn, MpKind::Gat] {
        let mut store = ParamStore::new();
        let mut r = rng::stream(6, streams::PARAMS);
        let stack = GnnStack::new(&mut store, "psi", kind, 2, width, Activation::Relu, &mut r);
        for (label, on) in PATHS {
            par::set_parallel(on);
            group.bench_function(BenchmarkId::new(label, kind), |bench| {
                bench.iter(|| {
                    let mut tape = Tape::new();
                    let params = store.bind(&mut tape).unwrap();
                    let x = tape.param(n, width, x0.clone()).unwrap();
                    let out = stack.forward(&mut tape, &params, &graph, x).unwrap();
                    let s = tape.sum(out);
                    tape.backward(s).unwrap();
                })
            });
        }
    }
    par::set_parallel(true);
    group.finish();
}

fn config() -> Criterion {
    Criterion::default()
        .sample_size(10)
        .warm_up_time(Duration::from_millis(500))
        .measurement_time(Duration::from_secs(2))
}

criterion_group! {
    name = benches;
    config = config();
    targets = matmul, relnet_build, gnn_step
}
criterion_main!(benches);
