use std::collections::BTreeSet;

use noran::influence::{influence_scores, normalize, verify_corollary, GraphSpec, InfluenceMode, EXACT_TOLERANCE};
use noran::layers::{Activation, GnnStack, MpGraph, MpKind};
use noran::params::ParamStore;
use noran::rng::{self, streams};
use noran::tensor::Tensor;
use proptest::prelude::*;

/// Connected-or-not random graphs as edge-list specs on `3..=max_n` nodes.
fn arb_spec(max_n: usize) -> impl Strategy<Value = GraphSpec> {
    (3..=max_n).prop_flat_map(|n| {
        prop::collection::vec((0..n, 0..n), 1..2 * n).prop_map(move |pairs| {
            let mut text = format!("0 {}\n", n - 1);
            for (u, v) in pairs {
                if u != v {
                    text.push_str(&format!("{u} {v}\n"));
                }
            }
            GraphSpec::parse_edge_list("random", &text).unwrap()
        })
    })
}

fn khop(g: &GraphSpec, u: usize, k: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([u]);
    let mut frontier = vec![u];
    for _ in 0..k {
        let mut next = Vec::new();
        for &a in &frontier {
            for &(x, y) in &g.edges {
                for (p, q) in [(x, y), (y, x)] {
                    if p == a && seen.insert(q) {
                        next.push(q);
                    }
                }
            }
        }
        frontier = next;
    }
    seen
}

fn features(n: usize, width: usize, seed: u64) -> Tensor {
    let data = (0..n * width).map(|i| ((i as f64 + 0.5) * (seed as f64 + 1.7)).cos()).collect();
    Tensor::matrix(n, width, data).unwrap()
}

fn stack(kind: MpKind, k: usize, width: usize, act: Activation, seed: u64) -> (ParamStore, GnnStack) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, streams::PARAMS);
    let s = GnnStack::new(&mut store, "psi", kind, k, width, act, &mut r);
    (store, s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn support_within_k_hops(spec in arb_spec(9), k in 1usize..4, seed in 0u64..100, kind_ix in 0usize..5) {
        let kind = MpKind::ALL[kind_ix];
        let g = spec.graph();
        let n = spec.nodes;
        let u = seed as usize % n;
        let (store, s) = stack(kind, k, 3, Activation::Relu, seed);
        let scores = influence_scores(&s, &store, &g, &features(n, 3, seed), u).unwrap();
        let hood = khop(&spec, u, k);
        for (v, x) in scores.iter().enumerate() {
            if !hood.contains(&v) {
                prop_assert_eq!(*x, 0.0, "node {} outside the {}-hop set of {}", v, k, u);
            }
        }
    }

    #[test]
    fn fixed_linear_influence_ignores_features(spec in arb_spec(8), k in 1usize..4, s1 in 0u64..100, s2 in 0u64..100) {
        let g: MpGraph = spec.graph();
        let n = spec.nodes;
        for kind in MpKind::FIXED {
            let (store, s) = stack(kind, k, 3, Activation::Identity, 9);
            let a = normalize(&influence_scores(&s, &store, &g, &features(n, 3, s1), 0).unwrap());
            let b = normalize(&influence_scores(&s, &store, &g, &features(n, 3, s2), 0).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_mode_holds_on_random_graphs(spec in arb_spec(8), k in 1usize..4, seed in any::<u64>(), kind_ix in 0usize..4) {
        let kind = MpKind::FIXED[kind_ix];
        let center = seed as usize % spec.nodes;
        let report = verify_corollary(kind, &spec, k, 1, seed, InfluenceMode::ExactLinear, center).unwrap();
        prop_assert!(report.passed && report.tv < EXACT_TOLERANCE, "tv={}", report.tv);
        let hood = khop(&spec, center, k);
        for (v, p) in report.influence.iter().enumerate() {
            prop_assert_eq!(*p > 0.0, hood.contains(&v));
        }
    }
}
