//! Synthetic knowledge graphs for tests and experiments.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng as _;

use crate::kg::{KnowledgeGraph, Triple};
use crate::rng::{self, streams};

/// Shape of the planted composition-rule graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedSpec {
    /// Entities per group; the graph has `3 * group` entities.
    pub group: usize,
    /// Out-degree of `r1` (per `a`) and `r2` (per `b`).
    pub fanout: usize,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self { group: 100, fanout: 2 }
    }
}

/// Three entity groups `a*`, `b*`, `c*`. Every `a` has `r1` edges to `fanout`
/// distinct `b`s, every `b` has `r2` edges to `fanout` distinct `c`s, and
/// `r3(a, c)` holds exactly when some `b` has `r1(a, b)` and `r2(b, c)`.
pub fn planted_rule_kg(spec: PlantedSpec, seed: u64) -> KnowledgeGraph {
    let mut rng = rng::stream(seed, streams::SYNTH);
    let n = spec.group;
    let k = spec.fanout.min(n);
    let mut kg = KnowledgeGraph::new();
    for g in ["a", "b", "c"] {
        for i in 0..n {
            kg.intern_entity(&format!("{g}{i}"));
        }
    }
    for r in ["r1", "r2", "r3"] {
        kg.intern_relation(r);
    }
    let (a0, b0, c0) = (0, n, 2 * n);
    let mut r1: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut r2: Vec<Vec<usize>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut bs = index::sample(&mut rng, n, k).into_vec();
        bs.sort_unstable();
        r1.push(bs);
    }
    for _ in 0..n {
        let mut cs = index::sample(&mut rng, n, k).into_vec();
        cs.sort_unstable();
        r2.push(cs);
    }
    for (a, bs) in r1.iter().enumerate() {
        for &b in bs {
            kg.push(Triple::new(a0 + a, 0, b0 + b));
        }
    }
    for (b, cs) in r2.iter().enumerate() {
        for &c in cs {
            kg.push(Triple::new(b0 + b, 1, c0 + c));
        }
    }
    for (a, bs) in r1.iter().enumerate() {
        let reach: BTreeSet<usize> = bs.iter().flat_map(|&b| r2[b].iter().copied()).collect();
        for c in reach {
            kg.push(Triple::new(a0 + a, 2, c0 + c));
        }
    }
    kg
}

/// Uniformly random triples over `entities` names `e*` and `relations` names
/// `r*`, duplicates and self-loops allowed.
pub fn random_kg(entities: usize, relations: usize, triples: usize, seed: u64) -> KnowledgeGraph {
    let mut rng = rng::stream(seed, streams::SYNTH);
    let mut kg = KnowledgeGraph::new();
    for i in 0..entities {
        kg.intern_entity(&format!("e{i}"));
    }
    for i in 0..relations {
        kg.intern_relation(&format!("r{i}"));
    }
    for _ in 0..triples {
        let t = Triple::new(rng.random_range(0..entities), rng.random_range(0..relations), rng.random_range(0..entities));
        kg.push(t);
    }
    kg
}
