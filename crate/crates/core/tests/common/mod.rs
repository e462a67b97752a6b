//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use noran::kg::{KnowledgeGraph, Triple};
use noran::relnet::{LinkPattern, PatternMask, RelationNetwork};
use proptest::prelude::*;

/// All-pairs shared-entity check: `(i, j) -> bits` for `i < j`.
pub fn pairwise_edges(kg: &KnowledgeGraph, mask: PatternMask) -> BTreeMap<(usize, usize), u8> {
    let ts = kg.triples();
    let mut out = BTreeMap::new();
    for i in 0..ts.len() {
        for j in i + 1..ts.len() {
            let (a, b) = (ts[i], ts[j]);
            let mut bits = 0;
            if a.head == b.head {
                bits |= LinkPattern::HeadHead.bit();
            }
            if a.tail == b.tail {
                bits |= LinkPattern::TailTail.bit();
            }
            if a.head == b.tail || a.tail == b.head {
                bits |= LinkPattern::HeadTail.bit();
            }
            bits &= mask.bits();
            if bits != 0 {
                out.insert((i, j), bits);
            }
        }
    }
    out
}

pub fn built_edges(net: &RelationNetwork) -> BTreeMap<(usize, usize), u8> {
    net.edges().map(|(u, v, b)| ((u, v), b)).collect()
}

/// CSR rows strictly ascending, no self loops, and every edge present in
/// both directions with equal bits.
pub fn assert_csr_well_formed(net: &RelationNetwork) {
    for u in 0..net.node_count() {
        let ns = net.neighbors(u);
        assert!(ns.windows(2).all(|w| w[0] < w[1]), "row {u} not strictly sorted");
        for (&v, &b) in ns.iter().zip(net.neighbor_patterns(u)) {
            assert_ne!(v as usize, u);
            assert_ne!(b, 0);
            assert_eq!(net.edge_bits(v as usize, u), Some(b), "edge ({u}, {v}) not mirrored");
        }
    }
}

pub fn graph_from(entities: usize, triples: &[(usize, usize, usize)]) -> KnowledgeGraph {
    let mut kg = KnowledgeGraph::new();
    for &(h, r, t) in triples {
        kg.push_named(&format!("e{}", h % entities.max(1)), &format!("r{r}"), &format!("e{}", t % entities.max(1)));
    }
    kg
}

/// Random graphs with at most `max_triples` triples over at most
/// `max_entities` entities and a handful of relations.
pub fn arb_kg(max_entities: usize, max_triples: usize) -> impl Strategy<Value = KnowledgeGraph> {
    (1..=max_entities).prop_flat_map(move |n| {
        prop::collection::vec((0..n, 0..4usize, 0..n), 1..=max_triples).prop_map(move |ts| graph_from(n, &ts))
    })
}

pub fn arb_mask() -> impl Strategy<Value = PatternMask> {
    (0u8..8).prop_map(PatternMask::from_bits)
}

pub fn triple_of(kg: &KnowledgeGraph, h: &str, r: &str, t: &str) -> Triple {
    Triple::new(kg.entity_id(h).unwrap(), kg.relation_id(r).unwrap(), kg.entity_id(t).unwrap())
}
