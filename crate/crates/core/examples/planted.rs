//! Trains on the planted composition-rule graph and reports relation ranking
//! on the held-out triples.
//!
//! `cargo run --release --example planted -- [key=value ...]` where keys are
//! training config keys.

use std::time::Instant;

use noran::kg::{make_inductive_split, KnowledgeGraph};
use noran::pipeline::{evaluate_held_out, train, RankMode, TrainConfig};
use noran::synth::{planted_rule_kg, PlantedSpec};

fn main() {
    let mut cfg = TrainConfig {
        dim: 32,
        epochs: 30,
        ..TrainConfig::default()
    };
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        cfg.set(k, v).expect("config");
    }
    let kg = planted_rule_kg(PlantedSpec::default(), cfg.seed);
    let split = make_inductive_split(&kg, 0.15, cfg.seed).expect("split");
    let mut eval = KnowledgeGraph::new();
    for e in &split.eval_triples {
        let t = e.triple;
        eval.push_named(kg.entity_name(t.head), kg.relation_name(t.rel), kg.entity_name(t.tail));
    }
    println!("train={} eval={}", split.train_graph.len(), eval.len());
    let start = Instant::now();
    let out = train(&split.train_graph, &cfg, |e, l| println!("epoch={e} loss={l:.6}")).expect("train");
    println!("classifier_loss={:.4}", out.classifier_loss);
    let report = evaluate_held_out(&out.model, &split.train_graph, &eval, RankMode::Relations, cfg.seed).expect("eval");
    print!("{report}");
    println!("total {:.1}s", start.elapsed().as_secs_f64());
}
