use noran::leim::{infonce_mi, jsd_mi, naive_ns_loss, Discriminator, EdgeBatch};
use noran::params::ParamStore;
use noran::rng::{self, streams};
use noran::tensor::{Adam, AdamConfig, Segments, Tape};
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

fn column(tape: &mut Tape, v: &[f64]) -> noran::tensor::Var {
    tape.constant(v.len(), 1, v.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn jsd_nonpositive_when_scores_nonpositive(
        pos in prop::collection::vec(-50.0f64..=0.0, 1..20),
        neg in prop::collection::vec(-50.0f64..=0.0, 1..20),
    ) {
        let mut tape = Tape::new();
        let (p, n) = (column(&mut tape, &pos), column(&mut tape, &neg));
        let mi = jsd_mi(&mut tape, p, n, false).unwrap();
        prop_assert!(tape.scalar_value(mi) <= 0.0);
    }

    #[test]
    fn infonce_equal_scores_is_minus_log_m(c in -20.0f64..20.0, anchors in 1usize..6, m in 1usize..8) {
        let mut tape = Tape::new();
        let p = column(&mut tape, &vec![c; anchors]);
        let n = column(&mut tape, &vec![c; anchors * m]);
        let ids: Vec<usize> = (0..anchors).flat_map(|a| std::iter::repeat_n(a, m)).collect();
        let seg = Segments::from_ids(&ids, anchors).unwrap();
        let mi = infonce_mi(&mut tape, p, n, &seg).unwrap();
        prop_assert!((tape.scalar_value(mi) + (m as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn margin_loss_nonnegative(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30),
        margin in 0.0f64..=1.0,
    ) {
        let mut tape = Tape::new();
        let p = column(&mut tape, &pairs.iter().map(|x| x.0).collect::<Vec<_>>());
        let n = column(&mut tape, &pairs.iter().map(|x| x.1).collect::<Vec<_>>());
        let l = naive_ns_loss(&mut tape, p, n, margin).unwrap();
        prop_assert!(tape.scalar_value(l) >= 0.0);
    }
}

/// Positive edges come from evidence rows around +1, negative ones from rows
/// around −1; training the discriminator alone must separate them.
#[test]
fn discriminator_separates_planted_clusters() {
    let f = 4;
    let queries = 8;
    let mut r = rng::stream(2, streams::PARAMS);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut store = ParamStore::new();
    let disc = Discriminator::new(&mut store, "disc", f, &mut r);

    // Rows 0..16 are the positive cluster, 16..32 the negative one.
    let evidence: Vec<f64> = (0..32 * f).map(|i| if i < 16 * f { 1.0 } else { -1.0 } + noise.sample(&mut r)).collect();
    let anchors: Vec<f64> = (0..queries * f).map(|_| 0.5 + noise.sample(&mut r)).collect();
    let mut pos = EdgeBatch::default();
    let mut neg = EdgeBatch::default();
    for a in 0..queries {
        pos.push_query([(2 * a, 2 * a + 1), (2 * a, (2 * a + 3) % 16)], a);
        neg.push_query([(16 + 2 * a, 17 + 2 * a), (16 + 2 * a, 16 + (2 * a + 3) % 16)], a);
    }

    let mut adam = Adam::new(AdamConfig { lr: 0.01, ..AdamConfig::default() });
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape).unwrap();
        let ev = tape.constant(32, f, evidence.clone()).unwrap();
        let an = tape.constant(queries, f, anchors.clone()).unwrap();
        let tp = disc.scores(&mut tape, &params, ev, an, &pos).unwrap();
        let tn = disc.scores(&mut tape, &params, ev, an, &neg).unwrap();
        let mi = jsd_mi(&mut tape, tp, tn, false).unwrap();
        let loss = tape.scale(mi, -1.0);
        losses.push(tape.scalar_value(loss));
        tape.backward(loss).unwrap();
        store.collect_grads(&tape, &params).unwrap();
        adam.step(store.tensors_mut()).unwrap();
        store.zero_grads();
    }
    let avg: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(avg.windows(2).all(|w| w[1] < w[0]), "moving average not decreasing: {avg:?}");
    assert!(losses[199] < 0.5 * losses[0]);
}
