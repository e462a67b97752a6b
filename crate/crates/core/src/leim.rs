//! Mutual-information training objective between ego-graph evidence and node
//! embeddings: the edge-summed discriminator, the Jensen-Shannon and InfoNCE
//! estimators, in-batch negative pairing and the margin baseline.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::layers::xavier;
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Axis, Segments, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LeimError {
    #[error("estimator needs at least one score")]
    EmptyBatch,
    #[error("negative pairing needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("unknown estimator {0:?}")]
    UnknownEstimator(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MiEstimator {
    Jsd,
    InfoNce,
    NaiveNs,
}

impl fmt::Display for MiEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiEstimator::Jsd => "jsd",
            MiEstimator::InfoNce => "infonce",
            MiEstimator::NaiveNs => "naive-ns",
        })
    }
}

impl FromStr for MiEstimator {
    type Err = LeimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsd" => Ok(MiEstimator::Jsd),
            "infonce" | "info-nce" => Ok(MiEstimator::InfoNce),
            "naive-ns" | "naive_ns" | "ns" => Ok(MiEstimator::NaiveNs),
            _ => Err(LeimError::UnknownEstimator(s.to_owned())),
        }
    }
}

/// `3f → f (ReLU) → 1 (sigmoid)` network judging `[h_p ‖ h_q ‖ x]` triples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discriminator {
    pub hidden_weight: ParamId,
    pub hidden_bias: ParamId,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    width: usize,
}

/// Edges to score, each tied to a query row. Entry `e` scores edge
/// `(src[e], dst[e])` of the evidence embeddings against anchor row
/// `anchor[e]`, and its log-probability is summed into `query[e]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeBatch {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub anchor: Vec<usize>,
    pub query: Vec<usize>,
    pub n_queries: usize,
}

impl EdgeBatch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Adds one query over `edges` (already offset into the evidence rows).
    pub fn push_query(&mut self, edges: impl IntoIterator<Item = (usize, usize)>, anchor: usize) -> usize {
        let q = self.n_queries;
        for (p, r) in edges {
            self.src.push(p.min(r));
            self.dst.push(p.max(r));
            self.anchor.push(anchor);
            self.query.push(q);
        }
        self.n_queries += 1;
        q
    }
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut Rng) -> Self {
        Self {
            hidden_weight: store.add(format!("{name}.hidden_weight"), xavier(rng, 3 * width, width)),
            hidden_bias: store.add(format!("{name}.hidden_bias"), Tensor::zeros(1, width).trainable()),
            out_weight: store.add(format!("{name}.out_weight"), xavier(rng, width, 1)),
            out_bias: store.add(format!("{name}.out_bias"), Tensor::zeros(1, 1).trainable()),
            width,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.hidden_weight, self.hidden_bias, self.out_weight, self.out_bias]
    }

    /// Pre-sigmoid output for `m×3f` inputs, as an `m×1` column.
    pub fn logits(&self, tape: &mut Tape, params: &Binding, inputs: Var) -> Result<Var, TensorError> {
        let h = tape.matmul(inputs, params.var(self.hidden_weight))?;
        let h = tape.add(h, params.var(self.hidden_bias))?;
        let h = tape.relu(h);
        let o = tape.matmul(h, params.var(self.out_weight))?;
        tape.add(o, params.var(self.out_bias))
    }

    /// `f_ω` itself, in `(0, 1)`.
    pub fn probability(&self, tape: &mut Tape, params: &Binding, inputs: Var) -> Result<Var, TensorError> {
        let z = self.logits(tape, params, inputs)?;
        Ok(tape.sigmoid(z))
    }

    /// Per-query `T = Σ log f_ω([h_p ‖ h_q ‖ x])`, an `n_queries×1` column.
    ///
    /// The first layer is applied blockwise (`h_p·W_p + h_q·W_q + x·W_x`) so
    /// each evidence row is projected once rather than once per edge.
    pub fn scores(&self, tape: &mut Tape, params: &Binding, evidence: Var, anchors: Var, batch: &EdgeBatch) -> Result<Var, TensorError> {
        let f = self.width;
        let w = params.var(self.hidden_weight);
        let w_p = tape.slice(w, Axis::Rows, 0, f)?;
        let w_q = tape.slice(w, Axis::Rows, f, f)?;
        let w_x = tape.slice(w, Axis::Rows, 2 * f, f)?;
        if batch.is_empty() {
            return tape.constant(batch.n_queries, 1, vec![0.0; batch.n_queries]);
        }
        let p = tape.matmul(evidence, w_p)?;
        let q = tape.matmul(evidence, w_q)?;
        let x = tape.matmul(anchors, w_x)?;
        let p = tape.gather_rows(p, batch.src.clone())?;
        let q = tape.gather_rows(q, batch.dst.clone())?;
        let x = tape.gather_rows(x, batch.anchor.clone())?;
        let h = tape.add(p, q)?;
        let h = tape.add(h, x)?;
        let h = tape.add(h, params.var(self.hidden_bias))?;
        let h = tape.relu(h);
        let o = tape.matmul(h, params.var(self.out_weight))?;
        let o = tape.add(o, params.var(self.out_bias))?;
        let logp = tape.log_sigmoid(o);
        tape.scatter_add_rows(logp, batch.query.clone(), batch.n_queries)
    }
}

fn check_nonempty(tape: &Tape, v: Var) -> Result<(), LeimError> {
    let (r, c) = tape.shape(v);
    if r * c == 0 {
        Err(LeimError::EmptyBatch)
    } else {
        Ok(())
    }
}

/// Jensen-Shannon estimate `mean(−sp(−pos)) − mean(sp(neg))`. With
/// `as_printed` the negative term enters with the opposite sign.
pub fn jsd_mi(tape: &mut Tape, pos: Var, neg: Var, as_printed: bool) -> Result<Var, LeimError> {
    check_nonempty(tape, pos)?;
    check_nonempty(tape, neg)?;
    let pos_term = tape.log_sigmoid(pos);
    let pos_term = tape.mean(pos_term);
    let neg_term = tape.softplus(neg);
    let neg_term = tape.mean(neg_term);
    let neg_term = if as_printed { neg_term } else { tape.scale(neg_term, -1.0) };
    Ok(tape.add(pos_term, neg_term)?)
}

/// InfoNCE estimate `mean_a(pos_a − log Σ_j exp(neg_{a,j}))`. `neg` is a
/// column grouped by anchor through `segments`; every anchor needs at least
/// one negative.
pub fn infonce_mi(tape: &mut Tape, pos: Var, neg: Var, segments: &Segments) -> Result<Var, LeimError> {
    check_nonempty(tape, pos)?;
    check_nonempty(tape, neg)?;
    let n = segments.count();
    if tape.shape(pos) != (n, 1) || tape.shape(neg) != (segments.len(), 1) {
        return Err(TensorError::ShapeMismatch {
            op: "infonce",
            left: vec![tape.shape(pos).0, tape.shape(neg).0],
            right: vec![n, segments.len()],
        }
        .into());
    }
    if (0..n).any(|a| segments.range(a).is_empty()) {
        return Err(LeimError::EmptyBatch);
    }
    // Shift by each anchor's (detached) maximum before exponentiating.
    let vals = tape.value(neg);
    let maxes: Vec<f64> = (0..n)
        .map(|a| vals[segments.range(a)].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let ids: Arc<[usize]> = (0..n).flat_map(|a| std::iter::repeat_n(a, segments.range(a).len())).collect();
    let m = tape.constant(n, 1, maxes)?;
    let m_rows = tape.gather_rows(m, Arc::clone(&ids))?;
    let shifted = tape.sub(neg, m_rows)?;
    let e = tape.exp(shifted);
    let s = tape.scatter_add_rows(e, ids, n)?;
    let lse = tape.log(s);
    let lse = tape.add(lse, m)?;
    let diff = tape.sub(pos, lse)?;
    Ok(tape.mean(diff))
}

/// `mean(max(0, γ − pos + neg))` over 1:1 pairs.
pub fn naive_ns_loss(tape: &mut Tape, pos: Var, neg: Var, margin: f64) -> Result<Var, LeimError> {
    check_nonempty(tape, pos)?;
    let gap = tape.sub(neg, pos)?;
    if tape.shape(pos) != tape.shape(neg) {
        return Err(TensorError::ShapeMismatch {
            op: "naive_ns_loss",
            left: vec![tape.shape(pos).0],
            right: vec![tape.shape(neg).0],
        }
        .into());
    }
    let g = tape.scalar(margin);
    let z = tape.add(gap, g)?;
    let z = tape.relu(z);
    Ok(tape.mean(z))
}

/// Batch positions whose evidence serves as negatives for each anchor.
/// Jensen-Shannon: one partner from a uniform derangement; InfoNCE: every
/// other position.
pub fn pair_negatives(batch_size: usize, estimator: MiEstimator, rng: &mut Rng) -> Result<Vec<Vec<usize>>, LeimError> {
    if batch_size < 2 {
        return Err(LeimError::BatchTooSmall(batch_size));
    }
    Ok(match estimator {
        MiEstimator::InfoNce => (0..batch_size).map(|a| (0..batch_size).filter(|&b| b != a).collect()).collect(),
        MiEstimator::Jsd | MiEstimator::NaiveNs => derangement(batch_size, rng).into_iter().map(|b| vec![b]).collect(),
    })
}

/// Uniform random derangement by rejection.
pub fn derangement(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn col(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn jsd_at_zero() {
        let mut tape = Tape::new();
        let z = col(&mut tape, &[0.0]);
        let i = jsd_mi(&mut tape, z, z, false).unwrap();
        assert!((tape.scalar_value(i) + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn jsd_supremum_and_monotonicity() {
        let mut tape = Tape::new();
        let p = col(&mut tape, &[50.0]);
        let n = col(&mut tape, &[-50.0]);
        let i = jsd_mi(&mut tape, p, n, false).unwrap();
        assert!(tape.scalar_value(i).abs() < 1e-15);
        let base = {
            let p = col(&mut tape, &[0.1, -0.3]);
            let n = col(&mut tape, &[0.2]);
            let i = jsd_mi(&mut tape, p, n, false).unwrap();
            tape.scalar_value(i)
        };
        let p = col(&mut tape, &[0.2, -0.3]);
        let n = col(&mut tape, &[0.2]);
        let up = jsd_mi(&mut tape, p, n, false).unwrap();
        assert!(tape.scalar_value(up) > base);
        let p = col(&mut tape, &[0.1, -0.3]);
        let n = col(&mut tape, &[0.3]);
        let down = jsd_mi(&mut tape, p, n, false).unwrap();
        assert!(tape.scalar_value(down) < base);
    }

    #[test]
    fn jsd_nonpositive_for_nonpositive_scores() {
        let mut tape = Tape::new();
        let p = col(&mut tape, &[-0.1, -3.0, 0.0]);
        let n = col(&mut tape, &[-2.0, -0.5]);
        let i = jsd_mi(&mut tape, p, n, false).unwrap();
        assert!(tape.scalar_value(i) <= 0.0);
    }

    #[test]
    fn printed_sign_flips_negative_term() {
        let mut tape = Tape::new();
        let p = col(&mut tape, &[0.0]);
        let n = col(&mut tape, &[0.0]);
        let i = jsd_mi(&mut tape, p, n, true).unwrap();
        assert!(tape.scalar_value(i).abs() < 1e-15);
    }

    #[test]
    fn infonce_cases() {
        let mut tape = Tape::new();
        let seg1 = Segments::from_ids(&[0], 1).unwrap();
        let p = col(&mut tape, &[0.7]);
        let n = col(&mut tape, &[0.7]);
        let i = infonce_mi(&mut tape, p, n, &seg1).unwrap();
        assert!(tape.scalar_value(i).abs() < 1e-15);

        let seg = Segments::from_ids(&[0, 0, 0, 0], 1).unwrap();
        let p = col(&mut tape, &[1.5]);
        let n = col(&mut tape, &[1.5; 4]);
        let i = infonce_mi(&mut tape, p, n, &seg).unwrap();
        assert!((tape.scalar_value(i) + 4f64.ln()).abs() < 1e-12);

        let seg = Segments::from_ids(&[0, 0, 1, 1, 1], 2).unwrap();
        let p = col(&mut tape, &[0.3, -1.0]);
        let n = col(&mut tape, &[2.0, -0.5, 0.1, 0.4, 900.0]);
        let a = infonce_mi(&mut tape, p, n, &seg).unwrap();
        let p = col(&mut tape, &[10.3, -1.0]);
        let n = col(&mut tape, &[12.0, 9.5, 0.1, 0.4, 900.0]);
        let b = infonce_mi(&mut tape, p, n, &seg).unwrap();
        assert!((tape.scalar_value(a) - tape.scalar_value(b)).abs() < 1e-12);
        assert!(tape.scalar_value(a).is_finite());
    }

    #[test]
    fn margin_loss_cases() {
        let mut tape = Tape::new();
        let p = col(&mut tape, &[1.5, 0.7]);
        let n = col(&mut tape, &[1.0, 0.2]);
        let l = naive_ns_loss(&mut tape, p, n, 0.5).unwrap();
        assert!(tape.scalar_value(l).abs() < 1e-15);
        let l = naive_ns_loss(&mut tape, p, p, 0.5).unwrap();
        assert!((tape.scalar_value(l) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_batches_rejected() {
        let mut tape = Tape::new();
        let e = tape.constant(0, 1, vec![]).unwrap();
        let z = col(&mut tape, &[0.0]);
        assert_eq!(jsd_mi(&mut tape, e, z, false), Err(LeimError::EmptyBatch));
        let mut r = rng::stream(0, rng::streams::NEGATIVES);
        assert_eq!(pair_negatives(1, MiEstimator::Jsd, &mut r), Err(LeimError::BatchTooSmall(1)));
    }

    #[test]
    fn pairing_shapes() {
        let mut r = rng::stream(0, rng::streams::NEGATIVES);
        assert_eq!(pair_negatives(2, MiEstimator::Jsd, &mut r).unwrap(), vec![vec![1], vec![0]]);
        let all = pair_negatives(5, MiEstimator::InfoNce, &mut r).unwrap();
        assert!(all.iter().enumerate().all(|(a, n)| n.len() == 4 && !n.contains(&a)));
    }

    #[test]
    fn derangements_never_fix_points() {
        for seed in 0..1000 {
            let mut r = rng::stream(seed, rng::streams::NEGATIVES);
            let d = derangement(2 + (seed as usize % 9), &mut r);
            assert!(d.iter().enumerate().all(|(i, &p)| i != p));
            let mut sorted = d.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..d.len()).collect::<Vec<_>>());
        }
    }

    fn disc(width: usize) -> (ParamStore, Discriminator) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(2, rng::streams::PARAMS);
        let d = Discriminator::new(&mut store, "disc", width, &mut r);
        (store, d)
    }

    #[test]
    fn edgeless_query_scores_zero() {
        let (store, d) = disc(3);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).unwrap();
        let h = tape.constant(2, 3, vec![0.1; 6]).unwrap();
        let x = tape.constant(1, 3, vec![0.2; 3]).unwrap();
        let mut batch = EdgeBatch::default();
        batch.push_query([], 0);
        let t = d.scores(&mut tape, &b, h, x, &batch).unwrap();
        assert_eq!(tape.value(t), &[0.0]);
    }

    #[test]
    fn single_edge_at_half_gives_ln_half() {
        let (mut store, d) = disc(3);
        store.get_mut(d.out_weight).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).unwrap();
        let h = tape.constant(2, 3, vec![0.4; 6]).unwrap();
        let x = tape.constant(1, 3, vec![-0.2; 3]).unwrap();
        let mut batch = EdgeBatch::default();
        batch.push_query([(1, 0)], 0);
        let t = d.scores(&mut tape, &b, h, x, &batch).unwrap();
        assert!((tape.value(t)[0] - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn factored_scores_match_direct_evaluation() {
        let (store, d) = disc(4);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).unwrap();
        let hv: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).cos()).collect();
        let xv: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).sin()).collect();
        let h = tape.constant(5, 4, hv.clone()).unwrap();
        let x = tape.constant(2, 4, xv.clone()).unwrap();
        let edges0 = [(0, 1), (1, 2), (2, 0)];
        let edges1 = [(3, 4)];
        let mut batch = EdgeBatch::default();
        batch.push_query(edges0, 0);
        batch.push_query(edges1, 1);
        let t = d.scores(&mut tape, &b, h, x, &batch).unwrap();
        let got = tape.value(t).to_vec();
        for (q, edges) in [(0usize, &edges0[..]), (1, &edges1[..])] {
            let mut want = 0.0;
            for &(p, r) in edges {
                let (p, r) = (p.min(r), p.max(r));
                let mut row = hv[p * 4..p * 4 + 4].to_vec();
                row.extend_from_slice(&hv[r * 4..r * 4 + 4]);
                row.extend_from_slice(&xv[q * 4..q * 4 + 4]);
                let input = tape.constant(1, 12, row).unwrap();
                let prob = d.probability(&mut tape, &b, input).unwrap();
                want += tape.scalar_value(prob).ln();
            }
            assert!((got[q] - want).abs() < 1e-12);
            assert!(got[q] <= 0.0);
        }
    }
}
