//! Message-passing layers, the triple combiners, and the dense convolution
//! oracle.

mod combine;
mod graph;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub use combine::{BiLstm, Combiner, CombinerKind, ConcatCombiner, LstmDirection};
pub use graph::{conv_matrix, AttentionInputs, MpGraph};

use crate::kg::xavier_std;
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("adjacency is not symmetric with zero diagonal at ({row}, {col})")]
    AsymmetricAdjacency { row: usize, col: usize },
    #[error("attention layers need node features")]
    MissingFeatures,
    #[error("unknown layer kind {0:?}")]
    UnknownKind(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MpKind {
    Gcn,
    Sage,
    Gin,
    Sgc,
    Gat,
}

impl MpKind {
    pub const ALL: [MpKind; 5] = [MpKind::Gcn, MpKind::Sage, MpKind::Gin, MpKind::Sgc, MpKind::Gat];
    pub const FIXED: [MpKind; 4] = [MpKind::Gcn, MpKind::Sage, MpKind::Gin, MpKind::Sgc];

    pub fn is_fixed(self) -> bool {
        self != MpKind::Gat
    }

    pub fn name(self) -> &'static str {
        match self {
            MpKind::Gcn => "gcn",
            MpKind::Sage => "sage",
            MpKind::Gin => "gin",
            MpKind::Sgc => "sgc",
            MpKind::Gat => "gat",
        }
    }
}

impl fmt::Display for MpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MpKind {
    type Err = LayerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(MpKind::Gcn),
            "sage" | "graphsage" => Ok(MpKind::Sage),
            "gin" => Ok(MpKind::Gin),
            "sgc" => Ok(MpKind::Sgc),
            "gat" => Ok(MpKind::Gat),
            _ => Err(LayerError::UnknownKind(s.to_owned())),
        }
    }
}

/// Nonlinearity between layers. The last layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Trainable xavier-normal matrix.
pub fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let normal = Normal::new(0.0, xavier_std(rows, cols)).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape").trainable()
}

/// Trainable matrix with entries uniform in `[lo, hi)`.
pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape").trainable()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerParams {
    Linear { weight: ParamId },
    Mlp { inner: ParamId, outer: ParamId },
    Propagate,
    Attention { theta: ParamId, att_self: ParamId, att_neighbor: ParamId },
}

impl LayerParams {
    pub fn ids(&self) -> Vec<ParamId> {
        match *self {
            LayerParams::Linear { weight } => vec![weight],
            LayerParams::Mlp { inner, outer } => vec![inner, outer],
            LayerParams::Propagate => vec![],
            LayerParams::Attention { theta, att_self, att_neighbor } => vec![theta, att_self, att_neighbor],
        }
    }
}

/// A depth-`k` stack of one message-passing family, all widths equal.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnStack {
    kind: MpKind,
    width: usize,
    activation: Activation,
    layers: Vec<LayerParams>,
}

impl GnnStack {
    /// Registers the stack's parameters in `store` under `name.<layer>.*`.
    pub fn new(store: &mut ParamStore, name: &str, kind: MpKind, depth: usize, width: usize, activation: Activation, rng: &mut Rng) -> Self {
        let layers = (0..depth)
            .map(|l| match kind {
                MpKind::Gcn | MpKind::Sage => LayerParams::Linear {
                    weight: store.add(format!("{name}.{l}.weight"), xavier(rng, width, width)),
                },
                MpKind::Gin => LayerParams::Mlp {
                    inner: store.add(format!("{name}.{l}.mlp_inner"), xavier(rng, width, width)),
                    outer: store.add(format!("{name}.{l}.mlp_outer"), xavier(rng, width, width)),
                },
                MpKind::Sgc => LayerParams::Propagate,
                MpKind::Gat => LayerParams::Attention {
                    theta: store.add(format!("{name}.{l}.theta"), xavier(rng, width, width)),
                    att_self: store.add(format!("{name}.{l}.att_self"), xavier(rng, width, 1)),
                    att_neighbor: store.add(format!("{name}.{l}.att_neighbor"), xavier(rng, width, 1)),
                },
            })
            .collect();
        Self {
            kind,
            width,
            activation,
            layers,
        }
    }

    pub fn kind(&self) -> MpKind {
        self.kind
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(LayerParams::ids).collect()
    }

    /// Output of every layer, `X ← σ(C·X·f)`; the last entry is the embedding.
    pub fn forward_layers(&self, tape: &mut Tape, params: &Binding, graph: &MpGraph, x: Var) -> Result<Vec<Var>, LayerError> {
        let (rows, cols) = tape.shape(x);
        if rows != graph.node_count() || cols != self.width {
            return Err(TensorError::ShapeMismatch {
                op: "mp_forward",
                left: vec![graph.node_count(), self.width],
                right: vec![rows, cols],
            }
            .into());
        }
        let pattern = Arc::clone(graph.pattern());
        let fixed = match graph.fixed_weights(self.kind) {
            Some(w) => Some(tape.constant(w.len(), 1, w)?),
            None => None,
        };
        let mut h = x;
        let mut outs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = match *layer {
                LayerParams::Linear { weight } => {
                    let t = tape.matmul(h, params.var(weight))?;
                    tape.spmm(fixed.expect("fixed family"), t, Arc::clone(&pattern))?
                }
                LayerParams::Propagate => tape.spmm(fixed.expect("fixed family"), h, Arc::clone(&pattern))?,
                LayerParams::Mlp { inner, outer } => {
                    let agg = tape.spmm(fixed.expect("fixed family"), h, Arc::clone(&pattern))?;
                    let z = tape.matmul(agg, params.var(inner))?;
                    let z = self.activation.apply(tape, z);
                    tape.matmul(z, params.var(outer))?
                }
                LayerParams::Attention { theta, att_self, att_neighbor } => {
                    let t = tape.matmul(h, params.var(theta))?;
                    let alpha = attention_weights(tape, t, params.var(att_self), params.var(att_neighbor), graph)?;
                    tape.spmm(alpha, t, Arc::clone(&pattern))?
                }
            };
            if l + 1 < self.layers.len() {
                out = self.activation.apply(tape, out);
            }
            outs.push(out);
            h = out;
        }
        if outs.is_empty() {
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, graph: &MpGraph, x: Var) -> Result<Var, LayerError> {
        Ok(*self.forward_layers(tape, params, graph, x)?.last().expect("non-empty"))
    }
}

/// Per-entry attention `softmax_j(a_self·θx_i + a_nbr·θx_j)` over the closed
/// neighborhood of each row `i`, given projected features `t = X·Θ`.
pub fn attention_weights(tape: &mut Tape, projected: Var, att_self: Var, att_neighbor: Var, graph: &MpGraph) -> Result<Var, LayerError> {
    let pattern = graph.pattern();
    let s_self = tape.matmul(projected, att_self)?;
    let s_nbr = tape.matmul(projected, att_neighbor)?;
    let rows: Arc<[usize]> = pattern.rows().into();
    let cols: Arc<[usize]> = pattern.cols().into();
    let a = tape.gather_rows(s_self, rows)?;
    let b = tape.gather_rows(s_nbr, cols)?;
    let logits = tape.add(a, b)?;
    Ok(tape.segment_softmax(logits, Arc::new(pattern.segments().clone()))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn stack(kind: MpKind, depth: usize, width: usize, act: Activation) -> (ParamStore, GnnStack) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, rng::streams::PARAMS);
        let s = GnnStack::new(&mut store, "psi", kind, depth, width, act, &mut r);
        (store, s)
    }

    fn run(store: &ParamStore, s: &GnnStack, g: &MpGraph, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).unwrap();
        let xv = tape.constant(g.node_count(), s.width(), x.to_vec()).unwrap();
        let out = s.forward(&mut tape, &b, g, xv).unwrap();
        tape.value(out).to_vec()
    }

    #[test]
    fn sgc_one_layer_is_c_times_x() {
        let (store, s) = stack(MpKind::Sgc, 1, 2, Activation::Relu);
        let g = MpGraph::from_edges(2, &[(0, 1)]);
        let out = run(&store, &s, &g, &[1.0, 2.0, 3.0, -4.0]);
        assert_eq!(out, vec![2.0, -1.0, 2.0, -1.0]);
    }

    #[test]
    fn edgeless_gin_is_rowwise() {
        let (store, s) = stack(MpKind::Gin, 2, 3, Activation::Identity);
        let g = MpGraph::from_edges(3, &[]);
        let x: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        let base = run(&store, &s, &g, &x);
        let mut x2 = x.clone();
        x2[3..6].iter_mut().for_each(|v| *v += 1.0);
        let moved = run(&store, &s, &g, &x2);
        assert_eq!(base[..3], moved[..3]);
        assert_eq!(base[6..], moved[6..]);
        assert_ne!(base[3..6], moved[3..6]);
    }

    #[test]
    fn permutation_equivariance() {
        let edges = [(0, 1), (1, 2), (2, 3), (0, 3), (3, 4)];
        let perm = [3, 0, 4, 1, 2];
        let pedges: Vec<(usize, usize)> = edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let w = 3;
        let x: Vec<f64> = (0..15).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.4).collect();
        let mut px = vec![0.0; 15];
        for u in 0..5 {
            px[perm[u] * w..(perm[u] + 1) * w].copy_from_slice(&x[u * w..(u + 1) * w]);
        }
        for kind in MpKind::ALL {
            let (store, s) = stack(kind, 2, w, Activation::Relu);
            let a = run(&store, &s, &MpGraph::from_edges(5, &edges), &x);
            let b = run(&store, &s, &MpGraph::from_edges(5, &pedges), &px);
            for u in 0..5 {
                for k in 0..w {
                    assert!((a[u * w + k] - b[perm[u] * w + k]).abs() < 1e-12, "{kind}");
                }
            }
        }
    }

    #[test]
    fn gat_attention_rows_sum_to_one() {
        let g = MpGraph::from_edges(6, &[(0, 1), (0, 2), (2, 3), (3, 4), (4, 5), (1, 5)]);
        let mut tape = Tape::new();
        let mut r = rng::stream(3, rng::streams::PARAMS);
        let x = tape.leaf(&xavier(&mut r, 6, 4)).unwrap();
        let a1 = tape.leaf(&xavier(&mut r, 4, 1)).unwrap();
        let a2 = tape.leaf(&xavier(&mut r, 4, 1)).unwrap();
        let alpha = attention_weights(&mut tape, x, a1, a2, &g).unwrap();
        let vals = tape.value(alpha);
        for s in 0..6 {
            let sum: f64 = vals[g.pattern().segments().range(s)].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gat_first_layer_matches_dense_oracle() {
        let (store, s) = stack(MpKind::Gat, 1, 3, Activation::Identity);
        let g = MpGraph::from_edges(4, &[(0, 1), (1, 2), (1, 3)]);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = run(&store, &s, &g, &x);
        let LayerParams::Attention { theta, att_self, att_neighbor } = s.layers()[0] else { panic!() };
        let att = AttentionInputs {
            features: &x,
            width: 3,
            theta: store.get(theta).data(),
            att_self: store.get(att_self).data(),
            att_neighbor: store.get(att_neighbor).data(),
        };
        let c = conv_matrix(MpKind::Gat, 4, &g.dense_adjacency(), Some(att)).unwrap();
        let th = store.get(theta).data();
        for i in 0..4 {
            for k in 0..3 {
                let mut want = 0.0;
                for j in 0..4 {
                    let proj: f64 = (0..3).map(|m| x[j * 3 + m] * th[m * 3 + k]).sum();
                    want += c[i * 4 + j] * proj;
                }
                assert!((out[i * 3 + k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_reported() {
        let (store, s) = stack(MpKind::Gcn, 1, 2, Activation::Relu);
        let g = MpGraph::from_edges(3, &[]);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape).unwrap();
        let x = tape.constant(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(s.forward(&mut tape, &b, &g, x), Err(LayerError::Tensor(TensorError::ShapeMismatch { .. }))));
    }

    #[test]
    fn sgc_owns_no_parameters() {
        let (store, s) = stack(MpKind::Sgc, 3, 4, Activation::Relu);
        assert!(store.is_empty());
        assert!(s.param_ids().is_empty());
        let (store, _) = stack(MpKind::Gin, 2, 4, Activation::Relu);
        assert_eq!(store.len(), 4);
    }
}
