//! Influence of input node features on a node's final representation, and
//! its comparison with k-step random-walk distributions.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::layers::{conv_matrix, uniform, Activation, GnnStack, LayerError, MpGraph, MpKind};
use crate::params::ParamStore;
use crate::rng::{self, streams, Rng};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum InfluenceError {
    #[error("node {node} out of range for a graph of {nodes} nodes")]
    InvalidNode { node: usize, nodes: usize },
    #[error("unknown graph spec {0:?} (expected path-N, cycle-N, star-N, asymmetric or an edge-list file)")]
    UnknownGraph(String),
    #[error("malformed edge list line {line}: {text:?}")]
    MalformedEdge { line: usize, text: String },
    #[error("unknown influence mode {0:?} (expected exact, statistical or gat-contrast)")]
    UnknownMode(String),
    #[error("{mode} mode is undefined for the learnable {kind} layer")]
    LearnableLayer { mode: InfluenceMode, kind: MpKind },
    #[error("need at least one trial")]
    NoTrials,
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tolerance of the exact linear comparison.
pub const EXACT_TOLERANCE: f64 = 1e-9;
/// Minimum feature sensitivity expected of attention.
pub const CONTRAST_THRESHOLD: f64 = 1e-3;
/// Tolerance for "identical" distributions of fixed families.
pub const IDENTICAL_TOLERANCE: f64 = 1e-12;

/// An undirected graph for influence experiments, with optional pair of
/// feature matrices for the contrast check.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub name: String,
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
    /// Two distinct `nodes × width` feature matrices.
    pub features: Option<(Vec<f64>, Vec<f64>, usize)>,
}

impl GraphSpec {
    pub fn path(n: usize) -> Self {
        Self::plain(format!("path-{n}"), n, (1..n).map(|i| (i - 1, i)).collect())
    }

    pub fn cycle(n: usize) -> Self {
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        if n > 2 {
            edges.push((0, n - 1));
        }
        Self::plain(format!("cycle-{n}"), n, edges)
    }

    /// Node 0 is the hub.
    pub fn star(n: usize) -> Self {
        Self::plain(format!("star-{n}"), n, (1..n).map(|i| (0, i)).collect())
    }

    /// Center 0 with two branches of unequal length, 0–1–3 and 0–2, and two
    /// feature matrices that give the branches opposite magnitudes.
    pub fn asymmetric() -> Self {
        let edges = vec![(0, 1), (0, 2), (1, 3)];
        let width = 3;
        let a = vec![
            1.0, 0.5, -0.5, //
            3.0, 2.0, 1.0, //
            -1.0, 0.0, 0.5, //
            0.5, -2.0, 1.5,
        ];
        let b = vec![
            1.0, 0.5, -0.5, //
            -1.0, 0.0, 0.5, //
            3.0, 2.0, 1.0, //
            -2.5, 4.0, -3.0,
        ];
        Self {
            name: "asymmetric".into(),
            nodes: 4,
            edges,
            features: Some((a, b, width)),
        }
    }

    fn plain(name: String, nodes: usize, edges: Vec<(usize, usize)>) -> Self {
        Self {
            name,
            nodes,
            edges,
            features: None,
        }
    }

    /// A builtin name, or a path to a `u v` edge-list file.
    pub fn resolve(spec: &str) -> Result<Self, InfluenceError> {
        if spec == "asymmetric" {
            return Ok(Self::asymmetric());
        }
        if let Some((kind, n)) = spec.split_once('-') {
            if let Ok(n) = n.parse::<usize>() {
                match kind {
                    "path" if n >= 1 => return Ok(Self::path(n)),
                    "cycle" if n >= 1 => return Ok(Self::cycle(n)),
                    "star" if n >= 1 => return Ok(Self::star(n)),
                    _ => {}
                }
            }
        }
        let path = std::path::Path::new(spec);
        if !path.exists() {
            return Err(InfluenceError::UnknownGraph(spec.to_owned()));
        }
        Self::parse_edge_list(spec, &std::fs::read_to_string(path)?)
    }

    pub fn parse_edge_list(name: &str, text: &str) -> Result<Self, InfluenceError> {
        let mut edges = Vec::new();
        let mut nodes = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || InfluenceError::MalformedEdge {
                line: i + 1,
                text: raw.to_owned(),
            };
            let mut it = line.split_whitespace();
            let u: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let v: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if u == v {
                return Err(bad());
            }
            nodes = nodes.max(u + 1).max(v + 1);
            edges.push((u.min(v), u.max(v)));
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Self::plain(name.to_owned(), nodes, edges))
    }

    pub fn graph(&self) -> MpGraph {
        MpGraph::from_edges(self.nodes, &self.edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InfluenceMode {
    ExactLinear,
    StatisticalRelu,
    GatContrast,
}

impl fmt::Display for InfluenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InfluenceMode::ExactLinear => "exact",
            InfluenceMode::StatisticalRelu => "statistical",
            InfluenceMode::GatContrast => "gat-contrast",
        })
    }
}

impl FromStr for InfluenceMode {
    type Err = InfluenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(InfluenceMode::ExactLinear),
            "statistical" => Ok(InfluenceMode::StatisticalRelu),
            "gat-contrast" => Ok(InfluenceMode::GatContrast),
            _ => Err(InfluenceError::UnknownMode(s.to_owned())),
        }
    }
}

/// Per-node sum of `∂(Σ_i h_u[i]) / ∂x_v`, from one backward pass.
pub fn influence_scores(stack: &GnnStack, store: &ParamStore, graph: &MpGraph, x: &Tensor, u: usize) -> Result<Vec<f64>, InfluenceError> {
    let n = graph.node_count();
    if u >= n {
        return Err(InfluenceError::InvalidNode { node: u, nodes: n });
    }
    let mut tape = Tape::new();
    let params = store.bind(&mut tape)?;
    let xv = tape.param(x.rows(), x.cols(), x.data().to_vec())?;
    let h = stack.forward(&mut tape, &params, graph, xv)?;
    let row = tape.gather_rows(h, vec![u])?;
    let loss = tape.sum(row);
    tape.backward(loss)?;
    Ok(row_sums(tape.grad(xv).expect("input requires grad"), x.cols()))
}

/// The full Jacobian `∂h_u / ∂X` as `f` rows of `n×f` (one backward pass per
/// output coordinate).
pub fn influence_jacobian(stack: &GnnStack, store: &ParamStore, graph: &MpGraph, x: &Tensor, u: usize) -> Result<Vec<Vec<f64>>, InfluenceError> {
    let n = graph.node_count();
    if u >= n {
        return Err(InfluenceError::InvalidNode { node: u, nodes: n });
    }
    let f = x.cols();
    let mut tape = Tape::new();
    let params = store.bind(&mut tape)?;
    let xv = tape.param(x.rows(), f, x.data().to_vec())?;
    let h = stack.forward(&mut tape, &params, graph, xv)?;
    let mut rows = Vec::with_capacity(f);
    for i in 0..f {
        let mut pick = vec![0.0; n * f];
        pick[u * f + i] = 1.0;
        let mask = tape.constant(n, f, pick)?;
        let sel = tape.mul(h, mask)?;
        let loss = tape.sum(sel);
        tape.zero_grads();
        tape.backward(loss)?;
        rows.push(tape.grad(xv).expect("input requires grad").to_vec());
    }
    Ok(rows)
}

fn row_sums(values: &[f64], width: usize) -> Vec<f64> {
    values.chunks(width).map(|r| r.iter().sum()).collect()
}

/// L1-normalized copy; all-zero input stays zero.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().map(|x| x.abs()).sum();
    if s == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / s).collect()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Row `u` of `C^k` (dense `n×n`), L1-normalized.
pub fn random_walk_distribution(c: &[f64], n: usize, k: usize, u: usize) -> Vec<f64> {
    let mut row = vec![0.0; n];
    row[u] = 1.0;
    for _ in 0..k {
        let mut next = vec![0.0; n];
        for (i, &ri) in row.iter().enumerate() {
            if ri != 0.0 {
                for (nj, &cij) in next.iter_mut().zip(&c[i * n..(i + 1) * n]) {
                    *nj += ri * cij;
                }
            }
        }
        row = next;
    }
    normalize(&row)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceReport {
    pub graph: String,
    pub kind: MpKind,
    pub mode: InfluenceMode,
    pub depth: usize,
    pub center: usize,
    pub influence: Vec<f64>,
    pub oracle: Vec<f64>,
    pub tv: f64,
    /// Further named measurements of the mode.
    pub summary: Vec<(String, f64)>,
    pub passed: bool,
}

impl fmt::Display for InfluenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "graph={} layer={} mode={} k={} center={}", self.graph, self.kind, self.mode, self.depth, self.center)?;
        writeln!(f, "{:>6} {:>14} {:>14} {:>14}", "node", "influence", "oracle", "|diff|")?;
        for (v, (a, b)) in self.influence.iter().zip(&self.oracle).enumerate() {
            writeln!(f, "{v:>6} {a:>14.10} {b:>14.10} {:>14.3e}", (a - b).abs())?;
        }
        for (k, v) in &self.summary {
            writeln!(f, "{k}={v:.6e}")?;
        }
        writeln!(f, "tv={:.6e}", self.tv)?;
        writeln!(f, "result={}", if self.passed { "pass" } else { "fail" })
    }
}

fn random_features(rng: &mut Rng, n: usize, width: usize) -> Tensor {
    let data = (0..n * width).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(n, width, data).expect("consistent shape")
}

/// A stack with all transform weights replaced by draws from `[lo, hi)`.
fn stack_with_weights(kind: MpKind, depth: usize, width: usize, activation: Activation, rng: &mut Rng, positive: bool) -> (ParamStore, GnnStack) {
    let mut store = ParamStore::new();
    let stack = GnnStack::new(&mut store, "psi", kind, depth, width, activation, rng);
    if positive {
        for t in store.tensors_mut() {
            *t = uniform(rng, t.rows(), t.cols(), 0.1, 1.0);
        }
    }
    (store, stack)
}

/// Compares influence distributions around `center` with the `k`-step walk
/// over the layer's convolution matrix.
pub fn verify_corollary(kind: MpKind, spec: &GraphSpec, k: usize, trials: usize, seed: u64, mode: InfluenceMode, center: usize) -> Result<InfluenceReport, InfluenceError> {
    let n = spec.nodes;
    if center >= n {
        return Err(InfluenceError::InvalidNode { node: center, nodes: n });
    }
    if mode == InfluenceMode::ExactLinear && !kind.is_fixed() {
        return Err(InfluenceError::LearnableLayer { mode, kind });
    }
    let graph = spec.graph();
    let adjacency = graph.dense_adjacency();
    let width = spec.features.as_ref().map_or(4, |f| f.2);
    let mut rng = rng::stream(seed, streams::INFLUENCE);
    let mut summary = Vec::new();

    let (influence, oracle, tv, passed) = match mode {
        InfluenceMode::ExactLinear => {
            let c = conv_matrix(kind, n, &adjacency, None)?;
            let oracle = random_walk_distribution(&c, n, k, center);
            let (store, stack) = stack_with_weights(kind, k, width, Activation::Identity, &mut rng, true);
            let x = random_features(&mut rng, n, width);
            let influence = normalize(&influence_scores(&stack, &store, &graph, &x, center)?);
            let tv = total_variation(&influence, &oracle);
            (influence, oracle, tv, tv < EXACT_TOLERANCE)
        }
        InfluenceMode::StatisticalRelu => {
            if trials == 0 {
                return Err(InfluenceError::NoTrials);
            }
            let oracle = if kind.is_fixed() {
                random_walk_distribution(&conv_matrix(kind, n, &adjacency, None)?, n, k, center)
            } else {
                random_walk_distribution(&conv_matrix(MpKind::Sage, n, &adjacency, None)?, n, k, center)
            };
            let mut abs_sum = vec![0.0; n];
            let mut signed_sum = vec![0.0; n];
            let mut single_tv = 0.0;
            let mut checkpoints = Vec::new();
            for t in 0..trials {
                let mut trial_rng = rng::substream(seed, streams::INFLUENCE, t as u64);
                let (store, stack) = stack_with_weights(kind, k, width, Activation::Relu, &mut trial_rng, false);
                let x = random_features(&mut trial_rng, n, width);
                let jac = influence_jacobian(&stack, &store, &graph, &x, center)?;
                let mut abs = vec![0.0; n];
                let mut signed = vec![0.0; n];
                for row in &jac {
                    for (v, chunk) in row.chunks(width).enumerate() {
                        abs[v] += chunk.iter().map(|g| g.abs()).sum::<f64>();
                        signed[v] += chunk.iter().sum::<f64>();
                    }
                }
                let abs = normalize(&abs);
                single_tv += total_variation(&abs, &oracle);
                abs_sum.iter_mut().zip(&abs).for_each(|(s, a)| *s += a);
                signed_sum.iter_mut().zip(normalize(&signed)).for_each(|(s, a)| *s += a.abs());
                if (t + 1).is_power_of_two() || t + 1 == trials {
                    checkpoints.push((t + 1, total_variation(&normalize(&abs_sum), &oracle)));
                }
            }
            let influence = normalize(&abs_sum);
            let tv = total_variation(&influence, &oracle);
            let mean_single = single_tv / trials as f64;
            for (t, v) in &checkpoints {
                summary.push((format!("tv_abs_trials_{t}"), *v));
            }
            summary.push(("tv_abs_mean_single".into(), mean_single));
            summary.push(("tv_signed".into(), total_variation(&normalize(&signed_sum), &oracle)));
            (influence, oracle, tv, tv <= mean_single + 1e-12 && tv.is_finite())
        }
        InfluenceMode::GatContrast => {
            let (xa, xb) = match &spec.features {
                Some((a, b, w)) => (Tensor::matrix(n, *w, a.clone())?, Tensor::matrix(n, *w, b.clone())?),
                None => {
                    let a = random_features(&mut rng, n, width);
                    let b = Tensor::matrix(n, width, a.data().iter().enumerate().map(|(i, x)| x * (1.0 + 3.0 * (i / width) as f64)).collect())?;
                    (a, b)
                }
            };
            let mut fixed_worst: f64 = 0.0;
            for fixed in MpKind::FIXED {
                let mut r = rng::substream(seed, streams::INFLUENCE, fixed as u64);
                let (store, stack) = stack_with_weights(fixed, k, width, Activation::Identity, &mut r, false);
                let da = normalize(&influence_scores(&stack, &store, &graph, &xa, center)?);
                let db = normalize(&influence_scores(&stack, &store, &graph, &xb, center)?);
                let tv = total_variation(&da, &db);
                summary.push((format!("tv_{fixed}"), tv));
                fixed_worst = fixed_worst.max(tv);
            }
            let (store, stack) = stack_with_weights(kind, k, width, Activation::Identity, &mut rng, false);
            let da = normalize(&influence_scores(&stack, &store, &graph, &xa, center)?);
            let db = normalize(&influence_scores(&stack, &store, &graph, &xb, center)?);
            let tv = total_variation(&da, &db);
            let sensitive = if kind.is_fixed() { tv <= IDENTICAL_TOLERANCE } else { tv >= CONTRAST_THRESHOLD };
            (da, db, tv, fixed_worst <= IDENTICAL_TOLERANCE && sensitive)
        }
    };
    Ok(InfluenceReport {
        graph: spec.name.clone(),
        kind,
        mode,
        depth: k,
        center,
        influence,
        oracle,
        tv,
        summary,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walk_oracle_basics() {
        let c = vec![0.5, 0.5, 0.5, 0.5];
        assert_eq!(random_walk_distribution(&c, 2, 0, 1), vec![0.0, 1.0]);
        assert_eq!(random_walk_distribution(&c, 2, 2, 0), vec![0.5, 0.5]);
        let g = GraphSpec::cycle(5);
        let c = conv_matrix(MpKind::Gin, 5, &g.graph().dense_adjacency(), None).unwrap();
        for k in 0..6 {
            let p = random_walk_distribution(&c, 5, k, 2);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn builtin_specs() {
        assert_eq!(GraphSpec::resolve("path-4").unwrap().edges, vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(GraphSpec::resolve("cycle-5").unwrap().edges.len(), 5);
        assert_eq!(GraphSpec::resolve("star-5").unwrap().edges.len(), 4);
        assert!(GraphSpec::resolve("asymmetric").unwrap().features.is_some());
        assert!(matches!(GraphSpec::resolve("blob-3"), Err(InfluenceError::UnknownGraph(_))));
        let g = GraphSpec::parse_edge_list("f", "# tri\n0 1\n1 2\n2 0\n").unwrap();
        assert_eq!((g.nodes, g.edges.len()), (3, 3));
        assert!(GraphSpec::parse_edge_list("f", "0 x\n").is_err());
    }

    fn store_stack(kind: MpKind, depth: usize) -> (ParamStore, GnnStack, Tensor, MpGraph) {
        let mut r = rng::stream(8, streams::INFLUENCE);
        let (store, stack) = stack_with_weights(kind, depth, 3, Activation::Relu, &mut r, false);
        let g = MpGraph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (1, 3)]);
        let x = random_features(&mut r, 5, 3);
        (store, stack, x, g)
    }

    #[test]
    fn isolated_node_has_no_influence_on_others() {
        for kind in MpKind::ALL {
            let (store, stack, x, g) = store_stack(kind, 3);
            let s = influence_scores(&stack, &store, &g, &x, 4).unwrap();
            assert!(s[..4].iter().all(|&v| v == 0.0), "{kind}");
        }
    }

    #[test]
    fn depth_zero_is_point_mass() {
        let (store, stack, x, g) = store_stack(MpKind::Gcn, 0);
        assert_eq!(normalize(&influence_scores(&stack, &store, &g, &x, 2).unwrap()), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_backward_equals_jacobian_sum() {
        for kind in MpKind::ALL {
            let (store, stack, x, g) = store_stack(kind, 2);
            let fast = influence_scores(&stack, &store, &g, &x, 1).unwrap();
            let jac = influence_jacobian(&stack, &store, &g, &x, 1).unwrap();
            let mut slow = vec![0.0; 5];
            for row in &jac {
                for (s, r) in slow.iter_mut().zip(row_sums(row, 3)) {
                    *s += r;
                }
            }
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn support_is_k_hop_neighborhood() {
        let g = GraphSpec::path(6);
        for kind in MpKind::ALL {
            let mut r = rng::stream(1, streams::INFLUENCE);
            let (store, stack) = stack_with_weights(kind, 2, 3, Activation::Identity, &mut r, true);
            let x = random_features(&mut r, 6, 3);
            let s = influence_scores(&stack, &store, &g.graph(), &x, 0).unwrap();
            assert!(s[3..].iter().all(|&v| v == 0.0), "{kind}");
            assert!(s[..3].iter().all(|&v| v != 0.0), "{kind}");
        }
    }

    #[test]
    fn exact_mode_on_path() {
        let r = verify_corollary(MpKind::Sgc, &GraphSpec::path(4), 2, 1, 0, InfluenceMode::ExactLinear, 0).unwrap();
        assert!(r.passed && r.tv < 1e-9);
        let r = verify_corollary(MpKind::Gin, &GraphSpec::star(5), 3, 1, 4, InfluenceMode::ExactLinear, 2).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn exact_mode_rejects_attention() {
        assert!(matches!(
            verify_corollary(MpKind::Gat, &GraphSpec::path(4), 2, 1, 0, InfluenceMode::ExactLinear, 0),
            Err(InfluenceError::LearnableLayer { .. })
        ));
    }

    #[test]
    fn contrast_on_asymmetric_gadget() {
        let r = verify_corollary(MpKind::Gat, &GraphSpec::asymmetric(), 2, 1, 0, InfluenceMode::GatContrast, 0).unwrap();
        assert!(r.passed, "{r}");
        assert!(r.tv >= CONTRAST_THRESHOLD);
        let r = verify_corollary(MpKind::Sage, &GraphSpec::asymmetric(), 2, 1, 0, InfluenceMode::GatContrast, 0).unwrap();
        assert_eq!(r.tv, 0.0);
    }

    #[test]
    fn statistical_mode_reports_trend() {
        let r = verify_corollary(MpKind::Gcn, &GraphSpec::cycle(5), 2, 16, 3, InfluenceMode::StatisticalRelu, 0).unwrap();
        assert!(r.passed, "{r}");
        assert!(r.summary.iter().any(|(k, _)| k == "tv_signed"));
        assert!((r.influence.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
