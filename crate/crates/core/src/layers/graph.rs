use std::sync::Arc;

use crate::relnet::{RelationNetwork, Subgraph};
use crate::tensor::SparsePattern;

use super::{LayerError, MpKind};

/// Closed-neighborhood structure consumed by message-passing layers.
///
/// Row `i` lists `N(i) ∪ {i}` in ascending order. `norm_degree[i]` is the
/// self-loop-augmented degree used for normalization; for subgraphs cut from a
/// larger network it is the parent degree + 1, so interior rows normalize
/// exactly as they would in the full network.
#[derive(Debug, Clone, PartialEq)]
pub struct MpGraph {
    closed: Arc<SparsePattern>,
    norm_degree: Vec<f64>,
}

impl MpGraph {
    /// From sorted, symmetric CSR adjacency without self-edges. `degrees`
    /// overrides the local degree used for normalization.
    pub fn from_csr(offsets: &[usize], neighbors: &[u32], degrees: Option<&[usize]>) -> Self {
        let n = offsets.len() - 1;
        let mut rows = Vec::with_capacity(neighbors.len() + n);
        let mut cols = Vec::with_capacity(neighbors.len() + n);
        for i in 0..n {
            let ns = &neighbors[offsets[i]..offsets[i + 1]];
            let split = ns.partition_point(|&v| (v as usize) < i);
            for &v in &ns[..split] {
                rows.push(i);
                cols.push(v as usize);
            }
            rows.push(i);
            cols.push(i);
            for &v in &ns[split..] {
                rows.push(i);
                cols.push(v as usize);
            }
        }
        let norm_degree = (0..n)
            .map(|i| {
                let d = degrees.map_or(offsets[i + 1] - offsets[i], |d| d[i]);
                (d + 1) as f64
            })
            .collect();
        let closed = SparsePattern::new(n, n, rows, cols).expect("rows are emitted in order");
        Self {
            closed: Arc::new(closed),
            norm_degree,
        }
    }

    pub fn from_network(net: &RelationNetwork) -> Self {
        let neighbors: Vec<u32> = (0..net.node_count()).flat_map(|v| net.neighbors(v).iter().copied()).collect();
        Self::from_csr(net.offsets(), &neighbors, None)
    }

    pub fn from_subgraph(sub: &Subgraph) -> Self {
        Self::from_csr(&sub.offsets, &sub.neighbors, Some(&sub.parent_degree))
    }

    /// From an undirected edge list. Duplicates and self-pairs are ignored.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u != v {
                adj[u].push(v as u32);
                adj[v].push(u as u32);
            }
        }
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        for mut l in adj {
            l.sort_unstable();
            l.dedup();
            neighbors.extend(l);
            offsets.push(neighbors.len());
        }
        Self::from_csr(&offsets, &neighbors, None)
    }

    /// Disjoint union; returns the graph and each part's first node id.
    pub fn block_diagonal(parts: &[MpGraph]) -> (MpGraph, Vec<usize>) {
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut norm_degree = Vec::new();
        let mut starts = Vec::with_capacity(parts.len());
        let mut base = 0;
        for p in parts {
            starts.push(base);
            rows.extend(p.closed.rows().iter().map(|r| r + base));
            cols.extend(p.closed.cols().iter().map(|c| c + base));
            norm_degree.extend_from_slice(&p.norm_degree);
            base += p.node_count();
        }
        let closed = SparsePattern::new(base, base, rows, cols).expect("parts are emitted in order");
        (
            MpGraph {
                closed: Arc::new(closed),
                norm_degree,
            },
            starts,
        )
    }

    pub fn node_count(&self) -> usize {
        self.norm_degree.len()
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.closed
    }

    pub fn norm_degree(&self) -> &[f64] {
        &self.norm_degree
    }

    /// Number of closed-neighborhood entries (`2|E| + n`).
    pub fn nnz(&self) -> usize {
        self.closed.nnz()
    }

    /// Per-entry weights of the structure-only convolution matrix. `None` for
    /// attention, whose weights depend on features.
    pub fn fixed_weights(&self, kind: MpKind) -> Option<Vec<f64>> {
        let d = &self.norm_degree;
        let entries = self.closed.rows().iter().zip(self.closed.cols());
        match kind {
            MpKind::Gcn | MpKind::Sgc => Some(entries.map(|(&i, &j)| 1.0 / (d[i] * d[j]).sqrt()).collect()),
            MpKind::Sage => Some(entries.map(|(&i, _)| 1.0 / d[i]).collect()),
            MpKind::Gin => Some(vec![1.0; self.nnz()]),
            MpKind::Gat => None,
        }
    }

    /// Dense `n×n` adjacency (no self loops), row-major.
    pub fn dense_adjacency(&self) -> Vec<f64> {
        let n = self.node_count();
        let mut a = vec![0.0; n * n];
        for (&i, &j) in self.closed.rows().iter().zip(self.closed.cols()) {
            if i != j {
                a[i * n + j] = 1.0;
            }
        }
        a
    }
}

/// Attention inputs for a dense convolution matrix: node features (`n×f`),
/// transform `Θ` (`f×f`) and the two halves of the attention vector.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a> {
    pub features: &'a [f64],
    pub width: usize,
    pub theta: &'a [f64],
    pub att_self: &'a [f64],
    pub att_neighbor: &'a [f64],
}

/// Dense convolution matrix for a symmetric `n×n` adjacency with zero
/// diagonal. Reference implementation kept independent of the sparse path.
pub fn conv_matrix(kind: MpKind, n: usize, adjacency: &[f64], attention: Option<AttentionInputs<'_>>) -> Result<Vec<f64>, LayerError> {
    assert_eq!(adjacency.len(), n * n, "adjacency must be n×n");
    for i in 0..n {
        for j in 0..n {
            if adjacency[i * n + j] != adjacency[j * n + i] || (i == j && adjacency[i * n + i] != 0.0) {
                return Err(LayerError::AsymmetricAdjacency { row: i, col: j });
            }
        }
    }
    let mut closed = adjacency.to_vec();
    for i in 0..n {
        closed[i * n + i] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| closed[i * n..(i + 1) * n].iter().sum()).collect();
    let mut c = vec![0.0; n * n];
    match kind {
        MpKind::Gcn | MpKind::Sgc => {
            for i in 0..n {
                for j in 0..n {
                    c[i * n + j] = closed[i * n + j] / (deg[i] * deg[j]).sqrt();
                }
            }
        }
        MpKind::Sage => {
            for i in 0..n {
                for j in 0..n {
                    c[i * n + j] = closed[i * n + j] / deg[i];
                }
            }
        }
        MpKind::Gin => c = closed,
        MpKind::Gat => {
            let att = attention.ok_or(LayerError::MissingFeatures)?;
            let f = att.width;
            let mut proj = vec![0.0; n * f];
            for i in 0..n {
                for k in 0..f {
                    let x = att.features[i * f + k];
                    for j in 0..f {
                        proj[i * f + j] += x * att.theta[k * f + j];
                    }
                }
            }
            let dot = |row: usize, a: &[f64]| (0..f).map(|k| proj[row * f + k] * a[k]).sum::<f64>();
            for i in 0..n {
                let s_i = dot(i, att.att_self);
                let logits: Vec<(usize, f64)> = (0..n)
                    .filter(|&j| closed[i * n + j] != 0.0)
                    .map(|j| (j, s_i + dot(j, att.att_neighbor)))
                    .collect();
                let m = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l.1 - m).exp()).sum();
                for (j, l) in logits {
                    c[i * n + j] = (l - m).exp() / z;
                }
            }
        }
    }
    Ok(c)
}
