//! Inference cost: the closed-form estimate and an incremental Ψ engine that
//! counts the multiply-accumulates it actually performs.
//!
//! The engine caches every layer of Ψ over a fixed network. Inserting one
//! scratch node `s` only changes layer-`l` outputs of nodes within distance
//! `l` of `s` (one more hop for the symmetric GCN normalization), and layer
//! `l` is only needed for nodes within distance `L − l`. Layer-1 neighbors
//! are updated from cached aggregates in O(f); everything else that changed
//! is recomputed aggregate-first.

use std::collections::{BTreeMap, HashMap};

use crate::kg::{KnowledgeGraph, Triple};
use crate::layers::{Activation, LayerParams, MpKind};
use crate::relnet::RelationNetwork;
use crate::tensor::{kernels, Tape, Tensor};

use super::infer::InferenceContext;
use super::{Model, PipelineError};

/// Predicted multiply-accumulates for `b` inductive queries:
/// `3bf² + b·d^L·f + b·L·f²`.
pub fn estimate_inference_cost(f: usize, mean_degree: f64, depth: usize, b: usize) -> f64 {
    let (f, b) = (f as f64, b as f64);
    3.0 * b * f * f + b * mean_degree.powi(depth as i32) * f + b * depth as f64 * f * f
}

/// Dense `x·W` for one row with `W` of shape `x.len() × out`.
fn row_times(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (i, &xi) in x.iter().enumerate() {
        for (yk, &wk) in y.iter_mut().zip(&w[i * out..(i + 1) * out]) {
            *yk += xi * wk;
        }
    }
    y
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Cached state of one layer over the base network.
#[derive(Debug, Clone)]
struct LayerCache {
    /// `n×f` transformed inputs `H·W` (`H·Θ` for attention, `H` for SGC).
    /// Empty for GIN.
    proj: Vec<f64>,
    /// `n×f` aggregate before the transform/activation of this layer: the
    /// weighted neighbor sum of `proj` (of the input, for GIN).
    agg: Vec<f64>,
    /// `n×f` layer output.
    out: Vec<f64>,
    /// Attention logit halves and per-row softmax max and normalizer.
    s_self: Vec<f64>,
    s_nbr: Vec<f64>,
    row_max: Vec<f64>,
    row_sum: Vec<f64>,
    /// `Θ·a_self`, `Θ·a_nbr` for logits straight from layer inputs.
    q_self: Vec<f64>,
    q_nbr: Vec<f64>,
}

/// Result of one incremental query.
#[derive(Debug, Clone, PartialEq)]
pub struct CountedEmbedding {
    pub embedding: Vec<f64>,
    /// Multiply-accumulates spent in the combiner for the query triple.
    pub combiner_macs: u64,
    /// Multiply-accumulates spent in Ψ.
    pub propagation_macs: u64,
}

impl CountedEmbedding {
    pub fn macs(&self) -> u64 {
        self.combiner_macs + self.propagation_macs
    }
}

/// Ψ over a fixed network with cached layers, answering single-node
/// insertions exactly.
#[derive(Debug, Clone)]
pub struct IncrementalPsi<'a> {
    model: &'a Model,
    net: &'a RelationNetwork,
    kg: &'a KnowledgeGraph,
    entities: Tensor,
    features: Vec<f64>,
    degree: Vec<f64>,
    layers: Vec<LayerCache>,
}

enum Weights<'a> {
    Linear(&'a [f64]),
    Mlp(&'a [f64], &'a [f64]),
    Propagate,
    Attention { theta: &'a [f64], a_self: &'a [f64], a_nbr: &'a [f64] },
}

impl<'a> IncrementalPsi<'a> {
    /// Builds the caches. `features` are the combiner outputs of every node
    /// of `net` (`n×f`), `entities` the rows `kg`'s entity ids index into.
    pub fn new(model: &'a Model, net: &'a RelationNetwork, kg: &'a KnowledgeGraph, entities: Tensor, features: &[f64]) -> Self {
        let n = net.node_count();
        let f = model.dim();
        let degree: Vec<f64> = (0..n).map(|v| (net.degree(v) + 1) as f64).collect();
        let mut this = Self {
            model,
            net,
            kg,
            entities,
            features: features.to_vec(),
            degree,
            layers: Vec::new(),
        };
        let mut input = features.to_vec();
        for l in 0..model.psi.depth() {
            let w = this.weights(l);
            let mut c = LayerCache {
                proj: Vec::new(),
                agg: vec![0.0; n * f],
                out: vec![0.0; n * f],
                s_self: Vec::new(),
                s_nbr: Vec::new(),
                row_max: Vec::new(),
                row_sum: Vec::new(),
                q_self: Vec::new(),
                q_nbr: Vec::new(),
            };
            c.proj = match w {
                Weights::Linear(w) | Weights::Attention { theta: w, .. } => input.chunks(f).flat_map(|x| row_times(x, w, f)).collect(),
                Weights::Propagate => input.clone(),
                Weights::Mlp(..) => Vec::new(),
            };
            if let Weights::Attention { theta, a_self, a_nbr } = w {
                c.s_self = c.proj.chunks(f).map(|p| kernels::dot(p, a_self)).collect();
                c.s_nbr = c.proj.chunks(f).map(|p| kernels::dot(p, a_nbr)).collect();
                c.q_self = row_times_t(theta, a_self, f);
                c.q_nbr = row_times_t(theta, a_nbr, f);
                c.row_max = vec![0.0; n];
                c.row_sum = vec![0.0; n];
            }
            for v in 0..n {
                let closed: Vec<usize> = this.base_closed(v);
                let agg = &mut c.agg[v * f..(v + 1) * f];
                match w {
                    Weights::Mlp(..) => closed.iter().for_each(|&j| axpy(agg, 1.0, &input[j * f..(j + 1) * f])),
                    Weights::Attention { .. } => {
                        let logits: Vec<f64> = closed.iter().map(|&j| c.s_self[v] + c.s_nbr[j]).collect();
                        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = logits.iter().map(|e| (e - m).exp()).sum();
                        for (&j, e) in closed.iter().zip(&logits) {
                            axpy(agg, (e - m).exp() / s, &c.proj[j * f..(j + 1) * f]);
                        }
                        c.row_max[v] = m;
                        c.row_sum[v] = s;
                    }
                    _ => {
                        for &j in &closed {
                            let coef = this.coef(this.degree[v], this.degree[j]);
                            axpy(agg, coef, &c.proj[j * f..(j + 1) * f]);
                        }
                    }
                }
                let out = this.finish(l, &c.agg[v * f..(v + 1) * f], &mut 0);
                c.out[v * f..(v + 1) * f].copy_from_slice(&out);
            }
            input = c.out.clone();
            this.layers.push(c);
        }
        this
    }

    pub fn from_context(model: &'a Model, ctx: &'a InferenceContext) -> Self {
        Self::new(model, &ctx.net, &ctx.kg, ctx.entities().clone(), ctx.features().data())
    }

    fn weights(&self, l: usize) -> Weights<'a> {
        let store = &self.model.store;
        match self.model.psi.layers()[l] {
            LayerParams::Linear { weight } => Weights::Linear(store.get(weight).data()),
            LayerParams::Mlp { inner, outer } => Weights::Mlp(store.get(inner).data(), store.get(outer).data()),
            LayerParams::Propagate => Weights::Propagate,
            LayerParams::Attention { theta, att_self, att_neighbor } => Weights::Attention {
                theta: store.get(theta).data(),
                a_self: store.get(att_self).data(),
                a_nbr: store.get(att_neighbor).data(),
            },
        }
    }

    fn kind(&self) -> MpKind {
        self.model.psi.kind()
    }

    /// Fixed-family coefficient between rows with normalized degrees `di`, `dj`.
    fn coef(&self, di: f64, dj: f64) -> f64 {
        match self.kind() {
            MpKind::Gcn | MpKind::Sgc => 1.0 / (di * dj).sqrt(),
            MpKind::Sage => 1.0 / di,
            _ => 1.0,
        }
    }

    fn base_closed(&self, v: usize) -> Vec<usize> {
        let mut c: Vec<usize> = self.net.neighbors(v).iter().map(|&u| u as usize).collect();
        c.push(v);
        c.sort_unstable();
        c
    }

    /// Transform (GIN, or deferred aggregate-first transforms) and activation
    /// of an aggregate. `deferred` selects `agg·W` for the linear families.
    fn finish_with(&self, l: usize, agg: &[f64], deferred: bool, macs: &mut u64) -> Vec<f64> {
        let f = self.model.dim();
        let mut z = match self.weights(l) {
            Weights::Mlp(inner, outer) => {
                let mut h = row_times(agg, inner, f);
                if self.model.psi.activation() == Activation::Relu {
                    h.iter_mut().for_each(|x| *x = x.max(0.0));
                }
                *macs += 2 * (f * f) as u64;
                row_times(&h, outer, f)
            }
            Weights::Linear(w) | Weights::Attention { theta: w, .. } if deferred => {
                *macs += (f * f) as u64;
                row_times(agg, w, f)
            }
            _ => agg.to_vec(),
        };
        if l + 1 < self.model.psi.depth() && self.model.psi.activation() == Activation::Relu {
            z.iter_mut().for_each(|x| *x = x.max(0.0));
        }
        z
    }

    fn finish(&self, l: usize, agg: &[f64], macs: &mut u64) -> Vec<f64> {
        self.finish_with(l, agg, false, macs)
    }

    /// Ψ embedding of `triple` inserted as a scratch node, with its counts.
    pub fn embed(&self, triple: Triple) -> Result<CountedEmbedding, PipelineError> {
        let f = self.model.dim();
        let depth = self.model.psi.depth();
        let n = self.net.node_count();
        let s = n;

        let mut tape = Tape::new();
        let params = self.model.store.bind(&mut tape)?;
        let ent = tape.leaf(&self.entities)?;
        let before = tape.macs();
        let x = self.model.triple_features(&mut tape, &params, ent, &[triple])?;
        let combiner_macs = tape.macs() - before;
        let x_s = tape.value(x).to_vec();
        if depth == 0 {
            return Ok(CountedEmbedding {
                embedding: x_s,
                combiner_macs,
                propagation_macs: 0,
            });
        }

        let mut nbrs: Vec<usize> = self.net.links_for(triple, self.kg, None).iter().map(|&(u, _)| u as usize).collect();
        nbrs.sort_unstable();
        let is_nbr = |v: usize| nbrs.binary_search(&v).is_ok();
        let closed = |v: usize| -> Vec<usize> {
            if v == s {
                let mut c = nbrs.clone();
                c.push(s);
                c
            } else {
                let mut c = self.base_closed(v);
                if is_nbr(v) {
                    c.push(s);
                }
                c
            }
        };
        let degree = |v: usize| -> f64 {
            if v == s {
                (nbrs.len() + 1) as f64
            } else {
                self.degree[v] + f64::from(u8::from(is_nbr(v)))
            }
        };

        // Distances from the scratch node, as far as any layer needs.
        let mut dist: BTreeMap<usize, usize> = BTreeMap::from([(s, 0)]);
        let mut frontier = vec![s];
        for d in 1..depth {
            let mut next = Vec::new();
            for &v in &frontier {
                let around: Vec<usize> = if v == s { nbrs.clone() } else { closed(v) };
                for u in around {
                    if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(u) {
                        e.insert(d);
                        next.push(u);
                    }
                }
            }
            frontier = next;
        }
        let reach = match self.kind() {
            MpKind::Gcn | MpKind::Sgc => 1,
            _ => 0,
        };

        let mut macs = 0u64;
        // Layer-(l−1) values of changed nodes; everything else is cached.
        let mut changed: HashMap<usize, Vec<f64>> = HashMap::from([(s, x_s.clone())]);
        for l in 0..depth {
            let cache = &self.layers[l];
            let w = self.weights(l);
            let input = |v: usize, changed: &HashMap<usize, Vec<f64>>| -> Vec<f64> {
                match changed.get(&v) {
                    Some(x) => x.clone(),
                    None if l == 0 => self.features[v * f..(v + 1) * f].to_vec(),
                    None => self.layers[l - 1].out[v * f..(v + 1) * f].to_vec(),
                }
            };
            // The scratch projection, shared by every first-layer update.
            let p_s = match w {
                Weights::Linear(m) | Weights::Attention { theta: m, .. } if l == 0 => {
                    macs += (f * f) as u64;
                    Some(row_times(&x_s, m, f))
                }
                Weights::Propagate if l == 0 => Some(x_s.clone()),
                _ => None,
            };
            let (sn_s, ss_s) = match (&w, &p_s) {
                (Weights::Attention { a_self, a_nbr, .. }, Some(p)) => {
                    macs += 2 * f as u64;
                    (kernels::dot(p, a_nbr), kernels::dot(p, a_self))
                }
                _ => (0.0, 0.0),
            };

            let mut next = HashMap::new();
            for (&v, &dv) in &dist {
                if dv > depth - 1 - l || (v != s && dv > l + 1 + reach) {
                    continue;
                }
                let agg_out: Vec<f64> = if l == 0 && v != s {
                    // Old neighbors' inputs are unchanged: update the cached aggregate.
                    let old = &cache.agg[v * f..(v + 1) * f];
                    match w {
                        Weights::Mlp(..) => {
                            let mut a = old.to_vec();
                            if is_nbr(v) {
                                axpy(&mut a, 1.0, &x_s);
                                macs += f as u64;
                            }
                            self.finish(l, &a, &mut macs)
                        }
                        Weights::Attention { .. } => {
                            let e = cache.s_self[v] + sn_s;
                            let (m, sum) = (cache.row_max[v], cache.row_sum[v]);
                            let m2 = m.max(e);
                            let keep = sum * (m - m2).exp();
                            let sum2 = keep + (e - m2).exp();
                            let mut a: Vec<f64> = old.iter().map(|x| x * keep / sum2).collect();
                            axpy(&mut a, (e - m2).exp() / sum2, p_s.as_ref().expect("first layer"));
                            macs += 2 * f as u64;
                            self.finish(l, &a, &mut macs)
                        }
                        _ => {
                            let (d_old, d_new) = (self.degree[v], degree(v));
                            let rho = match self.kind() {
                                MpKind::Sage => d_old / d_new,
                                _ => (d_old / d_new).sqrt(),
                            };
                            let mut a = old.to_vec();
                            if rho != 1.0 {
                                a.iter_mut().for_each(|x| *x *= rho);
                                macs += f as u64;
                            }
                            if !matches!(self.kind(), MpKind::Sage) {
                                // Terms whose other endpoint also gained a neighbor.
                                for j in self.base_closed(v) {
                                    if is_nbr(j) {
                                        let delta = self.coef(d_new, degree(j)) - rho * self.coef(d_old, self.degree[j]);
                                        axpy(&mut a, delta, &cache.proj[j * f..(j + 1) * f]);
                                        macs += f as u64;
                                    }
                                }
                            }
                            if is_nbr(v) {
                                axpy(&mut a, self.coef(d_new, degree(s)), p_s.as_ref().expect("first layer"));
                                macs += f as u64;
                            }
                            self.finish(l, &a, &mut macs)
                        }
                    }
                } else if l == 0 {
                    // The scratch row itself, from cached neighbor projections.
                    let mut a = vec![0.0; f];
                    match w {
                        Weights::Mlp(..) => {
                            for j in closed(s) {
                                axpy(&mut a, 1.0, &input(j, &changed));
                                macs += f as u64;
                            }
                        }
                        Weights::Attention { .. } => {
                            let cs = closed(s);
                            let logits: Vec<f64> = cs.iter().map(|&j| ss_s + if j == s { sn_s } else { cache.s_nbr[j] }).collect();
                            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = logits.iter().map(|e| (e - m).exp()).sum();
                            for (&j, e) in cs.iter().zip(&logits) {
                                let p = if j == s { p_s.as_deref().expect("first layer") } else { &cache.proj[j * f..(j + 1) * f] };
                                axpy(&mut a, (e - m).exp() / z, p);
                                macs += f as u64;
                            }
                        }
                        _ => {
                            for j in closed(s) {
                                let p = if j == s { p_s.as_deref().expect("first layer") } else { &cache.proj[j * f..(j + 1) * f] };
                                axpy(&mut a, self.coef(degree(s), degree(j)), p);
                                macs += f as u64;
                            }
                        }
                    }
                    self.finish(l, &a, &mut macs)
                } else {
                    // Aggregate-first over current inputs, then transform.
                    let cv = closed(v);
                    let mut a = vec![0.0; f];
                    match w {
                        Weights::Attention { .. } => {
                            let hv = input(v, &changed);
                            let self_logit = kernels::dot(&hv, &cache.q_self);
                            macs += f as u64;
                            let rows: Vec<Vec<f64>> = cv.iter().map(|&j| input(j, &changed)).collect();
                            let logits: Vec<f64> = rows.iter().map(|h| self_logit + kernels::dot(h, &cache.q_nbr)).collect();
                            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = logits.iter().map(|e| (e - m).exp()).sum();
                            for (h, e) in rows.iter().zip(&logits) {
                                axpy(&mut a, (e - m).exp() / z, h);
                            }
                            macs += 2 * (f * cv.len()) as u64;
                        }
                        _ => {
                            for &j in &cv {
                                axpy(&mut a, self.coef(degree(v), degree(j)), &input(j, &changed));
                                macs += f as u64;
                            }
                        }
                    }
                    self.finish_with(l, &a, true, &mut macs)
                };
                next.insert(v, agg_out);
            }
            changed = next;
        }
        Ok(CountedEmbedding {
            embedding: changed.remove(&s).expect("scratch node computed"),
            combiner_macs,
            propagation_macs: macs,
        })
    }
}

/// `Θ·a` for `Θ` of shape `f×f` and `a` of length `f`.
fn row_times_t(theta: &[f64], a: &[f64], f: usize) -> Vec<f64> {
    (0..f).map(|i| kernels::dot(&theta[i * f..(i + 1) * f], a)).collect()
}
