//! Training: the mutual-information (or margin baseline) encoder phase, then
//! a logistic-regression fit of the classifier head on frozen embeddings.

use std::collections::{HashMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::kg::{KnowledgeGraph, Triple};
use crate::layers::MpGraph;
use crate::leim::{self, EdgeBatch, MiEstimator};
use crate::params::Binding;
use crate::relnet::{Overlay, RelationNetwork};
use crate::rng::{self, streams, Rng};
use crate::tensor::{Adam, AdamConfig, Segments, Tape, Tensor, Var};

use super::infer::{embed_queries, Query};
use super::{Model, PipelineError, TrainConfig};

/// Rows per tape when embedding classifier examples.
const CHUNK: usize = 256;

/// Upper bound on `scored edges × dim` per step. Batches whose discriminator
/// inputs would exceed it are split.
pub const EDGE_FLOAT_BUDGET: usize = 1 << 24;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean step loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Final cross-entropy of the classifier fit.
    pub classifier_loss: f64,
}

/// Batches of a seeded permutation of `0..n`; a trailing singleton is merged
/// into the previous batch so every batch can be paired.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, streams::SHUFFLE, epoch as u64));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(2)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Replaces the head or the tail (uniformly) by a uniform entity until the
/// result is not a known triple. Gives up after a bounded number of draws.
pub fn corrupt(triple: Triple, entity_count: usize, known: &HashSet<Triple>, rng: &mut Rng) -> Triple {
    let mut out = triple;
    for _ in 0..64 {
        let e = rng.random_range(0..entity_count);
        out = if rng.random_bool(0.5) {
            Triple::new(e, triple.rel, triple.tail)
        } else {
            Triple::new(triple.head, triple.rel, e)
        };
        if !known.contains(&out) {
            break;
        }
    }
    out
}

/// Message-passing view of the nodes a batch needs: the whole network, or the
/// union of the batch's k-hop neighborhoods.
struct Scope {
    graph: MpGraph,
    nodes: Vec<usize>,
    local: Option<HashMap<usize, usize>>,
}

impl Scope {
    fn local(&self, v: usize) -> usize {
        self.local.as_ref().map_or(v, |m| m[&v])
    }
}

struct Trainer<'a> {
    kg: &'a KnowledgeGraph,
    net: RelationNetwork,
    full: Option<MpGraph>,
    known: HashSet<Triple>,
    cfg: TrainConfig,
    /// Ego-graph edge count of every node.
    ego_edges: Vec<usize>,
}

impl<'a> Trainer<'a> {
    fn new(kg: &'a KnowledgeGraph, cfg: &TrainConfig) -> Self {
        let net = RelationNetwork::build(kg, cfg.mask, cfg.degree_cap, cfg.seed);
        let full = (net.node_count() <= cfg.full_batch_limit).then(|| MpGraph::from_network(&net));
        let ego_edges = (0..net.node_count())
            .map(|v| net.ego_graph(v, cfg.depth).map_or(0, |e| e.edges.len()))
            .collect();
        Self {
            kg,
            net,
            full,
            known: kg.triples().iter().copied().collect(),
            cfg: cfg.clone(),
            ego_edges,
        }
    }

    /// Splits a batch so the discriminator scores at most
    /// [`EDGE_FLOAT_BUDGET`]` / dim` edges. InfoNCE scores every ego graph of
    /// a batch once per anchor, so its cost grows with the batch size itself.
    fn fit_budget(&self, batch: Vec<usize>) -> Vec<Vec<usize>> {
        if self.cfg.estimator == MiEstimator::NaiveNs {
            return vec![batch];
        }
        let limit = EDGE_FLOAT_BUDGET / self.cfg.dim.max(1);
        let rows = |len: usize, edges: usize| match self.cfg.estimator {
            MiEstimator::InfoNce => len * edges,
            _ => 2 * edges,
        };
        let mut out: Vec<Vec<usize>> = Vec::new();
        let (mut cur, mut edges) = (Vec::new(), 0);
        for v in batch {
            let e = self.ego_edges[v];
            if cur.len() >= 2 && rows(cur.len() + 1, edges + e) > limit {
                out.push(std::mem::take(&mut cur));
                edges = 0;
            }
            cur.push(v);
            edges += e;
        }
        if cur.len() == 1 && !out.is_empty() {
            out.last_mut().expect("non-empty").append(&mut cur);
        } else if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    fn scope(&self, batch: &[usize]) -> Scope {
        match &self.full {
            Some(g) => Scope {
                graph: g.clone(),
                nodes: (0..self.net.node_count()).collect(),
                local: None,
            },
            None => {
                let sub = Overlay::plain(&self.net).khop(batch, self.cfg.depth);
                let local = sub.nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
                Scope {
                    graph: MpGraph::from_subgraph(&sub),
                    nodes: sub.nodes,
                    local: Some(local),
                }
            }
        }
    }

    fn triples_of(&self, nodes: &[usize]) -> Vec<Triple> {
        nodes.iter().map(|&v| self.net.triple(v)).collect()
    }

    /// `−I` for one batch.
    fn mi_loss(&self, model: &Model, tape: &mut Tape, params: &Binding, batch: &[usize], rng: &mut Rng) -> Result<Var, PipelineError> {
        let ent = params.var(model.entity);
        let scope = self.scope(batch);
        let x = model.triple_features(tape, params, ent, &self.triples_of(&scope.nodes))?;
        let h = model.psi.forward(tape, params, &scope.graph, x)?;
        let anchors = tape.gather_rows(h, batch.iter().map(|&v| scope.local(v)).collect::<Vec<_>>())?;

        let egos = batch
            .iter()
            .map(|&v| self.net.ego_graph(v, self.cfg.depth))
            .collect::<Result<Vec<_>, _>>()?;
        let graphs: Vec<MpGraph> = egos
            .iter()
            .map(|e| MpGraph::from_edges(e.node_count(), &e.edges.iter().map(|&(i, j, _)| (i, j)).collect::<Vec<_>>()))
            .collect();
        let (block, starts) = MpGraph::block_diagonal(&graphs);
        let rows: Vec<usize> = egos.iter().flat_map(|e| e.nodes.iter().map(|&v| scope.local(v))).collect();
        let xe = tape.gather_rows(x, rows)?;
        let evidence = model.omega.forward(tape, params, &block, xe)?;

        let starts = &starts;
        let edges_of = |b: usize| egos[b].edges.iter().map(move |&(i, j, _)| (starts[b] + i, starts[b] + j));
        let mut pos = EdgeBatch::default();
        for a in 0..batch.len() {
            pos.push_query(edges_of(a), a);
        }
        let pairs = leim::pair_negatives(batch.len(), self.cfg.estimator, rng)?;
        let mut neg = EdgeBatch::default();
        let mut seg_ids = Vec::new();
        for (a, partners) in pairs.iter().enumerate() {
            for &b in partners {
                neg.push_query(edges_of(b), a);
                seg_ids.push(a);
            }
        }
        let t_pos = model.disc.scores(tape, params, evidence, anchors, &pos)?;
        let t_neg = model.disc.scores(tape, params, evidence, anchors, &neg)?;
        let mi = match self.cfg.estimator {
            MiEstimator::InfoNce => {
                let segments = Segments::from_ids(&seg_ids, batch.len())?;
                leim::infonce_mi(tape, t_pos, t_neg, &segments)?
            }
            _ => leim::jsd_mi(tape, t_pos, t_neg, self.cfg.jsd_as_printed)?,
        };
        Ok(tape.scale(mi, -1.0))
    }

    /// Margin ranking loss of classifier logits, true vs corrupted triples.
    fn margin_loss(&self, model: &Model, tape: &mut Tape, params: &Binding, batch: &[usize], rng: &mut Rng) -> Result<Var, PipelineError> {
        let ent = params.var(model.entity);
        let all: Vec<usize> = (0..self.net.node_count()).collect();
        let x_all = model.triple_features(tape, params, ent, &self.triples_of(&all))?;
        let pos = match &self.full {
            Some(g) => {
                let h = model.psi.forward(tape, params, g, x_all)?;
                tape.gather_rows(h, batch.to_vec())?
            }
            None => {
                let scope = self.scope(batch);
                let x = tape.gather_rows(x_all, scope.nodes.clone())?;
                let h = model.psi.forward(tape, params, &scope.graph, x)?;
                tape.gather_rows(h, batch.iter().map(|&v| scope.local(v)).collect::<Vec<_>>())?
            }
        };
        let queries: Vec<Query> = batch
            .iter()
            .map(|&v| Query::new(corrupt(self.net.triple(v), self.kg.entity_count(), &self.known, rng)))
            .collect();
        let neg = embed_queries(model, tape, params, &self.net, self.kg, x_all, ent, &queries)?;
        let pos = model.classifier_logits(tape, params, pos)?;
        let neg = model.classifier_logits(tape, params, neg)?;
        Ok(leim::naive_ns_loss(tape, pos, neg, self.cfg.margin)?)
    }
}

/// The training loss of one batch of `kg`'s relation network (`−I`, or the
/// margin loss), with negatives drawn from `seed`.
pub fn batch_objective(model: &Model, kg: &KnowledgeGraph, tape: &mut Tape, params: &Binding, batch: &[usize], seed: u64) -> Result<Var, PipelineError> {
    let trainer = Trainer::new(kg, model.config());
    let mut rng = rng::stream(seed, streams::NEGATIVES);
    match model.config().estimator {
        MiEstimator::NaiveNs => trainer.margin_loss(model, tape, params, batch, &mut rng),
        _ => trainer.mi_loss(model, tape, params, batch, &mut rng),
    }
}

/// Trains a model on `kg`. `on_epoch(epoch, mean_loss)` is called after every
/// epoch (1-based).
pub fn train(kg: &KnowledgeGraph, cfg: &TrainConfig, mut on_epoch: impl FnMut(usize, f64)) -> Result<TrainOutcome, PipelineError> {
    if kg.is_empty() {
        return Err(PipelineError::EmptyGraph);
    }
    let mut model = Model::for_graph(cfg.clone(), kg);
    let trainer = Trainer::new(kg, cfg);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let n = trainer.net.node_count();
    if cfg.epochs > 0 && n < 2 {
        return Err(leim::LeimError::BatchTooSmall(n).into());
    }
    for epoch in 1..=cfg.epochs {
        let mut neg_rng = rng::substream(cfg.seed, streams::NEGATIVES, epoch as u64);
        let mut total = 0.0;
        let batches: Vec<Vec<usize>> = epoch_batches(n, cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .flat_map(|b| trainer.fit_budget(b))
            .collect();
        for batch in &batches {
            let mut tape = Tape::new();
            let params = model.store.bind(&mut tape)?;
            let loss = match cfg.estimator {
                MiEstimator::NaiveNs => trainer.margin_loss(&model, &mut tape, &params, batch, &mut neg_rng)?,
                _ => trainer.mi_loss(&model, &mut tape, &params, batch, &mut neg_rng)?,
            };
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(PipelineError::Diverged { epoch });
            }
            total += value;
            tape.backward(loss)?;
            model.store.collect_grads(&tape, &params)?;
            adam.step(model.store.tensors_mut())?;
            model.store.zero_grads();
        }
        let mean = total / batches.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    let classifier_loss = train_classifier(&mut model, kg, &trainer.net)?;
    Ok(TrainOutcome {
        model,
        epoch_losses,
        classifier_loss,
    })
}

/// Fits the classifier head on frozen Ψ embeddings: every training triple (up
/// to `full_batch_limit`, sampled beyond that) against one corrupted copy.
/// Returns the final cross-entropy.
pub fn train_classifier(model: &mut Model, kg: &KnowledgeGraph, net: &RelationNetwork) -> Result<f64, PipelineError> {
    let cfg = model.config().clone();
    let n = net.node_count();
    let mut rng = rng::stream(cfg.seed, streams::CORRUPTION);
    let mut ids: Vec<usize> = if n <= cfg.full_batch_limit {
        (0..n).collect()
    } else {
        index::sample(&mut rng, n, cfg.full_batch_limit).into_vec()
    };
    ids.sort_unstable();
    let known: HashSet<Triple> = kg.triples().iter().copied().collect();
    let f = model.dim();

    // Node features and positive embeddings, no gradients needed.
    let entities = model.store.get(model.entity).clone();
    let mut base = Vec::with_capacity(n * f);
    for chunk in net.triples().chunks(CHUNK) {
        let mut tape = Tape::new();
        let params = model.store.bind(&mut tape)?;
        let ent = tape.leaf(&entities)?;
        let x = model.triple_features(&mut tape, &params, ent, chunk)?;
        base.extend_from_slice(tape.value(x));
    }
    let base = Tensor::matrix(n, f, base)?;

    let mut features = Vec::with_capacity(2 * ids.len() * f);
    let mut labels = Vec::with_capacity(2 * ids.len());
    for chunk in ids.chunks(CHUNK) {
        let mut tape = Tape::new();
        let params = model.store.bind(&mut tape)?;
        let x = tape.leaf(&base)?;
        let sub = Overlay::plain(net).khop(chunk, model.psi.depth());
        let local: HashMap<usize, usize> = sub.nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let xs = tape.gather_rows(x, sub.nodes.clone())?;
        let h = model.psi.forward(&mut tape, &params, &MpGraph::from_subgraph(&sub), xs)?;
        let pos = tape.gather_rows(h, chunk.iter().map(|v| local[v]).collect::<Vec<_>>())?;
        features.extend_from_slice(tape.value(pos));
        labels.extend(std::iter::repeat_n(true, chunk.len()));

        let queries: Vec<Query> = chunk
            .iter()
            .map(|&v| Query::new(corrupt(net.triple(v), kg.entity_count(), &known, &mut rng)))
            .collect();
        let ent = tape.leaf(&entities)?;
        let neg = embed_queries(model, &mut tape, &params, net, kg, x, ent, &queries)?;
        features.extend_from_slice(tape.value(neg));
        labels.extend(std::iter::repeat_n(false, chunk.len()));
    }
    let fit = fit_logistic(&features, &labels, f, cfg.classifier_epochs, cfg.classifier_lr)?;
    model.store.get_mut(model.cls_weight).data_mut().copy_from_slice(&fit.weight);
    model.store.get_mut(model.cls_bias).data_mut()[0] = fit.bias;
    Ok(fit.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weight: Vec<f64>,
    pub bias: f64,
    pub loss: f64,
}

impl LogisticFit {
    pub fn probability(&self, x: &[f64]) -> f64 {
        crate::tensor::kernels::sigmoid(crate::tensor::kernels::dot(&self.weight, x) + self.bias)
    }
}

/// Full-batch Adam fit of `sigmoid(w·x + b)` by binary cross-entropy, from
/// `w = 0, b = 0`. `features` is row-major with `width` columns.
pub fn fit_logistic(features: &[f64], labels: &[bool], width: usize, epochs: usize, lr: f64) -> Result<LogisticFit, PipelineError> {
    let m = labels.len();
    let mut w = Tensor::zeros(width, 1).trainable();
    let mut b = Tensor::zeros(1, 1).trainable();
    let x = Tensor::matrix(m, width, features.to_vec())?;
    // Per-row sign: the loss is softplus(−y·z) with y = ±1.
    let signs: Vec<f64> = labels.iter().map(|&y| if y { -1.0 } else { 1.0 }).collect();
    let mut adam = Adam::new(AdamConfig {
        lr,
        ..AdamConfig::default()
    });
    let mut loss = f64::NAN;
    for step in 0..=epochs {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x)?;
        let wv = tape.leaf(&w)?;
        let bv = tape.leaf(&b)?;
        let s = tape.constant(m, 1, signs.clone())?;
        let z = tape.matmul(xv, wv)?;
        let z = tape.add(z, bv)?;
        let z = tape.mul(z, s)?;
        let l = tape.softplus(z);
        let l = tape.mean(l);
        loss = tape.scalar_value(l);
        if step == epochs {
            break;
        }
        tape.backward(l)?;
        w.zero_grad();
        b.zero_grad();
        w.accumulate_grad(tape.grad(wv).expect("connected"))?;
        b.accumulate_grad(tape.grad(bv).expect("connected"))?;
        adam.step([&mut w, &mut b])?;
    }
    Ok(LogisticFit {
        weight: w.data().to_vec(),
        bias: b.data()[0],
        loss,
    })
}
