//! Inductive inference: embed triples as scratch nodes of a relation network
//! without mutating it, and score them with the classifier head.

use crate::kg::{KgError, KnowledgeGraph, Triple};
use crate::layers::MpGraph;
use crate::params::Binding;
use crate::relnet::{Overlay, RelationNetwork};
use crate::tensor::{Axis, Tape, Tensor, Var};

use super::{Model, PipelineError};

/// Rows per tape when evaluating many nodes or queries.
const CHUNK: usize = 256;

/// A triple to embed as a scratch node. `hidden` removes one existing node
/// from the network for this query only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub triple: Triple,
    pub hidden: Option<usize>,
}

impl Query {
    pub fn new(triple: Triple) -> Self {
        Self { triple, hidden: None }
    }
}

/// Depth-`k` subgraphs of several scratch nodes laid out block-diagonally.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub graph: MpGraph,
    /// Source row of every block-graph node: `< n_base` is a network node,
    /// `n_base + i` is query `i`'s scratch node.
    pub rows: Vec<usize>,
    /// Block-graph row of each query's scratch node.
    pub centers: Vec<usize>,
}

impl QueryBatch {
    pub fn build(net: &RelationNetwork, kg: &KnowledgeGraph, queries: &[Query], depth: usize) -> Self {
        let n_base = net.node_count();
        let parts: Vec<(MpGraph, Vec<usize>)> = crate::par::map(queries, |q| {
            let links = net.links_for(q.triple, kg, q.hidden);
            let view = Overlay::new(net, Some(&links), q.hidden);
            let sub = view.khop(&[view.scratch_id()], depth);
            (MpGraph::from_subgraph(&sub), sub.nodes)
        });
        let mut rows = Vec::new();
        let mut graphs = Vec::with_capacity(parts.len());
        for (i, (g, nodes)) in parts.into_iter().enumerate() {
            rows.extend(nodes.into_iter().map(|v| if v == n_base { n_base + i } else { v }));
            graphs.push(g);
        }
        let (graph, centers) = MpGraph::block_diagonal(&graphs);
        Self { graph, rows, centers }
    }
}

/// Ψ embeddings of `queries` (one row each). `base` holds combiner outputs
/// for every node of `net`; `entities` holds the rows the query triples'
/// entity ids index into.
#[allow(clippy::too_many_arguments)]
pub fn embed_queries(
    model: &Model,
    tape: &mut Tape,
    params: &Binding,
    net: &RelationNetwork,
    kg: &KnowledgeGraph,
    base: Var,
    entities: Var,
    queries: &[Query],
) -> Result<Var, PipelineError> {
    let batch = QueryBatch::build(net, kg, queries, model.psi.depth());
    let triples: Vec<Triple> = queries.iter().map(|q| q.triple).collect();
    let own = model.triple_features(tape, params, entities, &triples)?;
    let all = tape.concat(&[base, own], Axis::Rows)?;
    let x = tape.gather_rows(all, batch.rows)?;
    let h = model.psi.forward(tape, params, &batch.graph, x)?;
    Ok(tape.gather_rows(h, batch.centers)?)
}

/// A knowledge graph, its relation network and the (fixed) node features a
/// trained model assigns to it. Entities outside the model's vocabulary get
/// their name-keyed rows.
#[derive(Debug, Clone)]
pub struct InferenceContext {
    pub kg: KnowledgeGraph,
    pub net: RelationNetwork,
    entities: Tensor,
    features: Tensor,
}

/// A graph over the model's vocabulary (ids coincide with the model's),
/// holding `triples` given by name. New entity names are appended; unknown
/// relations are rejected.
pub fn context_graph<'a>(model: &Model, triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>) -> Result<KnowledgeGraph, KgError> {
    let mut kg = KnowledgeGraph::with_vocab(model.entity_names(), model.relation_names());
    for (h, r, t) in triples {
        if model.relation_id(r).is_none() {
            return Err(KgError::UnknownRelation(r.to_owned()));
        }
        kg.push_named(h, r, t);
    }
    Ok(kg)
}

impl InferenceContext {
    pub fn new(model: &Model, kg: KnowledgeGraph) -> Result<Self, PipelineError> {
        let cfg = model.config();
        let net = RelationNetwork::build(&kg, cfg.mask, cfg.degree_cap, cfg.seed);
        let entities = model.entity_rows(kg.entity_names());
        let f = model.dim();
        let mut data = Vec::with_capacity(kg.len() * f);
        for chunk in kg.triples().chunks(CHUNK) {
            let mut tape = Tape::new();
            let params = model.store.bind(&mut tape)?;
            let ent = tape.leaf(&entities)?;
            let x = model.triple_features(&mut tape, &params, ent, chunk)?;
            data.extend_from_slice(tape.value(x));
        }
        let features = Tensor::matrix(kg.len(), f, data)?;
        Ok(Self {
            kg,
            net,
            entities,
            features,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn entities(&self) -> &Tensor {
        &self.entities
    }

    /// Ψ embeddings of the queries, one row of width `f` each.
    pub fn embed(&self, model: &Model, queries: &[Query]) -> Result<Vec<Vec<f64>>, PipelineError> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(CHUNK) {
            let mut tape = Tape::new();
            let params = model.store.bind(&mut tape)?;
            let base = tape.leaf(&self.features)?;
            let ent = tape.leaf(&self.entities)?;
            let h = embed_queries(model, &mut tape, &params, &self.net, &self.kg, base, ent, chunk)?;
            out.extend(tape.value(h).chunks(model.dim()).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Classifier probability for each query.
    pub fn score(&self, model: &Model, queries: &[Query]) -> Result<Vec<f64>, PipelineError> {
        let w = model.store.get(model.cls_weight).data();
        let b = model.store.get(model.cls_bias).data()[0];
        Ok(self
            .embed(model, queries)?
            .iter()
            .map(|x| crate::tensor::kernels::sigmoid(crate::tensor::kernels::dot(x, w) + b))
            .collect())
    }

    /// Probability that `(head, rel, tail)` holds, by name. Unseen entity
    /// names are allowed; the relation must be known.
    pub fn score_triple(&self, model: &Model, head: &str, rel: &str, tail: &str) -> Result<f64, PipelineError> {
        let r = model.relation_id(rel).ok_or_else(|| KgError::UnknownRelation(rel.to_owned()))?;
        // Unknown names index past the context vocabulary, so they contribute
        // no links; their rows are appended below.
        let mut extra = Vec::new();
        let mut id_of = |name: &str| -> usize {
            self.kg.entity_id(name).unwrap_or_else(|| {
                extra.push(name.to_owned());
                self.kg.entity_count() + extra.len() - 1
            })
        };
        let triple = Triple::new(id_of(head), r, id_of(tail));
        let mut tape = Tape::new();
        let params = model.store.bind(&mut tape)?;
        let base = tape.leaf(&self.features)?;
        let ent = tape.leaf(&self.entities)?;
        let ent = if extra.is_empty() {
            ent
        } else {
            let more = tape.leaf(&model.entity_rows(&extra))?;
            tape.concat(&[ent, more], Axis::Rows)?
        };
        let h = embed_queries(model, &mut tape, &params, &self.net, &self.kg, base, ent, &[Query::new(triple)])?;
        let z = model.classifier_logits(&mut tape, &params, h)?;
        let p = tape.sigmoid(z);
        Ok(tape.scalar_value(p))
    }
}
