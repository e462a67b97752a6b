//! Parameter layout of a model: embedding tables, combiner, the two GNN
//! stacks, discriminator and the logistic-regression head.

use std::collections::HashMap;

use crate::kg::{entity_row, init_embeddings, KnowledgeGraph, Triple};
use crate::layers::{Activation, Combiner, GnnStack};
use crate::leim::Discriminator;
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::{self, streams};
use crate::tensor::{Tape, Tensor, TensorError, Var};

use super::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: TrainConfig,
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    entity_index: HashMap<String, usize>,
    pub store: ParamStore,
    pub entity: ParamId,
    pub relation: ParamId,
    pub combiner: Combiner,
    pub psi: GnnStack,
    pub omega: GnnStack,
    pub disc: Discriminator,
    pub cls_weight: ParamId,
    pub cls_bias: ParamId,
}

impl Model {
    /// Fresh parameters for a vocabulary. The entity table is frozen.
    pub fn new(config: TrainConfig, entity_names: Vec<String>, relation_names: Vec<String>) -> Self {
        let f = config.dim;
        let vocab = KnowledgeGraph::with_vocab(&entity_names, &relation_names);
        let tables = init_embeddings(&vocab, f, config.seed);
        let mut store = ParamStore::new();
        let entity = store.add("entity_emb", tables.entity_emb);
        let relation = store.add("relation_emb", tables.relation_emb);
        let mut rng = rng::stream(config.seed, streams::PARAMS);
        let combiner = Combiner::new(&mut store, "gamma", config.combiner, f, &mut rng);
        let psi = GnnStack::new(&mut store, "psi", config.gnn, config.depth, f, Activation::Relu, &mut rng);
        let omega = if config.tie_omega_psi {
            psi.clone()
        } else {
            GnnStack::new(&mut store, "omega", config.gnn, config.depth, f, Activation::Relu, &mut rng)
        };
        let disc = Discriminator::new(&mut store, "disc", f, &mut rng);
        let cls_weight = store.add("classifier.weight", Tensor::zeros(f, 1).trainable());
        let cls_bias = store.add("classifier.bias", Tensor::zeros(1, 1).trainable());
        let entity_index = entity_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            entity_names,
            relation_names,
            entity_index,
            store,
            entity,
            relation,
            combiner,
            psi,
            omega,
            disc,
            cls_weight,
            cls_bias,
        }
    }

    pub fn for_graph(config: TrainConfig, kg: &KnowledgeGraph) -> Self {
        Self::new(config, kg.entity_names().to_vec(), kg.relation_names().to_vec())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_names.iter().position(|r| r == name)
    }

    /// Entity rows for `names`: the stored row for trained vocabulary, the
    /// name-keyed xavier row otherwise.
    pub fn entity_rows(&self, names: &[String]) -> Tensor {
        let f = self.dim();
        let table = self.store.get(self.entity);
        let mut data = Vec::with_capacity(names.len() * f);
        for n in names {
            match self.entity_index.get(n) {
                Some(&i) => data.extend_from_slice(table.row(i)),
                None => data.extend(entity_row(self.config.seed, n, f)),
            }
        }
        Tensor::matrix(names.len(), f, data).expect("consistent shape")
    }

    /// Combiner output for each triple, one row per triple. `entities` holds
    /// the rows the triples' entity ids index into.
    pub fn triple_features(&self, tape: &mut Tape, params: &Binding, entities: Var, triples: &[Triple]) -> Result<Var, TensorError> {
        let heads: Vec<usize> = triples.iter().map(|t| t.head).collect();
        let rels: Vec<usize> = triples.iter().map(|t| t.rel).collect();
        let tails: Vec<usize> = triples.iter().map(|t| t.tail).collect();
        let h = tape.gather_rows(entities, heads)?;
        let r = tape.gather_rows(params.var(self.relation), rels)?;
        let t = tape.gather_rows(entities, tails)?;
        self.combiner.encode(tape, params, [h, r, t])
    }

    /// `w·x + b` per row.
    pub fn classifier_logits(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var, TensorError> {
        let z = tape.matmul(x, params.var(self.cls_weight))?;
        tape.add(z, params.var(self.cls_bias))
    }

    /// Parameters trained by the mutual-information phase.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.relation];
        ids.extend(self.combiner.param_ids());
        ids.extend(self.psi.param_ids());
        if !self.config.tie_omega_psi {
            ids.extend(self.omega.param_ids());
        }
        ids.extend(self.disc.param_ids());
        ids
    }
}
