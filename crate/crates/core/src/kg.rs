//! Knowledge graphs: triple parsing, vocabulary interning, incidence indexes,
//! inductive splits and embedding-table initialization.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index;
use rand_distr::{Distribution, Normal};

use crate::rng::{self, streams};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum KgError {
    #[error("line {0}: expected three tab-separated fields")]
    MalformedLine(usize),
    #[error("line {0}: invalid UTF-8")]
    InvalidUtf8(usize),
    #[error("input contains no triples")]
    EmptyInput,
    #[error("unseen fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("split removed every training triple")]
    EmptyTrainGraph,
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, rel: usize, tail: usize) -> Self {
        Self { head, rel, tail }
    }

    pub fn touches(&self, entity: usize) -> bool {
        self.head == entity || self.tail == entity
    }
}

/// Triple ids in which an entity appears, each list ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Incidence {
    pub as_head: Vec<usize>,
    pub as_tail: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relation_ids: HashMap<String, usize>,
    triples: Vec<Triple>,
    incidence: Vec<Incidence>,
}

impl KnowledgeGraph {
    /// Empty graph over a fixed starting vocabulary.
    pub fn with_vocab(entities: &[String], relations: &[String]) -> Self {
        let mut kg = Self {
            entity_names: Vec::new(),
            relation_names: Vec::new(),
            entity_ids: HashMap::new(),
            relation_ids: HashMap::new(),
            triples: Vec::new(),
            incidence: Vec::new(),
        };
        for e in entities {
            kg.intern_entity(e);
        }
        for r in relations {
            kg.intern_relation(r);
        }
        kg
    }

    pub fn new() -> Self {
        Self::with_vocab(&[], &[])
    }

    /// Builds a graph from named triples, interning in first-appearance order.
    pub fn from_named<'a>(triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>) -> Self {
        let mut kg = Self::new();
        for (h, r, t) in triples {
            kg.push_named(h, r, t);
        }
        kg
    }

    pub fn intern_entity(&mut self, name: &str) -> usize {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = self.entity_names.len();
        self.entity_names.push(name.to_owned());
        self.entity_ids.insert(name.to_owned(), id);
        self.incidence.push(Incidence::default());
        id
    }

    pub fn intern_relation(&mut self, name: &str) -> usize {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = self.relation_names.len();
        self.relation_names.push(name.to_owned());
        self.relation_ids.insert(name.to_owned(), id);
        id
    }

    pub fn push_named(&mut self, h: &str, r: &str, t: &str) -> usize {
        let head = self.intern_entity(h);
        let rel = self.intern_relation(r);
        let tail = self.intern_entity(t);
        self.push(Triple { head, rel, tail })
    }

    /// Appends a triple over already-interned ids; returns its triple id.
    pub fn push(&mut self, triple: Triple) -> usize {
        assert!(triple.head < self.entity_names.len() && triple.tail < self.entity_names.len());
        assert!(triple.rel < self.relation_names.len());
        let id = self.triples.len();
        self.triples.push(triple);
        // Ids grow monotonically, so appending keeps each list sorted.
        self.incidence[triple.head].as_head.push(id);
        self.incidence[triple.tail].as_tail.push(id);
        id
    }

    pub fn entity_count(&self) -> usize {
        self.entity_names.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_names.len()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, id: usize) -> Triple {
        self.triples[id]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entity_names[id]
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relation_names[id]
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    /// Incidence of an entity; entities outside the vocabulary have none.
    pub fn incidence(&self, entity: usize) -> Option<&Incidence> {
        self.incidence.get(entity)
    }

    /// Serializes to `head\trel\ttail` lines in triple order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            self.write_triple(&mut out, t);
        }
        out
    }

    pub fn write_triple(&self, out: &mut String, t: &Triple) {
        out.push_str(&self.entity_names[t.head]);
        out.push('\t');
        out.push_str(&self.relation_names[t.rel]);
        out.push('\t');
        out.push_str(&self.entity_names[t.tail]);
        out.push('\n');
    }

    /// Set of entities that occur in at least one triple.
    pub fn active_entities(&self) -> BTreeSet<usize> {
        self.triples.iter().flat_map(|t| [t.head, t.tail]).collect()
    }
}

impl Default for KnowledgeGraph {
    fn default() -> Self {
        Self::new()
    }
}

/// Parses a tab-separated triple file. `#` comment lines and blank lines are
/// skipped; every other line must carry exactly three non-empty fields.
pub fn parse_triples(text: &[u8]) -> Result<KnowledgeGraph, KgError> {
    let mut kg = KnowledgeGraph::new();
    for (lineno, raw) in text.split(|b| *b == b'\n').enumerate() {
        let lineno = lineno + 1;
        let line = std::str::from_utf8(raw).map_err(|_| KgError::InvalidUtf8(lineno))?;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(KgError::MalformedLine(lineno));
        }
        kg.push_named(fields[0], fields[1], fields[2]);
    }
    if kg.is_empty() {
        return Err(KgError::EmptyInput);
    }
    Ok(kg)
}

/// A held-out triple in the vocabulary of the full graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalTriple {
    pub triple: Triple,
    pub touches_unseen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InductiveSplit {
    pub train_graph: KnowledgeGraph,
    pub eval_triples: Vec<EvalTriple>,
    pub unseen_entities: BTreeSet<usize>,
    pub seed: u64,
}

impl InductiveSplit {
    /// `eval.tsv` contents, in the full graph's vocabulary.
    pub fn eval_tsv(&self, full: &KnowledgeGraph) -> String {
        let mut out = String::new();
        for e in &self.eval_triples {
            full.write_triple(&mut out, &e.triple);
        }
        out
    }

    pub fn unseen_names(&self, full: &KnowledgeGraph) -> String {
        let mut out = String::new();
        for &e in &self.unseen_entities {
            out.push_str(full.entity_name(e));
            out.push('\n');
        }
        out
    }
}

/// Samples `⌊fraction·|ℰ|⌋` entities as unseen and moves every triple that
/// touches one of them out of the training graph.
pub fn make_inductive_split(kg: &KnowledgeGraph, unseen_fraction: f64, seed: u64) -> Result<InductiveSplit, KgError> {
    if !(0.0..=1.0).contains(&unseen_fraction) {
        return Err(KgError::InvalidFraction(unseen_fraction));
    }
    let n = kg.entity_count();
    let k = ((unseen_fraction * n as f64).floor() as usize).min(n);
    let mut rng = rng::stream(seed, streams::SPLIT);
    let unseen: BTreeSet<usize> = index::sample(&mut rng, n, k).into_iter().collect();

    let mut train_graph = KnowledgeGraph::new();
    let mut eval_triples = Vec::new();
    for t in kg.triples() {
        if unseen.contains(&t.head) || unseen.contains(&t.tail) {
            eval_triples.push(EvalTriple {
                triple: *t,
                touches_unseen: true,
            });
        } else {
            train_graph.push_named(kg.entity_name(t.head), kg.relation_name(t.rel), kg.entity_name(t.tail));
        }
    }
    if train_graph.is_empty() {
        return Err(KgError::EmptyTrainGraph);
    }
    Ok(InductiveSplit {
        train_graph,
        eval_triples,
        unseen_entities: unseen,
        seed,
    })
}

/// Entity and relation embedding tables.
///
/// Each row is drawn from its own stream keyed by the row's name, so an entity
/// first met at inference time gets the same row it would have had at
/// training time.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub entity_emb: Tensor,
    pub relation_emb: Tensor,
    pub dim: usize,
}

/// Xavier-normal standard deviation for a `fan_in → fan_out` map.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

fn named_row(seed: u64, stream: u64, name: &str, dim: usize) -> Vec<f64> {
    let mut rng = rng::substream(seed, stream, rng::fnv1a(name.as_bytes()));
    let normal = Normal::new(0.0, xavier_std(dim, dim)).expect("finite std");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

/// Frozen xavier row for an entity name.
pub fn entity_row(seed: u64, name: &str, dim: usize) -> Vec<f64> {
    named_row(seed, streams::ENTITY_EMB, name, dim)
}

pub fn relation_row(seed: u64, name: &str, dim: usize) -> Vec<f64> {
    named_row(seed, streams::RELATION_EMB, name, dim)
}

/// Entity table for an arbitrary list of names (frozen).
pub fn entity_table(seed: u64, names: &[String], dim: usize) -> Tensor {
    let data = names.iter().flat_map(|n| entity_row(seed, n, dim)).collect();
    Tensor::matrix(names.len(), dim, data).expect("consistent shape")
}

pub fn init_embeddings(kg: &KnowledgeGraph, dim: usize, seed: u64) -> EmbeddingTables {
    assert!(dim >= 1, "embedding width must be positive");
    let entity_emb = entity_table(seed, kg.entity_names(), dim);
    let rel_data = kg.relation_names().iter().flat_map(|n| relation_row(seed, n, dim)).collect();
    let relation_emb = Tensor::matrix(kg.relation_count(), dim, rel_data)
        .expect("consistent shape")
        .trainable();
    EmbeddingTables {
        entity_emb,
        relation_emb,
        dim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_line() {
        let kg = parse_triples(b"a\tr\tb\n").unwrap();
        assert_eq!(kg.entity_count(), 2);
        assert_eq!(kg.relation_count(), 1);
        assert_eq!(kg.triples(), &[Triple::new(0, 0, 1)]);
    }

    #[test]
    fn interning_order_and_incidence() {
        let kg = parse_triples(b"a\tr\tb\nb\ts\tc\n").unwrap();
        assert_eq!(kg.entity_names(), &["a", "b", "c"]);
        assert_eq!(kg.triples(), &[Triple::new(0, 0, 1), Triple::new(1, 1, 2)]);
        let b = kg.incidence(1).unwrap();
        assert_eq!(b.as_head, vec![1]);
        assert_eq!(b.as_tail, vec![0]);
    }

    #[test]
    fn malformed_and_empty() {
        assert_eq!(parse_triples(b"a\tr\n"), Err(KgError::MalformedLine(1)));
        assert_eq!(parse_triples(b"a\tr\tb\nx\ty\tz\tw\n"), Err(KgError::MalformedLine(2)));
        assert_eq!(parse_triples(b""), Err(KgError::EmptyInput));
        assert_eq!(parse_triples(b"# only a comment\n\n"), Err(KgError::EmptyInput));
        assert_eq!(parse_triples(b"a\t\tb\n"), Err(KgError::MalformedLine(1)));
        assert_eq!(parse_triples(b"a\tr\t\xff\n"), Err(KgError::InvalidUtf8(1)));
    }

    #[test]
    fn comments_blank_lines_and_crlf() {
        let kg = parse_triples(b"# header\n\na\tr\tb\r\n\nb\tr\ta").unwrap();
        assert_eq!(kg.len(), 2);
        assert_eq!(kg.entity_name(1), "b");
    }

    #[test]
    fn self_loop_incidence() {
        let kg = parse_triples(b"a\tr\ta\n").unwrap();
        let a = kg.incidence(0).unwrap();
        assert_eq!(a.as_head, vec![0]);
        assert_eq!(a.as_tail, vec![0]);
    }

    fn ten_triples() -> KnowledgeGraph {
        parse_triples(
            b"a\tr\tb\nb\tr\tc\nc\ts\td\nd\ts\te\ne\tr\ta\na\ts\tc\nb\ts\td\nf\tr\ta\nf\ts\tg\ng\tr\th\n",
        )
        .unwrap()
    }

    #[test]
    fn zero_fraction_keeps_graph() {
        let kg = ten_triples();
        let split = make_inductive_split(&kg, 0.0, 3).unwrap();
        assert_eq!(split.train_graph, kg);
        assert!(split.eval_triples.is_empty());
        assert!(split.unseen_entities.is_empty());
    }

    #[test]
    fn split_is_deterministic() {
        let kg = ten_triples();
        assert_eq!(make_inductive_split(&kg, 0.3, 11).unwrap(), make_inductive_split(&kg, 0.3, 11).unwrap());
    }

    #[test]
    fn split_eval_count_matches_filter() {
        let kg = ten_triples();
        for seed in 0..20 {
            let split = make_inductive_split(&kg, 0.2, seed).unwrap();
            assert_eq!(split.unseen_entities.len(), 1);
            let expected = kg
                .triples()
                .iter()
                .filter(|t| split.unseen_entities.iter().any(|&e| t.touches(e)))
                .count();
            assert_eq!(split.eval_triples.len(), expected);
            assert_eq!(split.train_graph.len() + expected, kg.len());
        }
    }

    #[test]
    fn split_errors() {
        let kg = ten_triples();
        assert_eq!(make_inductive_split(&kg, 1.5, 0), Err(KgError::InvalidFraction(1.5)));
        assert_eq!(make_inductive_split(&kg, 1.0, 0), Err(KgError::EmptyTrainGraph));
    }

    #[test]
    fn embedding_shapes_and_freeze() {
        let kg = parse_triples(b"a\tr\tb\nc\tr\td\ne\ts\ta\n").unwrap();
        let t = init_embeddings(&kg, 100, 1);
        assert_eq!(t.entity_emb.shape(), &[5, 100]);
        assert_eq!(t.relation_emb.shape(), &[2, 100]);
        assert!(!t.entity_emb.requires_grad());
        assert!(t.relation_emb.requires_grad());
        assert_eq!(t, init_embeddings(&kg, 100, 1));
        assert_ne!(t.entity_emb, init_embeddings(&kg, 100, 2).entity_emb);
    }

    #[test]
    fn xavier_variance() {
        let names: Vec<String> = (0..200).map(|i| format!("e{i}")).collect();
        let table = entity_table(5, &names, 100);
        let n = table.data().len() as f64;
        let mean = table.data().iter().sum::<f64>() / n;
        let var = table.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.01).abs() < 0.002, "variance {var}");
    }

    #[test]
    fn rows_keyed_by_name() {
        let kg1 = parse_triples(b"a\tr\tb\n").unwrap();
        let kg2 = parse_triples(b"b\tr\ta\n").unwrap();
        let t1 = init_embeddings(&kg1, 8, 9);
        let t2 = init_embeddings(&kg2, 8, 9);
        assert_eq!(t1.entity_emb.row(0), t2.entity_emb.row(1));
        assert_eq!(entity_row(9, "a", 8), t1.entity_emb.row(0));
    }
}
