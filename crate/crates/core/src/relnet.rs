//! Triple-level relation networks.
//!
//! Every triple of a knowledge graph becomes a node; two nodes are linked when
//! their triples share an entity. The role the shared entity plays in each
//! triple gives the link its pattern: head-head, tail-tail, or head-tail (which
//! covers both orientations). Links are undirected and stored as sorted CSR.
//! When two triples share entities under several patterns, one edge is kept
//! with the full pattern bitset; its single label is the first set pattern in
//! `HeadHead, TailTail, HeadTail` order.

use std::collections::{HashMap, VecDeque};

use rand::seq::index;

use crate::kg::{KnowledgeGraph, Triple};
use crate::par;
use crate::rng::{self, streams};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RelnetError {
    #[error("node {0} out of range")]
    InvalidNode(usize),
    #[error("unknown link pattern {0:?}")]
    UnknownPattern(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkPattern {
    HeadHead,
    TailTail,
    HeadTail,
}

impl LinkPattern {
    pub const ALL: [LinkPattern; 3] = [LinkPattern::HeadHead, LinkPattern::TailTail, LinkPattern::HeadTail];

    pub fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn code(self) -> &'static str {
        match self {
            LinkPattern::HeadHead => "HH",
            LinkPattern::TailTail => "TT",
            LinkPattern::HeadTail => "HT",
        }
    }

    pub fn from_code(code: &str) -> Result<Self, RelnetError> {
        match code.trim() {
            "HH" | "hh" => Ok(LinkPattern::HeadHead),
            "TT" | "tt" => Ok(LinkPattern::TailTail),
            "HT" | "ht" => Ok(LinkPattern::HeadTail),
            other => Err(RelnetError::UnknownPattern(other.to_owned())),
        }
    }

    /// First pattern set in a bitset.
    pub fn first_in(bits: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|p| bits & p.bit() != 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatternMask {
    pub include_head_head: bool,
    pub include_tail_tail: bool,
    pub include_head_tail: bool,
}

impl PatternMask {
    pub const ALL: PatternMask = PatternMask {
        include_head_head: true,
        include_tail_tail: true,
        include_head_tail: true,
    };
    pub const NONE: PatternMask = PatternMask {
        include_head_head: false,
        include_tail_tail: false,
        include_head_tail: false,
    };

    pub fn from_bits(bits: u8) -> Self {
        Self {
            include_head_head: bits & LinkPattern::HeadHead.bit() != 0,
            include_tail_tail: bits & LinkPattern::TailTail.bit() != 0,
            include_head_tail: bits & LinkPattern::HeadTail.bit() != 0,
        }
    }

    pub fn bits(self) -> u8 {
        let mut b = 0;
        if self.include_head_head {
            b |= LinkPattern::HeadHead.bit();
        }
        if self.include_tail_tail {
            b |= LinkPattern::TailTail.bit();
        }
        if self.include_head_tail {
            b |= LinkPattern::HeadTail.bit();
        }
        b
    }

    pub fn allows(self, p: LinkPattern) -> bool {
        self.bits() & p.bit() != 0
    }

    /// Parses a comma-separated subset such as `HH,HT`. An empty string is the
    /// empty mask.
    pub fn parse(spec: &str) -> Result<Self, RelnetError> {
        let mut bits = 0;
        for part in spec.split(',').filter(|s| !s.trim().is_empty()) {
            bits |= LinkPattern::from_code(part)?.bit();
        }
        Ok(Self::from_bits(bits))
    }

    /// Comma-separated codes, the inverse of [`PatternMask::parse`].
    pub fn codes(self) -> String {
        LinkPattern::ALL
            .iter()
            .filter(|p| self.allows(**p))
            .map(|p| p.code())
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl Default for PatternMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// Neighbor id with its pattern bitset.
pub type Link = (u32, u8);

/// Links of `triple` to the triples of `kg`, sorted by triple id with merged
/// pattern bits. `skip` removes one triple id (the triple itself when it is
/// already part of `kg`). Entities outside `kg`'s vocabulary contribute nothing.
pub fn shared_entity_links(kg: &KnowledgeGraph, triple: Triple, skip: Option<usize>, mask: PatternMask) -> Vec<Link> {
    let mut out: Vec<Link> = Vec::new();
    let hh = LinkPattern::HeadHead.bit();
    let tt = LinkPattern::TailTail.bit();
    let ht = LinkPattern::HeadTail.bit();
    if let Some(inc) = kg.incidence(triple.head) {
        if mask.include_head_head {
            out.extend(inc.as_head.iter().map(|&id| (id as u32, hh)));
        }
        if mask.include_head_tail {
            out.extend(inc.as_tail.iter().map(|&id| (id as u32, ht)));
        }
    }
    if let Some(inc) = kg.incidence(triple.tail) {
        if mask.include_tail_tail {
            out.extend(inc.as_tail.iter().map(|&id| (id as u32, tt)));
        }
        if mask.include_head_tail {
            out.extend(inc.as_head.iter().map(|&id| (id as u32, ht)));
        }
    }
    if let Some(s) = skip {
        out.retain(|(id, _)| *id as usize != s);
    }
    out.sort_unstable();
    let mut merged: Vec<Link> = Vec::with_capacity(out.len());
    for (id, bits) in out {
        match merged.last_mut() {
            Some((last, b)) if *last == id => *b |= bits,
            _ => merged.push((id, bits)),
        }
    }
    merged
}

/// Undirected relation network in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationNetwork {
    node_to_triple: Vec<usize>,
    triples: Vec<Triple>,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    patterns: Vec<u8>,
    mask: PatternMask,
    degree_cap: Option<usize>,
    build_seed: u64,
}

fn sample_cap(links: Vec<Link>, cap: Option<usize>, seed: u64, node: usize) -> Vec<Link> {
    match cap {
        Some(c) if links.len() > c => {
            let mut rng = rng::substream(seed, streams::DEGREE_CAP, node as u64);
            let mut keep: Vec<usize> = index::sample(&mut rng, links.len(), c).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| links[i]).collect()
        }
        _ => links,
    }
}

fn to_csr(lists: &[Vec<Link>]) -> (Vec<usize>, Vec<u32>, Vec<u8>) {
    let mut offsets = Vec::with_capacity(lists.len() + 1);
    offsets.push(0);
    let total = lists.iter().map(Vec::len).sum();
    let mut neighbors = Vec::with_capacity(total);
    let mut patterns = Vec::with_capacity(total);
    for l in lists {
        for &(n, b) in l {
            neighbors.push(n);
            patterns.push(b);
        }
        offsets.push(neighbors.len());
    }
    (offsets, neighbors, patterns)
}

impl RelationNetwork {
    /// One node per triple of `kg`, node id = triple id.
    pub fn build(kg: &KnowledgeGraph, mask: PatternMask, degree_cap: Option<usize>, seed: u64) -> Self {
        let triples = kg.triples().to_vec();
        let full: Vec<Vec<Link>> = par::map_range(triples.len(), |v| shared_entity_links(kg, triples[v], Some(v), mask));
        let lists = match degree_cap {
            None => full,
            Some(_) => {
                let kept: Vec<Vec<Link>> = par::map_range(full.len(), |v| sample_cap(full[v].clone(), degree_cap, seed, v));
                // Re-symmetrize: keep (u, v) when either endpoint sampled it.
                let mut lists = kept.clone();
                for (u, l) in kept.iter().enumerate() {
                    for &(v, b) in l {
                        lists[v as usize].push((u as u32, b));
                    }
                }
                for l in &mut lists {
                    l.sort_unstable();
                    l.dedup();
                }
                lists
            }
        };
        let (offsets, neighbors, patterns) = to_csr(&lists);
        Self {
            node_to_triple: (0..triples.len()).collect(),
            triples,
            offsets,
            neighbors,
            patterns,
            mask,
            degree_cap,
            build_seed: seed,
        }
    }

    /// Sequential build used by benches to compare against the parallel path.
    pub fn build_sequential(kg: &KnowledgeGraph, mask: PatternMask) -> Self {
        let was = par::parallel_enabled();
        par::set_parallel(false);
        let net = Self::build(kg, mask, None, 0);
        par::set_parallel(was);
        net
    }

    pub fn node_count(&self) -> usize {
        self.node_to_triple.len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn mask(&self) -> PatternMask {
        self.mask
    }

    pub fn degree_cap(&self) -> Option<usize> {
        self.degree_cap
    }

    pub fn build_seed(&self) -> u64 {
        self.build_seed
    }

    pub fn triple_id(&self, node: usize) -> usize {
        self.node_to_triple[node]
    }

    pub fn triple(&self, node: usize) -> Triple {
        self.triples[node]
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn neighbor_patterns(&self, node: usize) -> &[u8] {
        &self.patterns[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Pattern bits of edge `(u, v)`, if present.
    pub fn edge_bits(&self, u: usize, v: usize) -> Option<u8> {
        let ns = self.neighbors(u);
        ns.binary_search(&(v as u32)).ok().map(|i| self.neighbor_patterns(u)[i])
    }

    /// Each undirected edge once as `(u, v, bits)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u8)> + '_ {
        (0..self.node_count()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .zip(self.neighbor_patterns(u))
                .filter(move |(v, _)| (**v as usize) > u)
                .map(move |(v, b)| (u, *v as usize, *b))
        })
    }

    /// Links a new triple would receive, capped per this network's settings.
    /// `skip` leaves one existing node out of the candidates.
    pub fn links_for(&self, triple: Triple, kg: &KnowledgeGraph, skip: Option<usize>) -> Vec<Link> {
        let links = shared_entity_links(kg, triple, skip, self.mask);
        let node = self.node_count();
        sample_cap(links, self.degree_cap, self.build_seed, node)
    }

    /// New network with `triple` appended as the last node. Links are found
    /// through `kg`'s incidence, so `kg` must be the graph this network was
    /// built from (triple id = node id).
    pub fn insert_node(&self, triple: Triple, kg: &KnowledgeGraph) -> (RelationNetwork, usize) {
        let links = self.links_for(triple, kg, None);
        let new_id = self.node_count();
        let mut lists: Vec<Vec<Link>> = (0..new_id)
            .map(|u| self.neighbors(u).iter().copied().zip(self.neighbor_patterns(u).iter().copied()).collect())
            .collect();
        for &(v, b) in &links {
            // new_id exceeds every existing id, so pushing keeps lists sorted.
            lists[v as usize].push((new_id as u32, b));
        }
        lists.push(links);
        let (offsets, neighbors, patterns) = to_csr(&lists);
        let mut node_to_triple = self.node_to_triple.clone();
        node_to_triple.push(new_id);
        let mut triples = self.triples.clone();
        triples.push(triple);
        let net = RelationNetwork {
            node_to_triple,
            triples,
            offsets,
            neighbors,
            patterns,
            mask: self.mask,
            degree_cap: self.degree_cap,
            build_seed: self.build_seed,
        };
        (net, new_id)
    }

    /// Depth-`k` ego graph around `center`.
    pub fn ego_graph(&self, center: usize, k: usize) -> Result<EgoGraph, RelnetError> {
        if center >= self.node_count() {
            return Err(RelnetError::InvalidNode(center));
        }
        let view = Overlay::plain(self);
        let sub = view.khop(&[center], k);
        let mut edges = Vec::new();
        for (i, &gu) in sub.nodes.iter().enumerate() {
            for &j in sub.local_neighbors(i) {
                let j = j as usize;
                if j > i {
                    let bits = self.edge_bits(gu, sub.nodes[j]).expect("induced edge exists");
                    edges.push((i, j, LinkPattern::first_in(bits).expect("non-empty bits")));
                }
            }
        }
        Ok(EgoGraph {
            center,
            nodes: sub.nodes,
            edges,
            depth: k,
        })
    }

    /// Edge list export: `u v pattern` per line with `u < v`.
    pub fn export_edge_list(&self) -> String {
        let mut out = String::new();
        for (u, v, b) in self.edges() {
            let p = LinkPattern::first_in(b).expect("non-empty bits");
            out.push_str(&format!("{u} {v} {}\n", p.code()));
        }
        out
    }

    pub fn stats(&self) -> NetworkStats {
        let mut per_pattern = [0usize; 3];
        for (_, _, b) in self.edges() {
            per_pattern[LinkPattern::first_in(b).expect("non-empty bits") as usize] += 1;
        }
        let n = self.node_count();
        let e = self.edge_count();
        NetworkStats {
            nodes: n,
            edges: e,
            head_head: per_pattern[0],
            tail_tail: per_pattern[1],
            head_tail: per_pattern[2],
            mean_degree: if n == 0 { 0.0 } else { 2.0 * e as f64 / n as f64 },
            max_degree: (0..n).map(|v| self.degree(v)).max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkStats {
    pub nodes: usize,
    pub edges: usize,
    pub head_head: usize,
    pub tail_tail: usize,
    pub head_tail: usize,
    pub mean_degree: f64,
    pub max_degree: usize,
}

impl std::fmt::Display for NetworkStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "nodes        {}", self.nodes)?;
        writeln!(f, "edges        {}", self.edges)?;
        writeln!(f, "edges_hh     {}", self.head_head)?;
        writeln!(f, "edges_tt     {}", self.tail_tail)?;
        writeln!(f, "edges_ht     {}", self.head_tail)?;
        writeln!(f, "mean_degree  {:.4}", self.mean_degree)?;
        writeln!(f, "max_degree   {}", self.max_degree)
    }
}

/// Depth-`k` neighborhood of a node. `nodes[0]` is the center, the rest follow
/// BFS order with ascending-id tie-break; edges are local index pairs `(i, j)`
/// with `i < j`, each undirected edge once.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoGraph {
    pub center: usize,
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize, LinkPattern)>,
    pub depth: usize,
}

impl EgoGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// A relation network viewed with at most one extra scratch node (id =
/// `net.node_count()`) and optionally one node hidden. The base network is
/// never modified.
#[derive(Debug, Clone, Copy)]
pub struct Overlay<'a> {
    net: &'a RelationNetwork,
    scratch: Option<&'a [Link]>,
    hidden: Option<usize>,
}

impl<'a> Overlay<'a> {
    pub fn plain(net: &'a RelationNetwork) -> Self {
        Self {
            net,
            scratch: None,
            hidden: None,
        }
    }

    pub fn new(net: &'a RelationNetwork, scratch: Option<&'a [Link]>, hidden: Option<usize>) -> Self {
        Self { net, scratch, hidden }
    }

    pub fn scratch_id(&self) -> usize {
        self.net.node_count()
    }

    pub fn node_count(&self) -> usize {
        self.net.node_count() + usize::from(self.scratch.is_some())
    }

    /// Sorted neighbor ids of `node` in the overlaid graph.
    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        let hidden = self.hidden;
        let keep = |v: usize| Some(v) != hidden;
        if node == self.scratch_id() {
            return self
                .scratch
                .map(|s| s.iter().map(|(v, _)| *v as usize).filter(|&v| keep(v)).collect())
                .unwrap_or_default();
        }
        let mut out: Vec<usize> = self.net.neighbors(node).iter().map(|&v| v as usize).filter(|&v| keep(v)).collect();
        if let Some(s) = self.scratch {
            if s.binary_search_by_key(&(node as u32), |(v, _)| *v).is_ok() {
                out.push(self.scratch_id());
            }
        }
        out
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors(node).len()
    }

    /// Induced subgraph on everything within `k` hops of `centers`, in BFS
    /// order (centers first). Records each node's full degree in the overlay.
    pub fn khop(&self, centers: &[usize], k: usize) -> Subgraph {
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut nodes = Vec::new();
        let mut depth = Vec::new();
        let mut queue = VecDeque::new();
        for &c in centers {
            if Some(c) == self.hidden || local.contains_key(&c) {
                continue;
            }
            local.insert(c, nodes.len());
            nodes.push(c);
            depth.push(0usize);
            queue.push_back(c);
        }
        let mut adj_cache: Vec<Vec<usize>> = Vec::new();
        while let Some(u) = queue.pop_front() {
            let li = local[&u];
            let ns = self.neighbors(u);
            if depth[li] < k {
                for &v in &ns {
                    if let std::collections::hash_map::Entry::Vacant(e) = local.entry(v) {
                        e.insert(nodes.len());
                        nodes.push(v);
                        depth.push(depth[li] + 1);
                        queue.push_back(v);
                    }
                }
            }
            if adj_cache.len() <= li {
                adj_cache.resize(li + 1, Vec::new());
            }
            adj_cache[li] = ns;
        }
        let mut offsets = vec![0usize];
        let mut neighbors = Vec::new();
        let mut parent_degree = Vec::with_capacity(nodes.len());
        for ns in adj_cache.iter().take(nodes.len()) {
            let mut loc: Vec<u32> = ns.iter().filter_map(|v| local.get(v).map(|&j| j as u32)).collect();
            loc.sort_unstable();
            neighbors.extend_from_slice(&loc);
            offsets.push(neighbors.len());
            parent_degree.push(ns.len());
        }
        Subgraph {
            nodes,
            offsets,
            neighbors,
            parent_degree,
        }
    }
}

/// Induced subgraph with local CSR adjacency. `parent_degree[i]` is node
/// `i`'s degree in the graph it was cut from, which exceeds the local degree
/// on the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub nodes: Vec<usize>,
    pub offsets: Vec<usize>,
    pub neighbors: Vec<u32>,
    pub parent_degree: Vec<usize>,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn local_neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::parse_triples;

    fn toy() -> KnowledgeGraph {
        // t1=(a,r1,b), t2=(b,r2,c), t3=(a,r3,c)
        parse_triples(b"a\tr1\tb\nb\tr2\tc\na\tr3\tc\n").unwrap()
    }

    fn edge_set(net: &RelationNetwork) -> Vec<(usize, usize, LinkPattern)> {
        net.edges().map(|(u, v, b)| (u, v, LinkPattern::first_in(b).unwrap())).collect()
    }

    #[test]
    fn single_triple_has_no_edges() {
        let kg = parse_triples(b"a\tr\tb\n").unwrap();
        let net = RelationNetwork::build(&kg, PatternMask::ALL, None, 0);
        assert_eq!(net.node_count(), 1);
        assert_eq!(net.edge_count(), 0);
    }

    #[test]
    fn toy_edges_and_labels() {
        let net = RelationNetwork::build(&toy(), PatternMask::ALL, None, 0);
        assert_eq!(
            edge_set(&net),
            vec![
                (0, 1, LinkPattern::HeadTail),
                (0, 2, LinkPattern::HeadHead),
                (1, 2, LinkPattern::TailTail)
            ]
        );
    }

    #[test]
    fn toy_without_head_tail() {
        let mask = PatternMask::parse("HH,TT").unwrap();
        let net = RelationNetwork::build(&toy(), mask, None, 0);
        assert_eq!(
            edge_set(&net),
            vec![(0, 2, LinkPattern::HeadHead), (1, 2, LinkPattern::TailTail)]
        );
    }

    #[test]
    fn inverse_facts_collapse_to_one_edge() {
        let kg = parse_triples(b"a\tr\tb\nb\ts\ta\n").unwrap();
        let net = RelationNetwork::build(&kg, PatternMask::ALL, None, 0);
        assert_eq!(net.edge_count(), 1);
        assert_eq!(net.edge_bits(0, 1), Some(LinkPattern::HeadTail.bit()));
        let kg = parse_triples(b"a\tr\tb\na\ts\tb\n").unwrap();
        let net = RelationNetwork::build(&kg, PatternMask::ALL, None, 0);
        assert_eq!(net.edge_bits(0, 1), Some(LinkPattern::HeadHead.bit() | LinkPattern::TailTail.bit()));
        assert_eq!(edge_set(&net), vec![(0, 1, LinkPattern::HeadHead)]);
    }

    #[test]
    fn insert_links_through_known_entities() {
        let kg = toy();
        let net = RelationNetwork::build(&kg, PatternMask::ALL, None, 0);
        // (a, r9, d) with d unseen.
        let mut kg2 = kg.clone();
        let d = kg2.intern_entity("d");
        let r9 = kg2.intern_relation("r9");
        let t = Triple::new(0, r9, d);
        let (net2, id) = net.insert_node(t, &kg2);
        assert_eq!(id, 3);
        assert_eq!(net2.neighbors(3), &[0, 2]);
        assert_eq!(net2.edge_bits(3, 0), Some(LinkPattern::HeadHead.bit()));
        assert_eq!(net2.edge_bits(3, 2), Some(LinkPattern::HeadHead.bit()));
        assert_eq!(net, RelationNetwork::build(&kg, PatternMask::ALL, None, 0));
    }

    #[test]
    fn insert_isolated_when_both_unseen() {
        let kg = toy();
        let net = RelationNetwork::build(&kg, PatternMask::ALL, None, 0);
        let t = Triple::new(99, 0, 100);
        let (net2, id) = net.insert_node(t, &kg);
        assert_eq!(net2.degree(id), 0);
        assert_eq!(net2.edge_count(), net.edge_count());
    }

    #[test]
    fn ego_graph_cases() {
        let net = RelationNetwork::build(&toy(), PatternMask::ALL, None, 0);
        let e0 = net.ego_graph(1, 0).unwrap();
        assert_eq!(e0.nodes, vec![1]);
        assert!(e0.edges.is_empty());
        let e1 = net.ego_graph(1, 1).unwrap();
        assert_eq!(e1.nodes, vec![1, 0, 2]);
        // local: 0↔t2, 1↔t1, 2↔t3
        assert_eq!(
            e1.edges,
            vec![
                (0, 1, LinkPattern::HeadTail),
                (0, 2, LinkPattern::TailTail),
                (1, 2, LinkPattern::HeadHead)
            ]
        );
        assert_eq!(net.ego_graph(7, 1), Err(RelnetError::InvalidNode(7)));
    }

    #[test]
    fn stats_of_toy() {
        let net = RelationNetwork::build(&toy(), PatternMask::ALL, None, 0);
        let s = net.stats();
        assert_eq!((s.nodes, s.edges, s.head_head, s.tail_tail, s.head_tail), (3, 3, 1, 1, 1));
        assert!((s.mean_degree - 2.0).abs() < 1e-12);
        let empty = RelationNetwork::build(&toy(), PatternMask::NONE, None, 0).stats();
        assert_eq!(empty.edges, 0);
    }

    #[test]
    fn star_is_clique() {
        let m = 12;
        let text: String = (0..m).map(|i| format!("hub\tr\tx{i}\n")).collect();
        let kg = parse_triples(text.as_bytes()).unwrap();
        let net = RelationNetwork::build(&kg, PatternMask::ALL, None, 0);
        assert_eq!(net.edge_count(), m * (m - 1) / 2);
    }

    #[test]
    fn degree_cap_bounds_and_symmetry() {
        let text: String = (0..40).map(|i| format!("hub\tr\tx{i}\n")).collect();
        let kg = parse_triples(text.as_bytes()).unwrap();
        let net = RelationNetwork::build(&kg, PatternMask::ALL, Some(5), 3);
        for u in 0..net.node_count() {
            for &v in net.neighbors(u) {
                assert!(net.neighbors(v as usize).contains(&(u as u32)));
            }
        }
        assert!(net.edge_count() <= 40 * 5);
        assert_eq!(net, RelationNetwork::build(&kg, PatternMask::ALL, Some(5), 3));
    }

    #[test]
    fn export_format() {
        let net = RelationNetwork::build(&toy(), PatternMask::ALL, None, 0);
        assert_eq!(net.export_edge_list(), "0 1 HT\n0 2 HH\n1 2 TT\n");
    }

    #[test]
    fn mask_codes_round_trip() {
        for bits in 0..8u8 {
            let m = PatternMask::from_bits(bits);
            assert_eq!(PatternMask::parse(&m.codes()).unwrap(), m);
        }
        assert!(PatternMask::parse("HX").is_err());
    }

    #[test]
    fn overlay_hides_and_adds() {
        let kg = toy();
        let net = RelationNetwork::build(&kg, PatternMask::ALL, None, 0);
        let links = vec![(0u32, LinkPattern::HeadHead.bit()), (2u32, LinkPattern::HeadHead.bit())];
        let ov = Overlay::new(&net, Some(&links), Some(2));
        assert_eq!(ov.neighbors(3), vec![0]);
        assert_eq!(ov.neighbors(0), vec![1, 3]);
        let sub = ov.khop(&[3], 2);
        assert_eq!(sub.nodes, vec![3, 0, 1]);
        assert_eq!(sub.parent_degree, vec![1, 2, 1]);
    }
}
