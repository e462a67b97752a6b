//! Ranking evaluation: MRR and Hit@k over relation or tail candidates.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;

use crate::kg::{KnowledgeGraph, Triple};
use crate::rng::{self, streams};

use super::infer::{context_graph, InferenceContext, Query};
use super::{Model, PipelineError};

/// Maximum sampled tail candidates per query (plus the true tail).
pub const TAIL_CANDIDATES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RankMode {
    #[default]
    Relations,
    Tails,
}

impl FromStr for RankMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relations" => Ok(RankMode::Relations),
            "tails" => Ok(RankMode::Tails),
            _ => Err(PipelineError::UnknownMode(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mrr: f64,
    pub hit1: f64,
    pub hit3: f64,
    pub n: usize,
    pub ranks: Vec<f64>,
}

impl EvalReport {
    pub fn from_ranks(ranks: Vec<f64>) -> Result<Self, PipelineError> {
        if ranks.is_empty() {
            return Err(PipelineError::EmptyEval);
        }
        let n = ranks.len() as f64;
        Ok(Self {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hit1: ranks.iter().filter(|&&r| r <= 1.0).count() as f64 / n,
            hit3: ranks.iter().filter(|&&r| r <= 3.0).count() as f64 / n,
            n: ranks.len(),
            ranks,
        })
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!("mrr={:.6}\nhit1={:.6}\nhit3={:.6}\nn={}\n", self.mrr, self.hit1, self.hit3, self.n)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>10}", "metric", "value")?;
        writeln!(f, "{:<8}{:>10.6}", "mrr", self.mrr)?;
        writeln!(f, "{:<8}{:>10.6}", "hit1", self.hit1)?;
        writeln!(f, "{:<8}{:>10.6}", "hit3", self.hit3)?;
        writeln!(f, "{:<8}{:>10}", "n", self.n)
    }
}

/// Rank of `scores[truth]` among all scores, higher is better. Ties share the
/// average of the positions they span.
pub fn average_rank(scores: &[f64], truth: usize) -> f64 {
    let s = scores[truth];
    let above = scores.iter().filter(|&&x| x > s).count();
    let ties = scores.iter().filter(|&&x| x == s).count() - 1;
    1.0 + above as f64 + ties as f64 / 2.0
}

/// Ranks every triple id in `eval_ids` (ids of `ctx.kg`). Each query hides
/// its own node, so the network it is scored against is the context graph
/// minus the fact being predicted.
pub fn evaluate(model: &Model, ctx: &InferenceContext, eval_ids: &[usize], mode: RankMode, seed: u64) -> Result<EvalReport, PipelineError> {
    if eval_ids.is_empty() {
        return Err(PipelineError::EmptyEval);
    }
    let kg = &ctx.kg;
    let known: HashSet<Triple> = kg.triples().iter().copied().collect();
    let mut ranks = Vec::with_capacity(eval_ids.len());
    for (qi, &id) in eval_ids.iter().enumerate() {
        let truth = kg.triple(id);
        let (cands, truth_pos): (Vec<Triple>, usize) = match mode {
            RankMode::Relations => ((0..kg.relation_count()).map(|r| Triple::new(truth.head, r, truth.tail)).collect(), truth.rel),
            RankMode::Tails => {
                let pool: Vec<usize> = (0..kg.entity_count())
                    .filter(|&e| e != truth.tail && !known.contains(&Triple::new(truth.head, truth.rel, e)))
                    .collect();
                let mut rng = rng::substream(seed, streams::EVAL, qi as u64);
                let take = pool.len().min(TAIL_CANDIDATES);
                let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
                picked.sort_unstable();
                let mut c = vec![Triple::new(truth.head, truth.rel, truth.tail)];
                c.extend(picked.into_iter().map(|e| Triple::new(truth.head, truth.rel, e)));
                (c, 0)
            }
        };
        let queries: Vec<Query> = cands.iter().map(|&t| Query { triple: t, hidden: Some(id) }).collect();
        let scores = ctx.score(model, &queries)?;
        ranks.push(average_rank(&scores, truth_pos));
    }
    EvalReport::from_ranks(ranks)
}

/// Evaluates `eval` (by name) in the context of `train` plus `eval` itself.
pub fn evaluate_held_out(model: &Model, train: &KnowledgeGraph, eval: &KnowledgeGraph, mode: RankMode, seed: u64) -> Result<EvalReport, PipelineError> {
    let named = |g: &'_ KnowledgeGraph, t: &Triple| (g.entity_name(t.head).to_owned(), g.relation_name(t.rel).to_owned(), g.entity_name(t.tail).to_owned());
    let rows: Vec<(String, String, String)> = train
        .triples()
        .iter()
        .map(|t| named(train, t))
        .chain(eval.triples().iter().map(|t| named(eval, t)))
        .collect();
    let kg = context_graph(model, rows.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())))?;
    let ctx = InferenceContext::new(model, kg)?;
    let ids: Vec<usize> = (train.len()..train.len() + eval.len()).collect();
    evaluate(model, &ctx, &ids, mode, seed)
}
