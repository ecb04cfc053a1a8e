//! Attention-weighted triple scoring and per-item top-Q selection.
//!
//! Each edge `(i, j)` scores `S_ij = α_ij · (h'_i · e_j)`. Only an item's own
//! edges are ever candidates, so the score table is as sparse as the graph.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{KnowledgeGraph, Triple};
use crate::error::{Error, Result};
use crate::gat::EmbeddingStore;

/// Retrieve one triple per item unless told otherwise.
pub const DEFAULT_Q: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriple {
    pub head_item: usize,
    pub relation: usize,
    pub tail_entity: usize,
    pub score: f64,
}

impl ScoredTriple {
    pub fn triple(&self) -> Triple {
        Triple {
            head: self.head_item,
            relation: self.relation,
            tail: self.tail_entity,
        }
    }
}

/// Descending score, then ascending entity id, then ascending relation id.
fn ranking_order(a: &ScoredTriple, b: &ScoredTriple) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.tail_entity.cmp(&b.tail_entity))
        .then(a.relation.cmp(&b.relation))
}

/// Per-item scored triples, each list sorted best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleIndex {
    per_item: Vec<Vec<ScoredTriple>>,
}

impl TripleIndex {
    pub fn item_count(&self) -> usize {
        self.per_item.len()
    }

    pub fn all(&self, item: usize) -> Option<&[ScoredTriple]> {
        self.per_item.get(item).map(Vec::as_slice)
    }
}

/// Scores every knowledge-graph edge from the stored attention and
/// embeddings.
pub fn score_edges(store: &EmbeddingStore, kg: &KnowledgeGraph) -> Result<TripleIndex> {
    if store.item_count() != kg.item_count {
        return Err(Error::StoreMismatch(format!(
            "store has {} items, graph has {}",
            store.item_count(),
            kg.item_count
        )));
    }
    if store.entity_count() < kg.entity_count() {
        return Err(Error::StoreMismatch(format!(
            "store has {} entities, graph has {}",
            store.entity_count(),
            kg.entity_count()
        )));
    }
    let mut per_item = vec![Vec::new(); kg.item_count];
    for t in &kg.triples {
        let alpha = store.alpha(t.head, t.tail).ok_or_else(|| {
            Error::StoreMismatch(format!("no attention weight for edge ({}, {})", t.head, t.tail))
        })?;
        let similarity = store
            .updated_items
            .row(t.head)
            .dot(&store.entities.row(t.tail));
        per_item[t.head].push(ScoredTriple {
            head_item: t.head,
            relation: t.relation,
            tail_entity: t.tail,
            score: alpha * similarity,
        });
    }
    for list in &mut per_item {
        list.sort_by(ranking_order);
    }
    Ok(TripleIndex { per_item })
}

/// The `q` best triples of `item`.
pub fn top_q(item: usize, q: usize, index: &TripleIndex) -> Result<&[ScoredTriple]> {
    let all = index.all(item).ok_or(Error::OutOfRange {
        kind: "item",
        id: item,
        size: index.item_count(),
    })?;
    Ok(&all[..q.min(all.len())])
}

/// `top_q` for each requested item. Items outside the index, or without
/// edges, map to an empty list.
pub fn retrieve_for_items(items: &[usize], q: usize, index: &TripleIndex) -> BTreeMap<usize, Vec<ScoredTriple>> {
    items
        .iter()
        .map(|&i| {
            let triples = top_q(i, q, index).map(<[_]>::to_vec).unwrap_or_default();
            (i, triples)
        })
        .collect()
}
