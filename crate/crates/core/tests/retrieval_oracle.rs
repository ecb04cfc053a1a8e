mod common;

use common::fixtures::{random_kg, random_store, rng, scalar_view};
use common::oracle::{dot, full_sort_desc};
use kerag_core::retriever::{score_edges, top_q};
use rand::Rng;

/// Brute-force ranking of an item's edges from raw store contents, as
/// (entity, relation, score) with ties by entity then relation.
fn reference_ranking(
    kg: &kerag_core::corpus::KnowledgeGraph,
    oracle: &common::oracle::ScalarGat,
    item: usize,
) -> Vec<(usize, usize, f64)> {
    let alphas = oracle.alpha(item);
    let updated = oracle.updated(item);
    let relations = kg.relation_count();
    let scored: Vec<(usize, f64)> = kg
        .triples
        .iter()
        .filter(|t| t.head == item)
        .map(|t| {
            let n = oracle.neighbors[item].iter().position(|&e| e == t.tail).unwrap();
            let s = alphas[n] * dot(&updated, &oracle.entities[t.tail]);
            (t.tail * relations + t.relation, s)
        })
        .collect();
    full_sort_desc(&scored)
        .into_iter()
        .map(|(key, s)| (key / relations, key % relations, s))
        .collect()
}

#[test]
fn top_q_matches_full_sort_on_one_thousand_instances() {
    let mut r = rng(2024);
    let mut checked = 0;
    while checked < 1000 {
        let items = r.random_range(1..6);
        let entities = r.random_range(2..12);
        let kg = random_kg(&mut r, items, entities, 0, 6);
        let d = r.random_range(2..6);
        let (store, params) = random_store(&mut r, &kg, d);
        let index = score_edges(&store, &kg).unwrap();
        let oracle = scalar_view(&store, &params);
        let item = r.random_range(0..items);
        let reference = reference_ranking(&kg, &oracle, item);

        for q in 0..=reference.len() + 1 {
            let got = top_q(item, q, &index).unwrap();
            assert_eq!(got.len(), q.min(reference.len()));
            for (g, (e, rel, s)) in got.iter().zip(&reference) {
                assert_eq!((g.tail_entity, g.relation), (*e, *rel), "instance {checked}, q {q}");
                assert!((g.score - s).abs() <= 1e-10 * s.abs().max(1.0));
            }
        }
        checked += 1;
    }
}

#[test]
fn prefix_monotonicity_over_q() {
    let mut r = rng(77);
    for _ in 0..1000 {
        let kg = random_kg(&mut r, 4, 9, 0, 5);
        let (store, _) = random_store(&mut r, &kg, 3);
        let index = score_edges(&store, &kg).unwrap();
        let item = r.random_range(0..4);
        let q1 = top_q(item, 1, &index).unwrap();
        let q2 = top_q(item, 2, &index).unwrap();
        let q3 = top_q(item, 3, &index).unwrap();
        assert!(q2.starts_with(q1));
        assert!(q3.starts_with(q2));
    }
}

#[test]
fn stored_scores_recompute_from_store() {
    let mut r = rng(5);
    for _ in 0..50 {
        let kg = random_kg(&mut r, 6, 10, 1, 5);
        let (store, _) = random_store(&mut r, &kg, 4);
        let index = score_edges(&store, &kg).unwrap();
        for item in 0..6 {
            for t in index.all(item).unwrap() {
                let alpha = store.alpha(item, t.tail_entity).unwrap();
                let dot = store.updated_items.row(item).dot(&store.entities.row(t.tail_entity));
                assert!((t.score - alpha * dot).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn unknown_item_is_an_error_and_empty_item_returns_nothing() {
    let mut r = rng(9);
    let kg = random_kg(&mut r, 3, 5, 0, 0);
    let (store, _) = random_store(&mut r, &kg, 2);
    let index = score_edges(&store, &kg).unwrap();
    assert!(top_q(0, 3, &index).unwrap().is_empty());
    assert!(top_q(3, 1, &index).is_err());
}
