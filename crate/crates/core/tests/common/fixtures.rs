use kerag_core::corpus::KnowledgeGraph;
use kerag_core::gat::{EmbeddingStore, GatParams, DEFAULT_LEAKY_SLOPE};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::ScalarGat;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random knowledge graph where every item has between `min_deg` and
/// `max_deg` distinct tail entities.
pub fn random_kg(rng: &mut impl Rng, items: usize, entities: usize, min_deg: usize, max_deg: usize) -> KnowledgeGraph {
    let relations = ["director_film", "film.genre", "starring"];
    let entity_names: Vec<String> = (0..entities).map(|e| format!("entity {e}")).collect();
    let mut rows = Vec::new();
    for i in 0..items {
        let deg = rng.random_range(min_deg..=max_deg).min(entities);
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < deg {
            let e = rng.random_range(0..entities);
            if !picked.contains(&e) {
                picked.push(e);
            }
        }
        for e in picked {
            rows.push((i, relations[rng.random_range(0..relations.len())], e));
        }
    }
    let (mut kg, _) = KnowledgeGraph::from_text_triples(
        items,
        rows.iter().map(|(i, r, e)| (*i, *r, entity_names[*e].as_str())),
    );
    // Keep every entity addressable even if no edge references it.
    for name in &entity_names {
        if !kg.entity_texts.contains(name) {
            kg.entity_texts.push(name.clone());
        }
    }
    kg
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

pub fn random_store(rng: &mut impl Rng, kg: &KnowledgeGraph, d: usize) -> (EmbeddingStore, GatParams) {
    let neighbors = kg.neighbors();
    let attention = neighbors.iter().map(|n| vec![0.0; n.len()]).collect();
    let params = GatParams {
        weight: random_matrix(rng, d, d, 1.0),
        attention: Array1::from_shape_simple_fn(2 * d, || rng.random_range(-1.0..1.0)),
        leaky_slope: DEFAULT_LEAKY_SLOPE,
    };
    let mut store = EmbeddingStore {
        items: random_matrix(rng, kg.item_count, d, 1.0),
        entities: random_matrix(rng, kg.entity_count(), d, 1.0),
        updated_items: Array2::zeros((kg.item_count, d)),
        neighbors,
        attention,
    };
    store.materialize(&params, 7);
    (store, params)
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn scalar_view(store: &EmbeddingStore, params: &GatParams) -> ScalarGat {
    ScalarGat {
        weight: to_rows(&params.weight),
        beta: params.attention.to_vec(),
        slope: params.leaky_slope,
        items: to_rows(&store.items),
        entities: to_rows(&store.entities),
        neighbors: store.neighbors.clone(),
    }
}
