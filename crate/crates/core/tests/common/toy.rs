//! A hand-built instance small enough to read in full: one user, fourteen
//! films, a handful of triples and a one-dimensional CF model.

use kerag_core::baserec::CfModel;
use kerag_core::corpus::{leave_one_out_split, Catalog, DatasetSplit, Interaction, KnowledgeGraph};
use kerag_core::gat::EmbeddingStore;
use kerag_core::promptgen::{Artifacts, SentenceTemplates};
use kerag_core::retriever::{score_edges, TripleIndex};
use ndarray::Array2;

pub const TITLES: [&str; 14] = [
    "The Terminator (1984)",
    "Titanic (1997)",
    "Aliens (1986)",
    "Heat (1995)",
    "Fargo (1996)",
    "Clueless (1995)",
    "Alien (1979)",
    "Jaws (1975)",
    "Big (1988)",
    "Babe (1995)",
    "Se7en (1995)",
    "Rocky (1976)",
    "Speed (1994)",
    "Casino (1995)",
];

/// Shown order of the candidates in the question line.
pub const CANDIDATES: [usize; 10] = [9, 2, 13, 6, 11, 7, 3, 12, 8, 10];

pub struct Toy {
    pub catalog: Catalog,
    pub kg: KnowledgeGraph,
    pub split: DatasetSplit,
    pub cf: CfModel,
    pub index: TripleIndex,
    pub templates: SentenceTemplates,
}

impl Toy {
    pub fn artifacts(&self) -> Artifacts<'_> {
        Artifacts {
            catalog: &self.catalog,
            kg: &self.kg,
            split: &self.split,
            cf: &self.cf,
            index: &self.index,
            templates: &self.templates,
        }
    }
}

pub fn toy() -> Toy {
    let catalog = Catalog {
        item_titles: TITLES.iter().map(|t| t.to_string()).collect(),
        item_raw_ids: (1..=14).map(|i| i.to_string()).collect(),
        user_raw_ids: vec!["1".into()],
    };
    let ratings = [(0, 5), (1, 4), (4, 2), (5, 1), (3, 5), (2, 4)];
    let xs: Vec<Interaction> = ratings
        .iter()
        .enumerate()
        .map(|(t, &(item, rating))| Interaction {
            user: 0,
            item,
            rating,
            timestamp: 100 + t as i64,
        })
        .collect();
    let split = leave_one_out_split(&xs).unwrap();

    let (kg, _) = KnowledgeGraph::from_text_triples(
        14,
        [
            (0, "director_film", "James Cameron"),
            (0, "film.film.starring", "Arnold Schwarzenegger"),
            (1, "director_film", "James Cameron"),
            (4, "film.film.genre", "Crime"),
            (5, "film.film.country", "United States of America"),
            (6, "film.film.directed_by", "Ridley Scott"),
            (6, "film.film.genre", "Science Fiction"),
            (7, "film.film.music", "John Williams"),
            (10, "film.film.genre", "Crime"),
        ],
    );
    // Entity order: Cameron, Schwarzenegger, Crime, USA, Scott, SciFi, Williams.
    let neighbors = kg.neighbors();
    let attention = neighbors
        .iter()
        .map(|n| vec![1.0 / n.len().max(1) as f64; n.len()])
        .collect();
    let entities = ndarray::array![[3.0], [1.0], [2.0], [1.0], [1.0], [2.0], [1.0]];
    let store = EmbeddingStore {
        items: Array2::zeros((14, 1)),
        entities,
        updated_items: Array2::ones((14, 1)),
        neighbors,
        attention,
    };
    let index = score_edges(&store, &kg).unwrap();

    // Scores fall with the item id, so Hint 1 lists candidates by id.
    let cf = CfModel {
        user_vectors: ndarray::array![[1.0]],
        item_vectors: Array2::from_shape_fn((14, 1), |(i, _)| (14 - i) as f64),
        layers: 0,
    };
    Toy {
        catalog,
        kg,
        split,
        cf,
        index,
        templates: SentenceTemplates::builtin(),
    }
}
