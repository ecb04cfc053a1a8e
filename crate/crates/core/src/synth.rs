//! Seeded synthetic ratings and knowledge graph with planted group
//! structure, for tests, benchmarks and offline demos.
//!
//! Users and items are split into taste groups. A user rates mostly items
//! of their own group, highly, and a few items of other groups, poorly.
//! Every item gets a genre, a director and a few actors drawn from its
//! group's pool, so the KG carries the same signal as the ratings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, Dataset, Interaction, KnowledgeGraph};
use crate::error::{Error, Result};

const ADJECTIVES: &[&str] = &[
    "Silent", "Crimson", "Hidden", "Broken", "Golden", "Midnight", "Frozen", "Wild", "Distant", "Burning", "Hollow",
    "Electric", "Forgotten", "Restless", "Velvet", "Iron", "Paper", "Lonely", "Secret", "Endless",
];
const NOUNS: &[&str] = &[
    "Harbor", "Empire", "Garden", "Witness", "Frontier", "Orchard", "Signal", "Voyage", "Carnival", "Lighthouse",
    "Station", "Kingdom", "Mirror", "Canyon", "Letter", "Circus", "Engine", "Island", "Parade", "Archive",
];
const GENRES: &[&str] = &[
    "Drama", "Comedy", "Thriller", "Western", "Musical", "Horror", "Romance", "Documentary", "Animation", "Noir",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub groups: usize,
    /// Interactions per user, inclusive range.
    pub min_per_user: usize,
    pub max_per_user: usize,
    /// Fraction of a user's interactions drawn outside their group.
    pub off_group_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 500,
            items: 400,
            groups: 4,
            min_per_user: 20,
            max_per_user: 40,
            off_group_rate: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub dataset: Dataset,
    pub kg: KnowledgeGraph,
    pub user_groups: Vec<usize>,
    pub item_groups: Vec<usize>,
}

fn title(item: usize) -> String {
    let a = ADJECTIVES[item % ADJECTIVES.len()];
    let n = NOUNS[(item / ADJECTIVES.len()) % NOUNS.len()];
    let round = item / (ADJECTIVES.len() * NOUNS.len());
    let year = 1950 + (item * 7) % 70;
    if round == 0 {
        format!("The {a} {n} ({year})")
    } else {
        format!("The {a} {n} Part {} ({year})", round + 1)
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthWorld> {
    if config.groups == 0 || config.items < 2 * config.groups || config.users == 0 {
        return Err(Error::Config("synthetic world needs users, and at least two items per group".into()));
    }
    if config.min_per_user < 5 || config.min_per_user > config.max_per_user {
        return Err(Error::Config("per-user interaction range must start at 5 or more".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let item_groups: Vec<usize> = (0..config.items).map(|i| i % config.groups).collect();
    let user_groups: Vec<usize> = (0..config.users).map(|u| u % config.groups).collect();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); config.groups];
    for (i, &g) in item_groups.iter().enumerate() {
        pools[g].push(i);
    }

    let mut interactions = Vec::new();
    for (user, &g) in user_groups.iter().enumerate() {
        let n = rng.random_range(config.min_per_user..=config.max_per_user);
        let off_space = config.items - pools[g].len();
        let n_off = ((n as f64 * config.off_group_rate).round() as usize).min(off_space);
        let n_in = (n - n_off).min(pools[g].len());
        // Small groups push the remainder outside the group.
        let n_off = (n - n_in).min(off_space);
        let mut chosen: Vec<(usize, u8)> = pools[g]
            .choose_multiple(&mut rng, n_in)
            .map(|&i| (i, if rng.random_bool(0.5) { 5 } else { 4 }))
            .collect();
        let others: Vec<usize> = (0..config.items).filter(|&i| item_groups[i] != g).collect();
        chosen.extend(
            others
                .choose_multiple(&mut rng, n_off)
                .map(|&i| (i, rng.random_range(1..=3u8))),
        );
        chosen.shuffle(&mut rng);
        let mut ts = 978_300_000i64 + user as i64 * 10_000;
        for (item, rating) in chosen {
            ts += rng.random_range(1..600);
            interactions.push(Interaction {
                user,
                item,
                rating,
                timestamp: ts,
            });
        }
    }

    let directors_per_group = 3;
    let actors_per_group = 8;
    let mut text_triples: Vec<(usize, String, String)> = Vec::new();
    for (item, &g) in item_groups.iter().enumerate() {
        text_triples.push((item, "film.film.genre".into(), GENRES[g % GENRES.len()].into()));
        let d = rng.random_range(0..directors_per_group);
        text_triples.push((item, "director_film".into(), format!("Director {g}-{d}")));
        for _ in 0..rng.random_range(1..=3) {
            let a = rng.random_range(0..actors_per_group);
            text_triples.push((item, "film.film.starring".into(), format!("Actor {g}-{a}")));
        }
        if rng.random_bool(0.3) {
            text_triples.push((item, "film.film.country".into(), ["France", "Japan", "Brazil"][item % 3].into()));
        }
    }
    let (kg, _) = KnowledgeGraph::from_text_triples(
        config.items,
        text_triples.iter().map(|(i, r, e)| (*i, r.as_str(), e.as_str())),
    );

    let catalog = Catalog {
        item_titles: (0..config.items).map(title).collect(),
        item_raw_ids: (1..=config.items).map(|i| i.to_string()).collect(),
        user_raw_ids: (1..=config.users).map(|u| u.to_string()).collect(),
    };
    Ok(SynthWorld {
        dataset: Dataset { interactions, catalog },
        kg,
        user_groups,
        item_groups,
    })
}

/// Writes the world in the raw MovieLens-1M layout: `ratings.dat`,
/// `movies.dat`, plus `kg.tsv` (raw item id, relation, entity) and
/// `kg_map.tsv` (raw item id, entity id).
pub fn write_movielens_files(world: &SynthWorld, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let catalog = &world.dataset.catalog;
    let mut ratings = String::new();
    for x in &world.dataset.interactions {
        let _ = writeln!(
            ratings,
            "{}::{}::{}::{}",
            catalog.user_raw_ids[x.user], catalog.item_raw_ids[x.item], x.rating, x.timestamp
        );
    }
    let mut movies = String::new();
    for (i, title) in catalog.item_titles.iter().enumerate() {
        let genre = world.kg.triples.iter().find(|t| t.head == i && world.kg.relation_texts[t.relation] == "film.film.genre");
        let genre = genre.map_or("Unknown", |t| world.kg.entity_texts[t.tail].as_str());
        let _ = writeln!(movies, "{}::{}::{}", catalog.item_raw_ids[i], title, genre);
    }
    let mut kg = String::new();
    for t in &world.kg.triples {
        let _ = writeln!(
            kg,
            "{}\t{}\t{}",
            catalog.item_raw_ids[t.head], world.kg.relation_texts[t.relation], world.kg.entity_texts[t.tail]
        );
    }
    let mut map = String::new();
    for raw in &catalog.item_raw_ids {
        let _ = writeln!(map, "{raw}\tm.item{raw}");
    }
    for (name, body) in [("ratings.dat", ratings), ("movies.dat", movies), ("kg.tsv", kg), ("kg_map.tsv", map)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
