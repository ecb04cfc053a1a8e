//! Ratings and knowledge-graph ingestion, interaction filtering and
//! leave-one-out splitting.
//!
//! Raw user and item identifiers are strings (MovieLens uses integers,
//! Amazon uses ASINs). After loading, every user and item is addressed by a
//! dense index in `0..M` / `0..N`, assigned in ascending raw-id order.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};

/// One rating event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
    pub timestamp: i64,
}

/// Titles and raw identifiers for the dense user/item index spaces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub item_titles: Vec<String>,
    pub item_raw_ids: Vec<String>,
    pub user_raw_ids: Vec<String>,
}

impl Catalog {
    pub fn user_count(&self) -> usize {
        self.user_raw_ids.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_raw_ids.len()
    }

    pub fn title(&self, item: usize) -> Result<&str> {
        self.item_titles
            .get(item)
            .map(String::as_str)
            .ok_or(Error::OutOfRange {
                kind: "item",
                id: item,
                size: self.item_titles.len(),
            })
    }

    /// Dense index of a raw item id.
    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.item_raw_ids
            .iter()
            .enumerate()
            .map(|(i, raw)| (raw.as_str(), i))
            .collect()
    }
}

/// Layout of a ratings file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetFormat {
    /// MovieLens `.dat` layout: `user::item::rating::timestamp`, titles in a
    /// sibling `movies.dat` (`item::title::genres`).
    MovieLens,
    /// Comma-separated `user,item,rating,timestamp` with an optional header
    /// line; titles from an optional `item,title` table.
    Csv,
}

impl DatasetFormat {
    fn delimiter(self) -> &'static str {
        match self {
            DatasetFormat::MovieLens => "::",
            DatasetFormat::Csv => ",",
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml" | "movielens" => Ok(DatasetFormat::MovieLens),
            "csv" | "amazon" => Ok(DatasetFormat::Csv),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::MovieLens => "ml",
            DatasetFormat::Csv => "csv",
        })
    }
}

/// Counts observed while reading a ratings file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatingStats {
    pub users: usize,
    /// Items with at least one rating.
    pub rated_items: usize,
    /// Largest numeric raw item id, i.e. the size of the MovieLens id space.
    pub item_id_space: Option<u64>,
    /// Rows in the title table, if one was read.
    pub titled_items: Option<usize>,
    pub interactions: usize,
    pub duplicates_dropped: usize,
}

/// Interactions together with the catalog that indexes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub interactions: Vec<Interaction>,
    pub catalog: Catalog,
}

impl Dataset {
    /// Drops users and items absent from `interactions` and re-densifies
    /// both id spaces, keeping titles and raw ids aligned.
    pub fn reindexed(&self, interactions: &[Interaction]) -> Dataset {
        let users: BTreeSet<usize> = interactions.iter().map(|x| x.user).collect();
        let items: BTreeSet<usize> = interactions.iter().map(|x| x.item).collect();
        let user_map: HashMap<usize, usize> =
            users.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let item_map: HashMap<usize, usize> =
            items.iter().enumerate().map(|(new, &old)| (old, new)).collect();

        let catalog = Catalog {
            item_titles: items
                .iter()
                .map(|&i| self.catalog.item_titles[i].clone())
                .collect(),
            item_raw_ids: items
                .iter()
                .map(|&i| self.catalog.item_raw_ids[i].clone())
                .collect(),
            user_raw_ids: users
                .iter()
                .map(|&u| self.catalog.user_raw_ids[u].clone())
                .collect(),
        };
        let interactions = interactions
            .iter()
            .map(|x| Interaction {
                user: user_map[&x.user],
                item: item_map[&x.item],
                ..*x
            })
            .collect();
        Dataset {
            interactions,
            catalog,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        // MovieLens ships Latin-1 title tables.
        Err(e) => e.into_bytes().iter().map(|&b| b as char).collect(),
    })
}

/// Sorts raw ids numerically when they are all integers, lexicographically
/// otherwise.
fn dense_order(raw: HashSet<&str>) -> Vec<String> {
    let mut ids: Vec<&str> = raw.into_iter().collect();
    if ids.iter().all(|s| s.parse::<u64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<u64>().unwrap());
    } else {
        ids.sort_unstable();
    }
    ids.into_iter().map(str::to_string).collect()
}

struct RawRating<'a> {
    user: &'a str,
    item: &'a str,
    rating: u8,
    timestamp: i64,
}

fn parse_rating_line<'a>(
    line: &'a str,
    delimiter: &str,
    path: &Path,
    lineno: usize,
) -> Result<RawRating<'a>> {
    let fields: Vec<&str> = line.split(delimiter).map(str::trim).collect();
    if fields.len() != 4 {
        return Err(Error::parse(
            path,
            lineno,
            format!("expected 4 fields separated by `{delimiter}`, found {}", fields.len()),
        ));
    }
    let rating: f64 = fields[2]
        .parse()
        .map_err(|_| Error::parse(path, lineno, format!("bad rating `{}`", fields[2])))?;
    if rating.fract() != 0.0 || !(1.0..=5.0).contains(&rating) {
        return Err(Error::parse(
            path,
            lineno,
            format!("rating {rating} outside 1..=5"),
        ));
    }
    let timestamp: i64 = fields[3]
        .parse()
        .map_err(|_| Error::parse(path, lineno, format!("bad timestamp `{}`", fields[3])))?;
    if timestamp < 0 {
        return Err(Error::parse(path, lineno, "negative timestamp"));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err(Error::parse(path, lineno, "empty user or item id"));
    }
    Ok(RawRating {
        user: fields[0],
        item: fields[1],
        rating: rating as u8,
        timestamp,
    })
}

fn read_titles(path: &Path, format: DatasetFormat) -> Result<HashMap<String, String>> {
    let text = read_text(path)?;
    let mut titles = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, title) = match format {
            DatasetFormat::MovieLens => {
                let mut parts = line.splitn(3, "::");
                (parts.next(), parts.next())
            }
            DatasetFormat::Csv => match line.split_once(',') {
                Some((id, title)) => (Some(id), Some(title)),
                None => (Some(line), None),
            },
        };
        match (id, title) {
            (Some(id), Some(title)) => {
                titles.insert(id.trim().to_string(), title.trim().trim_matches('"').to_string());
            }
            _ => return Err(Error::parse(path, idx + 1, "expected `item<delim>title`")),
        }
    }
    Ok(titles)
}

/// Reads a ratings file. For the MovieLens layout, titles are taken from a
/// `movies.dat` next to the ratings file when present.
pub fn load_ratings(path: &Path, format: DatasetFormat) -> Result<(Dataset, RatingStats)> {
    let titles = match format {
        DatasetFormat::MovieLens => {
            let sibling = path.with_file_name("movies.dat");
            sibling.exists().then_some(sibling)
        }
        DatasetFormat::Csv => None,
    };
    load_ratings_with_titles(path, format, titles.as_deref())
}

/// Reads a ratings file with an explicit title table. Items without a title
/// are named `Item <raw id>`.
pub fn load_ratings_with_titles(
    path: &Path,
    format: DatasetFormat,
    titles_path: Option<&Path>,
) -> Result<(Dataset, RatingStats)> {
    let text = read_text(path)?;
    let delimiter = format.delimiter();

    let mut raw = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let is_header = idx == 0
            && format == DatasetFormat::Csv
            && line
                .split(delimiter)
                .nth(2)
                .is_some_and(|f| f.trim().parse::<f64>().is_err());
        if !is_header {
            raw.push(parse_rating_line(line, delimiter, path, idx + 1)?);
        }
    }
    if raw.is_empty() {
        return Err(Error::NoInteractions(path.to_path_buf()));
    }

    let user_raw_ids = dense_order(raw.iter().map(|r| r.user).collect());
    let item_raw_ids = dense_order(raw.iter().map(|r| r.item).collect());
    let user_index: HashMap<&str, usize> = user_raw_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let item_index: HashMap<&str, usize> = item_raw_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut seen = HashSet::with_capacity(raw.len());
    let mut interactions = Vec::with_capacity(raw.len());
    let mut duplicates = 0;
    for r in &raw {
        let x = Interaction {
            user: user_index[r.user],
            item: item_index[r.item],
            rating: r.rating,
            timestamp: r.timestamp,
        };
        if seen.insert((x.user, x.item, x.timestamp)) {
            interactions.push(x);
        } else {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        warn!(duplicates, "dropped duplicate (user, item, timestamp) rows");
    }

    let title_table = titles_path.map(|p| read_titles(p, format)).transpose()?;
    let item_titles = item_raw_ids
        .iter()
        .map(|raw| {
            title_table
                .as_ref()
                .and_then(|t| t.get(raw).cloned())
                .unwrap_or_else(|| format!("Item {raw}"))
        })
        .collect();

    let item_id_space = item_raw_ids
        .iter()
        .map(|s| s.parse::<u64>().ok())
        .collect::<Option<Vec<_>>>()
        .and_then(|ids| {
            let from_titles = title_table
                .as_ref()
                .and_then(|t| t.keys().filter_map(|k| k.parse::<u64>().ok()).max());
            ids.into_iter().max().max(from_titles)
        });

    let stats = RatingStats {
        users: user_raw_ids.len(),
        rated_items: item_raw_ids.len(),
        item_id_space,
        titled_items: title_table.as_ref().map(HashMap::len),
        interactions: interactions.len(),
        duplicates_dropped: duplicates,
    };
    let dataset = Dataset {
        interactions,
        catalog: Catalog {
            item_titles,
            item_raw_ids,
            user_raw_ids,
        },
    };
    Ok((dataset, stats))
}

/// Removes users and items with fewer than `min_count` interactions,
/// repeating until no further removal happens.
pub fn filter_min_interactions(interactions: &[Interaction], min_count: usize) -> Vec<Interaction> {
    let mut current: Vec<Interaction> = interactions.to_vec();
    loop {
        let mut user_counts: HashMap<usize, usize> = HashMap::new();
        let mut item_counts: HashMap<usize, usize> = HashMap::new();
        for x in &current {
            *user_counts.entry(x.user).or_default() += 1;
            *item_counts.entry(x.item).or_default() += 1;
        }
        let before = current.len();
        current.retain(|x| user_counts[&x.user] >= min_count && item_counts[&x.item] >= min_count);
        if current.len() == before {
            return current;
        }
    }
}

/// Leave-one-out partition of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    /// Training interactions sorted by (user, timestamp, item).
    pub train: Vec<Interaction>,
    pub validation: BTreeMap<usize, Interaction>,
    pub test: BTreeMap<usize, Interaction>,
    user_offsets: Vec<usize>,
}

impl DatasetSplit {
    pub fn user_count(&self) -> usize {
        self.user_offsets.len() - 1
    }

    /// Training interactions of `user`, oldest first.
    pub fn train_for(&self, user: usize) -> &[Interaction] {
        if user + 1 >= self.user_offsets.len() {
            return &[];
        }
        &self.train[self.user_offsets[user]..self.user_offsets[user + 1]]
    }

    /// Every item `user` interacted with, in any partition.
    pub fn seen_items(&self, user: usize) -> HashSet<usize> {
        let mut seen: HashSet<usize> = self.train_for(user).iter().map(|x| x.item).collect();
        seen.extend(self.validation.get(&user).map(|x| x.item));
        seen.extend(self.test.get(&user).map(|x| x.item));
        seen
    }
}

pub const MIN_SPLIT_INTERACTIONS: usize = 3;

/// Per user, the latest interaction becomes the test instance and the
/// second latest the validation instance. Equal timestamps are ordered by
/// item id, so the larger item id counts as more recent.
pub fn leave_one_out_split(interactions: &[Interaction]) -> Result<DatasetSplit> {
    let mut sorted = interactions.to_vec();
    sorted.sort_by_key(|x| (x.user, x.timestamp, x.item));
    let user_count = sorted.last().map_or(0, |x| x.user + 1);

    let mut train = Vec::with_capacity(sorted.len());
    let mut validation = BTreeMap::new();
    let mut test = BTreeMap::new();
    let mut user_offsets = vec![0; user_count + 1];

    let mut start = 0;
    let mut next_user = 0;
    while start < sorted.len() {
        let user = sorted[start].user;
        let end = start + sorted[start..].iter().take_while(|x| x.user == user).count();
        let history = &sorted[start..end];
        if history.len() < MIN_SPLIT_INTERACTIONS {
            return Err(Error::TooFewInteractions {
                user,
                count: history.len(),
                required: MIN_SPLIT_INTERACTIONS,
            });
        }
        while next_user <= user {
            user_offsets[next_user] = train.len();
            next_user += 1;
        }
        let n = history.len();
        train.extend_from_slice(&history[..n - 2]);
        validation.insert(user, history[n - 2]);
        test.insert(user, history[n - 1]);
        start = end;
    }
    while next_user <= user_count {
        user_offsets[next_user] = train.len();
        next_user += 1;
    }

    Ok(DatasetSplit {
        train,
        validation,
        test,
        user_offsets,
    })
}

/// One (head item, relation, tail entity) fact, all as dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub triples: Vec<Triple>,
    pub entity_texts: Vec<String>,
    pub relation_texts: Vec<String>,
    pub item_count: usize,
}

impl KnowledgeGraph {
    /// Builds a graph from text triples, interning entity and relation
    /// strings in first-seen order. Duplicate triples are stored once and
    /// counted in the returned value.
    pub fn from_text_triples<'a>(
        item_count: usize,
        triples: impl IntoIterator<Item = (usize, &'a str, &'a str)>,
    ) -> (KnowledgeGraph, usize) {
        let mut kg = KnowledgeGraph {
            item_count,
            ..Default::default()
        };
        let mut entities: HashMap<String, usize> = HashMap::new();
        let mut relations: HashMap<String, usize> = HashMap::new();
        let mut seen = HashSet::new();
        let mut duplicates = 0;
        for (head, rel, ent) in triples {
            let relation = *relations.entry(rel.to_string()).or_insert_with(|| {
                kg.relation_texts.push(rel.to_string());
                kg.relation_texts.len() - 1
            });
            let tail = *entities.entry(ent.to_string()).or_insert_with(|| {
                kg.entity_texts.push(ent.to_string());
                kg.entity_texts.len() - 1
            });
            let t = Triple {
                head,
                relation,
                tail,
            };
            if seen.insert(t) {
                kg.triples.push(t);
            } else {
                duplicates += 1;
            }
        }
        (kg, duplicates)
    }

    pub fn entity_count(&self) -> usize {
        self.entity_texts.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_texts.len()
    }

    /// Distinct tail entities of each item, ascending.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.item_count];
        for t in &self.triples {
            adj[t.head].push(t.tail);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Triples grouped by head item.
    pub fn triples_by_item(&self) -> Vec<Vec<Triple>> {
        let mut by_item = vec![Vec::new(); self.item_count];
        for t in &self.triples {
            by_item[t.head].push(*t);
        }
        by_item
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.triples {
            if t.head >= self.item_count {
                return Err(Error::OutOfRange {
                    kind: "head item",
                    id: t.head,
                    size: self.item_count,
                });
            }
            if t.relation >= self.relation_texts.len() {
                return Err(Error::OutOfRange {
                    kind: "relation",
                    id: t.relation,
                    size: self.relation_texts.len(),
                });
            }
            if t.tail >= self.entity_texts.len() {
                return Err(Error::OutOfRange {
                    kind: "entity",
                    id: t.tail,
                    size: self.entity_texts.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KgStats {
    /// Distinct tail entities plus the mapped head entities of kept triples.
    pub entities: usize,
    pub tail_entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub dropped_unmapped: usize,
    pub duplicates: usize,
}

/// Loads `head \t relation \t entity` triples and keeps those whose head
/// resolves to a catalog item. The head column may hold either a raw item
/// id or the entity id the mapping file assigns to that item.
pub fn load_kg(path: &Path, mapping_path: &Path, catalog: &Catalog) -> Result<(KnowledgeGraph, KgStats)> {
    let mapping_text = read_text(mapping_path)?;
    let mut entity_to_item: HashMap<String, String> = HashMap::new();
    let mut mapped_items: HashMap<String, String> = HashMap::new();
    for (idx, line) in mapping_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((item, entity)) = line.split_once('\t') else {
            return Err(Error::parse(mapping_path, idx + 1, "expected `item_id\\tentity_id`"));
        };
        let (item, entity) = (item.trim(), entity.trim());
        if idx == 0 && item.contains(':') {
            // Typed header (`item_id:token`).
            continue;
        }
        entity_to_item.insert(entity.to_string(), item.to_string());
        mapped_items.insert(item.to_string(), entity.to_string());
    }

    let item_index = catalog.item_index();
    let text = read_text(path)?;
    let mut rows = Vec::new();
    let mut head_entities = HashSet::new();
    let mut dropped = 0;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, idx + 1, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if idx == 0 && fields[0].contains(':') && fields[1].contains(':') {
            continue;
        }
        let (head, relation, entity) = (fields[0], fields[1], fields[2]);
        if relation.is_empty() {
            return Err(Error::parse(path, idx + 1, "empty relation text"));
        }
        if entity.is_empty() {
            return Err(Error::parse(path, idx + 1, "dangling entity: empty entity text"));
        }
        let raw_item = if mapped_items.contains_key(head) {
            Some(head)
        } else {
            entity_to_item.get(head).map(String::as_str)
        };
        match raw_item.and_then(|raw| item_index.get(raw).map(|&i| (raw, i))) {
            Some((raw, item)) => {
                head_entities.insert(mapped_items[raw].clone());
                rows.push((item, relation, entity));
            }
            None => dropped += 1,
        }
    }

    let (kg, duplicates) = KnowledgeGraph::from_text_triples(catalog.item_count(), rows);
    if duplicates > 0 {
        warn!(duplicates, "deduplicated repeated knowledge-graph triples");
    }
    let mut all_entities: HashSet<&str> = kg.entity_texts.iter().map(String::as_str).collect();
    all_entities.extend(head_entities.iter().map(String::as_str));
    let stats = KgStats {
        entities: all_entities.len(),
        tail_entities: kg.entity_count(),
        relations: kg.relation_count(),
        triples: kg.triples.len(),
        dropped_unmapped: dropped,
        duplicates,
    };
    Ok((kg, stats))
}

/// Paths of the conventional MovieLens-1M file set inside `dir`.
pub fn movielens_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("ratings.dat"), dir.join("movies.dat"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ix(user: usize, item: usize, rating: u8, timestamp: i64) -> Interaction {
        Interaction {
            user,
            item,
            rating,
            timestamp,
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn empty_file_has_no_interactions() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "ratings.dat", "");
        let err = load_ratings(&p, DatasetFormat::MovieLens).unwrap_err();
        assert!(err.to_string().contains("no interactions"), "{err}");
    }

    #[test]
    fn single_rating_gives_one_by_one_catalog() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "ratings.dat", "7::42::5::978300760\n");
        write(dir.path(), "movies.dat", "42::Heat (1995)::Action\n");
        let (ds, stats) = load_ratings(&p, DatasetFormat::MovieLens).unwrap();
        assert_eq!(ds.catalog.user_count(), 1);
        assert_eq!(ds.catalog.item_count(), 1);
        assert_eq!(ds.catalog.item_titles, vec!["Heat (1995)"]);
        assert_eq!(stats.item_id_space, Some(42));
        assert_eq!(ds.interactions, vec![ix(0, 0, 5, 978300760)]);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.csv", "1,2,5,10\n1,3,oops,11\n");
        let err = load_ratings(&p, DatasetFormat::Csv).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        let p = write(dir.path(), "r2.csv", "1,2,7,10\n");
        assert!(load_ratings(&p, DatasetFormat::Csv).is_err());
    }

    #[test]
    fn csv_header_and_float_ratings() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.csv", "user,item,rating,timestamp\nA1,B9,4.0,5\nA0,B9,3,6\n");
        let (ds, _) = load_ratings(&p, DatasetFormat::Csv).unwrap();
        assert_eq!(ds.catalog.user_raw_ids, vec!["A0", "A1"]);
        assert_eq!(ds.interactions.len(), 2);
        assert_eq!(ds.catalog.item_titles, vec!["Item B9"]);
    }

    #[test]
    fn unknown_format_tag() {
        assert!(matches!("parquet".parse::<DatasetFormat>(), Err(Error::UnknownFormat(_))));
        assert_eq!("ml".parse::<DatasetFormat>().unwrap(), DatasetFormat::MovieLens);
    }

    #[test]
    fn filter_removes_sparse_user() {
        let mut xs = Vec::new();
        // Ten users rate items 0..10; user 10 rates only 9 of them.
        for u in 0..10 {
            for i in 0..10 {
                xs.push(ix(u, i, 4, (u * 100 + i) as i64));
            }
        }
        for i in 0..9 {
            xs.push(ix(10, i, 4, 5000 + i as i64));
        }
        let out = filter_min_interactions(&xs, 10);
        assert!(out.iter().all(|x| x.user != 10));
        assert_eq!(out.len(), 100);
        assert_eq!(filter_min_interactions(&out, 10), out);
    }

    #[test]
    fn split_basic_and_ties() {
        let xs = vec![ix(0, 0, 5, 1), ix(0, 1, 5, 2), ix(0, 2, 5, 3)];
        let s = leave_one_out_split(&xs).unwrap();
        assert_eq!(s.test[&0].timestamp, 3);
        assert_eq!(s.validation[&0].timestamp, 2);
        assert_eq!(s.train, vec![ix(0, 0, 5, 1)]);

        let xs = vec![ix(0, 0, 5, 1), ix(0, 4, 5, 9), ix(0, 7, 5, 9), ix(0, 2, 5, 3)];
        let s = leave_one_out_split(&xs).unwrap();
        assert_eq!(s.test[&0].item, 7);
        assert_eq!(s.validation[&0].item, 4);
    }

    #[test]
    fn split_rejects_short_history() {
        let xs = vec![ix(0, 0, 5, 1), ix(0, 1, 5, 2), ix(0, 2, 5, 3), ix(1, 0, 5, 1), ix(1, 1, 3, 2)];
        match leave_one_out_split(&xs) {
            Err(Error::TooFewInteractions { user, count, .. }) => {
                assert_eq!((user, count), (1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kg_load_drops_unmapped_and_dedups() {
        let dir = tempfile::tempdir().unwrap();
        let ratings = write(dir.path(), "ratings.dat", "1::10::5::1\n1::20::4::2\n");
        write(dir.path(), "movies.dat", "10::The Terminator (1984)::Action\n20::Heat (1995)::Action\n");
        let (ds, _) = load_ratings(&ratings, DatasetFormat::MovieLens).unwrap();
        let map = write(dir.path(), "map.tsv", "10\tm.0term\n20\tm.0heat\n30\tm.0gone\n");
        let kg_path = write(
            dir.path(),
            "kg.tsv",
            "10\tdirector_film\tCameron\n10\tdirector_film\tCameron\nm.0heat\tfilm.genre\tCrime\n30\tdirector_film\tNobody\n",
        );
        let (kg, stats) = load_kg(&kg_path, &map, &ds.catalog).unwrap();
        assert_eq!(kg.triples.len(), 2);
        assert_eq!(stats.duplicates, 1);
        assert_eq!(stats.dropped_unmapped, 1);
        assert_eq!(stats.relations, 2);
        assert_eq!(stats.tail_entities, 2);
        assert_eq!(stats.entities, 4);
        kg.validate().unwrap();
        assert_eq!(kg.neighbors()[0], vec![0]);

        let bad = write(dir.path(), "bad.tsv", "10\tdirector_film\t\n");
        assert!(load_kg(&bad, &map, &ds.catalog).is_err());
    }
}
