//! On-disk artifacts: the ingested snapshot directory, the GAT embedding
//! file and the CF model file.
//!
//! Binary files share one header convention: a 4-byte magic, a `u32`
//! version, then `u64` dimensions, all little-endian, followed by row-major
//! `f64` matrices.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::baserec::CfModel;
use crate::corpus::{Catalog, Dataset, Interaction, KgStats, KnowledgeGraph, RatingStats, Triple};
use crate::error::{Error, Result};
use crate::gat::{EmbeddingStore, GatParams};

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"KRGE";
pub const CF_MAGIC: &[u8; 4] = b"KRGC";
pub const INTERACTIONS_MAGIC: &[u8; 4] = b"KRGI";
pub const TRIPLES_MAGIC: &[u8; 4] = b"KRGT";
pub const VERSION: u32 = 1;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], dims: &[u64]) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LE>(VERSION)?;
    for &d in dims {
        w.write_u64::<LE>(d)?;
    }
    Ok(())
}

fn read_header<const N: usize>(r: &mut impl Read, magic: &[u8; 4], path: &Path) -> Result<[usize; N]> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|e| Error::io(path, e))?;
    if &m != magic {
        return Err(format_err(
            path,
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&m), String::from_utf8_lossy(magic)),
        ));
    }
    let version = r.read_u32::<LE>().map_err(|e| Error::io(path, e))?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; N];
    for d in &mut dims {
        *d = r.read_u64::<LE>().map_err(|e| Error::io(path, e))? as usize;
    }
    Ok(dims)
}

fn write_f64s<'a>(w: &mut impl Write, values: impl IntoIterator<Item = &'a f64>) -> std::io::Result<()> {
    for &v in values {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read, rows: usize, cols: usize) -> std::io::Result<Array2<f64>> {
    let mut buf = vec![0.0; rows * cols];
    r.read_f64_into::<LE>(&mut buf)?;
    Ok(Array2::from_shape_vec((rows, cols), buf).expect("buffer sized from shape"))
}

fn expect_eof(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe).map_err(|e| Error::io(path, e))? {
        0 => Ok(()),
        _ => Err(format_err(path, "trailing bytes after payload")),
    }
}

/// Header `(N, E, d)`, then h, e, h′, W, β, the LeakyReLU slope, the edge
/// count and `(i, j, α)` edges, every value as `f64`.
pub fn write_embeddings(path: &Path, store: &EmbeddingStore, params: &GatParams) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let (n, e, d) = (store.item_count(), store.entity_count(), store.dim());
    write_header(&mut w, EMBEDDINGS_MAGIC, &[n as u64, e as u64, d as u64]).map_err(io)?;
    write_f64s(&mut w, store.items.iter()).map_err(io)?;
    write_f64s(&mut w, store.entities.iter()).map_err(io)?;
    write_f64s(&mut w, store.updated_items.iter()).map_err(io)?;
    write_f64s(&mut w, params.weight.iter()).map_err(io)?;
    write_f64s(&mut w, params.attention.iter()).map_err(io)?;
    w.write_f64::<LE>(params.leaky_slope).map_err(io)?;
    let edges: usize = store.neighbors.iter().map(Vec::len).sum();
    w.write_u64::<LE>(edges as u64).map_err(io)?;
    for (i, (ns, alphas)) in store.neighbors.iter().zip(&store.attention).enumerate() {
        for (&j, &a) in ns.iter().zip(alphas) {
            write_f64s(&mut w, [i as f64, j as f64, a].iter()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_embeddings(path: &Path) -> Result<(EmbeddingStore, GatParams)> {
    let mut r = open(path)?;
    let io = |e| Error::io(path, e);
    let [n, e, d] = read_header::<3>(&mut r, EMBEDDINGS_MAGIC, path)?;
    let items = read_matrix(&mut r, n, d).map_err(io)?;
    let entities = read_matrix(&mut r, e, d).map_err(io)?;
    let updated_items = read_matrix(&mut r, n, d).map_err(io)?;
    let weight = read_matrix(&mut r, d, d).map_err(io)?;
    let attention = Array1::from(read_matrix(&mut r, 1, 2 * d).map_err(io)?.into_raw_vec_and_offset().0);
    let leaky_slope = r.read_f64::<LE>().map_err(io)?;
    let edges = r.read_u64::<LE>().map_err(io)? as usize;
    let mut neighbors = vec![Vec::new(); n];
    let mut alphas = vec![Vec::new(); n];
    for _ in 0..edges {
        let i = r.read_f64::<LE>().map_err(io)?;
        let j = r.read_f64::<LE>().map_err(io)?;
        let a = r.read_f64::<LE>().map_err(io)?;
        let (i, j) = (i as usize, j as usize);
        if i >= n || j >= e {
            return Err(format_err(path, format!("edge ({i}, {j}) outside {n} items x {e} entities")));
        }
        neighbors[i].push(j);
        alphas[i].push(a);
    }
    expect_eof(&mut r, path)?;
    let params = GatParams {
        weight,
        attention,
        leaky_slope,
    };
    params.validate()?;
    Ok((
        EmbeddingStore {
            items,
            entities,
            updated_items,
            neighbors,
            attention: alphas,
        },
        params,
    ))
}

/// Header `(M, N, d, layers)`, then the propagated user and item matrices.
pub fn write_cf(path: &Path, model: &CfModel) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let dims = [
        model.user_vectors.nrows() as u64,
        model.item_vectors.nrows() as u64,
        model.user_vectors.ncols() as u64,
        model.layers as u64,
    ];
    write_header(&mut w, CF_MAGIC, &dims).map_err(io)?;
    write_f64s(&mut w, model.user_vectors.iter()).map_err(io)?;
    write_f64s(&mut w, model.item_vectors.iter()).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_cf(path: &Path) -> Result<CfModel> {
    let mut r = open(path)?;
    let io = |e| Error::io(path, e);
    let [m, n, d, layers] = read_header::<4>(&mut r, CF_MAGIC, path)?;
    let user_vectors = read_matrix(&mut r, m, d).map_err(io)?;
    let item_vectors = read_matrix(&mut r, n, d).map_err(io)?;
    expect_eof(&mut r, path)?;
    Ok(CfModel {
        user_vectors,
        item_vectors,
        layers,
    })
}

/// Counts reported by `ingest` and stored next to the snapshot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SnapshotStats {
    pub ratings: RatingStats,
    pub min_interactions: usize,
    pub users_after_filter: usize,
    pub items_after_filter: usize,
    pub interactions_after_filter: usize,
    pub kg: Option<KgStats>,
}

/// Everything `ingest` produces. The leave-one-out split is not stored; it
/// is a deterministic function of the interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub dataset: Dataset,
    pub kg: KnowledgeGraph,
    pub stats: SnapshotStats,
}

#[derive(Serialize, Deserialize)]
struct KgTexts {
    item_count: usize,
    entity_texts: Vec<String>,
    relation_texts: Vec<String>,
}

pub struct SnapshotPaths {
    pub interactions: PathBuf,
    pub catalog: PathBuf,
    pub triples: PathBuf,
    pub kg_texts: PathBuf,
    pub stats: PathBuf,
}

impl SnapshotPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            interactions: dir.join("interactions.bin"),
            catalog: dir.join("catalog.json"),
            triples: dir.join("triples.bin"),
            kg_texts: dir.join("kg_texts.json"),
            stats: dir.join("stats.json"),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

impl Snapshot {
    /// Interactions and triples are stored column by column.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let paths = SnapshotPaths::new(dir);

        let xs = &self.dataset.interactions;
        let path = &paths.interactions;
        let io = |e| Error::io(path, e);
        let mut w = create(path)?;
        write_header(&mut w, INTERACTIONS_MAGIC, &[xs.len() as u64]).map_err(io)?;
        for x in xs {
            w.write_u64::<LE>(x.user as u64).map_err(io)?;
        }
        for x in xs {
            w.write_u64::<LE>(x.item as u64).map_err(io)?;
        }
        for x in xs {
            w.write_u8(x.rating).map_err(io)?;
        }
        for x in xs {
            w.write_i64::<LE>(x.timestamp).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let ts = &self.kg.triples;
        let path = &paths.triples;
        let io = |e| Error::io(path, e);
        let mut w = create(path)?;
        write_header(&mut w, TRIPLES_MAGIC, &[ts.len() as u64]).map_err(io)?;
        for column in [|t: &Triple| t.head, |t: &Triple| t.relation, |t: &Triple| t.tail] {
            for t in ts {
                w.write_u64::<LE>(column(t) as u64).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;

        write_json(&paths.catalog, &self.dataset.catalog)?;
        write_json(
            &paths.kg_texts,
            &KgTexts {
                item_count: self.kg.item_count,
                entity_texts: self.kg.entity_texts.clone(),
                relation_texts: self.kg.relation_texts.clone(),
            },
        )?;
        write_json(&paths.stats, &self.stats)
    }

    pub fn read(dir: &Path) -> Result<Snapshot> {
        let paths = SnapshotPaths::new(dir);

        let path = &paths.interactions;
        let io = |e| Error::io(path, e);
        let mut r = open(path)?;
        let [n] = read_header::<1>(&mut r, INTERACTIONS_MAGIC, path)?;
        let mut users = vec![0u64; n];
        let mut items = vec![0u64; n];
        let mut ratings = vec![0u8; n];
        let mut stamps = vec![0i64; n];
        r.read_u64_into::<LE>(&mut users).map_err(io)?;
        r.read_u64_into::<LE>(&mut items).map_err(io)?;
        r.read_exact(&mut ratings).map_err(io)?;
        r.read_i64_into::<LE>(&mut stamps).map_err(io)?;
        expect_eof(&mut r, path)?;
        let interactions = (0..n)
            .map(|k| Interaction {
                user: users[k] as usize,
                item: items[k] as usize,
                rating: ratings[k],
                timestamp: stamps[k],
            })
            .collect();

        let path = &paths.triples;
        let io = |e| Error::io(path, e);
        let mut r = open(path)?;
        let [m] = read_header::<1>(&mut r, TRIPLES_MAGIC, path)?;
        let mut cols = [vec![0u64; m], vec![0u64; m], vec![0u64; m]];
        for c in &mut cols {
            r.read_u64_into::<LE>(c).map_err(io)?;
        }
        expect_eof(&mut r, path)?;
        let triples = (0..m)
            .map(|k| Triple {
                head: cols[0][k] as usize,
                relation: cols[1][k] as usize,
                tail: cols[2][k] as usize,
            })
            .collect();

        let catalog: Catalog = read_json(&paths.catalog)?;
        let texts: KgTexts = read_json(&paths.kg_texts)?;
        let stats: SnapshotStats = read_json(&paths.stats)?;
        let kg = KnowledgeGraph {
            triples,
            entity_texts: texts.entity_texts,
            relation_texts: texts.relation_texts,
            item_count: texts.item_count,
        };
        kg.validate()?;
        let dataset = Dataset { interactions, catalog };
        if let Some(bad) = dataset
            .interactions
            .iter()
            .find(|x| x.user >= dataset.catalog.user_count() || x.item >= dataset.catalog.item_count())
        {
            return Err(format_err(
                &paths.interactions,
                format!("interaction ({}, {}) outside the catalog", bad.user, bad.item),
            ));
        }
        Ok(Snapshot { dataset, kg, stats })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_store() -> (EmbeddingStore, GatParams) {
        let store = EmbeddingStore {
            items: array![[0.1, -0.2], [0.3, 0.4]],
            entities: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            updated_items: array![[0.5, 0.5], [-1.0, 1.0]],
            neighbors: vec![vec![0, 2], vec![1]],
            attention: vec![vec![0.25, 0.75], vec![1.0]],
        };
        let params = GatParams {
            weight: array![[1.0, 0.5], [-0.5, 1.0]],
            attention: array![0.1, 0.2, 0.3, 0.4],
            leaky_slope: 0.2,
        };
        (store, params)
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let (store, params) = toy_store();
        write_embeddings(&path, &store, &params).unwrap();
        let (s2, p2) = read_embeddings(&path).unwrap();
        assert_eq!(s2, store);
        assert_eq!(p2, params);
        // 4 magic + 4 version + 3 dims + (2+3+2)*2 + 4 + 4 + slope + count + 3 edges * 3
        let expected = 4 + 4 + 8 * (3 + 14 + 4 + 4 + 1 + 1 + 9);
        assert_eq!(fs::metadata(&path).unwrap().len(), expected as u64);
    }

    #[test]
    fn embeddings_header_is_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let (store, params) = toy_store();
        write_embeddings(&path, &store, &params).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"KRGE");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..16], 2u64.to_le_bytes());
        assert_eq!(bytes[16..24], 3u64.to_le_bytes());
        assert_eq!(bytes[24..32], 2u64.to_le_bytes());
        assert_eq!(bytes[32..40], 0.1f64.to_le_bytes());
    }

    #[test]
    fn wrong_magic_and_truncation_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let (store, params) = toy_store();
        write_embeddings(&path, &store, &params).unwrap();
        let cf_err = read_cf(&path).unwrap_err();
        assert!(cf_err.to_string().contains("magic"), "{cf_err}");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_embeddings(&path).is_err());
    }

    #[test]
    fn cf_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cf.bin");
        let model = CfModel {
            user_vectors: array![[1.0, 2.0, 3.0]],
            item_vectors: array![[0.0, -1.0, 2.5], [4.0, 4.0, 4.0]],
            layers: 2,
        };
        write_cf(&path, &model).unwrap();
        assert_eq!(read_cf(&path).unwrap(), model);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (kg, _) = KnowledgeGraph::from_text_triples(2, [(0, "genre", "Drama"), (1, "director_film", "Lang")]);
        let snap = Snapshot {
            dataset: Dataset {
                interactions: vec![
                    Interaction {
                        user: 0,
                        item: 1,
                        rating: 5,
                        timestamp: -3,
                    },
                    Interaction {
                        user: 0,
                        item: 0,
                        rating: 2,
                        timestamp: 978_300_760,
                    },
                ],
                catalog: Catalog {
                    item_titles: vec!["Metropolis (1927)".into(), "M (1931)".into()],
                    item_raw_ids: vec!["10".into(), "20".into()],
                    user_raw_ids: vec!["7".into()],
                },
            },
            kg,
            stats: SnapshotStats::default(),
        };
        snap.write(dir.path()).unwrap();
        assert_eq!(Snapshot::read(dir.path()).unwrap(), snap);
    }
}
