//! A small collaborative-filtering recommender supplying the "Hint 1"
//! ranking, inference-time candidate sets and user vectors for clustered
//! sampling.
//!
//! With `layers = 0` this is matrix factorisation trained with BPR. With
//! `layers ≥ 1` the scored vectors are the mean of `layers + 1` successive
//! propagations of the embedding table over the symmetric-normalised
//! user–item graph (LightGCN). Propagation is linear and symmetric, so the
//! gradient flows back through the same operator.

use std::collections::{BTreeMap, HashSet};

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::corpus::DatasetSplit;
use crate::error::{Error, Result};
use crate::gat::xavier_bound;

pub const TRAIN_CANDIDATES: usize = 10;
pub const INFERENCE_CANDIDATES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfConfig {
    pub dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// L2 penalty on the embedding rows touched by a batch.
    pub l2: f64,
    pub seed: u64,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            epochs: 20,
            learning_rate: 1e-2,
            batch_size: 8192,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Final (post-propagation) user and item vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CfModel {
    pub user_vectors: Array2<f64>,
    pub item_vectors: Array2<f64>,
    pub layers: usize,
}

impl CfModel {
    pub fn user_count(&self) -> usize {
        self.user_vectors.nrows()
    }

    pub fn item_count(&self) -> usize {
        self.item_vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.user_vectors.ncols()
    }

    fn check_user(&self, user: usize) -> Result<()> {
        if user >= self.user_count() {
            return Err(Error::OutOfRange {
                kind: "user",
                id: user,
                size: self.user_count(),
            });
        }
        Ok(())
    }

    fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.item_count() {
            return Err(Error::OutOfRange {
                kind: "item",
                id: item,
                size: self.item_count(),
            });
        }
        Ok(())
    }
}

pub fn score(model: &CfModel, user: usize, item: usize) -> Result<f64> {
    model.check_user(user)?;
    model.check_item(item)?;
    Ok(model.user_vectors.row(user).dot(&model.item_vectors.row(item)))
}

/// Candidates by descending score; equal scores keep ascending item order.
pub fn rank_candidates(model: &CfModel, user: usize, candidates: &[usize]) -> Result<Vec<usize>> {
    let mut scored = candidates
        .iter()
        .map(|&i| score(model, user, i).map(|s| (i, s)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Symmetric-normalised adjacency of the bipartite interaction graph.
/// Nodes `0..M` are users, `M..M+N` are items.
#[derive(Debug, Clone)]
pub struct Propagation {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
    layers: usize,
}

impl Propagation {
    pub fn new(pairs: &[(usize, usize)], users: usize, items: usize, layers: usize) -> Self {
        let nodes = users + items;
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
        for &(u, i) in pairs {
            adj[u].push(users + i);
            adj[users + i].push(u);
        }
        let degree: Vec<f64> = adj.iter().map(|a| a.len() as f64).collect();
        let mut offsets = Vec::with_capacity(nodes + 1);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for (n, list) in adj.iter().enumerate() {
            for &m in list {
                targets.push(m);
                weights.push(1.0 / (degree[n] * degree[m]).sqrt());
            }
            offsets.push(targets.len());
        }
        Self {
            offsets,
            targets,
            weights,
            layers,
        }
    }

    fn step(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(n, mut row)| {
                for e in self.offsets[n]..self.offsets[n + 1] {
                    row.scaled_add(self.weights[e], &x.row(self.targets[e]));
                }
            });
        out
    }

    /// Mean of `x, Âx, …, Â^L x`. The identity when `layers == 0`.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        if self.layers == 0 {
            return x.clone();
        }
        let mut sum = x.clone();
        let mut current = x.clone();
        for _ in 0..self.layers {
            current = self.step(&current);
            sum += &current;
        }
        sum / (self.layers + 1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainedCf {
    pub model: CfModel,
    pub epoch_losses: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// BPR training over the split's training interactions.
pub fn train_cf(split: &DatasetSplit, item_count: usize, config: &CfConfig) -> Result<TrainedCf> {
    if split.train.is_empty() {
        return Err(Error::Empty("training interactions"));
    }
    if config.dim == 0 || config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("dim, batch_size and epochs must be at least 1".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    let users = split.user_count();
    let items = item_count;
    let d = config.dim;

    let mut pairs: Vec<(usize, usize)> = split.train.iter().map(|x| (x.user, x.item)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    if let Some(&(_, i)) = pairs.iter().find(|&&(_, i)| i >= items) {
        return Err(Error::OutOfRange {
            kind: "item",
            id: i,
            size: items,
        });
    }
    let positives: Vec<HashSet<usize>> = {
        let mut sets = vec![HashSet::new(); users];
        for &(u, i) in &pairs {
            sets[u].insert(i);
        }
        sets
    };
    let propagation = Propagation::new(&pairs, users, items, config.layers);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let nodes = users + items;
    let bound = xavier_bound(d, nodes);
    let mut ego = Array2::from_shape_simple_fn((nodes, d), || rng.random_range(-bound..=bound));

    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = Array2::<f64>::zeros((nodes, d));
    let mut v = Array2::<f64>::zeros((nodes, d));
    let mut step = 0i32;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut last_finite = None;

    for epoch in 0..config.epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<(usize, usize, usize)> = batch
                .iter()
                .filter_map(|&(u, i)| {
                    if positives[u].len() >= items {
                        return None;
                    }
                    let j = loop {
                        let j = rng.random_range(0..items);
                        if !positives[u].contains(&j) {
                            break j;
                        }
                    };
                    Some((u, i, j))
                })
                .collect();
            if samples.is_empty() {
                continue;
            }
            let scale = 1.0 / samples.len() as f64;
            let fin = propagation.apply(&ego);
            let mut grad_final = Array2::<f64>::zeros((nodes, d));
            let mut touched = Vec::with_capacity(samples.len() * 3);
            let mut batch_loss = 0.0;
            for &(u, i, j) in &samples {
                let (iu, ii, ij) = (u, users + i, users + j);
                let fu = fin.row(iu);
                let diff = &fin.row(ii) - &fin.row(ij);
                let x = fu.dot(&diff);
                batch_loss += softplus(-x);
                let c = -sigmoid(-x) * scale;
                grad_final.row_mut(iu).scaled_add(c, &diff);
                grad_final.row_mut(ii).scaled_add(c, &fu);
                grad_final.row_mut(ij).scaled_add(-c, &fu);
                touched.extend([iu, ii, ij]);
            }
            let mut grad = propagation.apply(&grad_final);
            touched.sort_unstable();
            touched.dedup();
            for &n in &touched {
                grad.row_mut(n).scaled_add(config.l2 * scale, &ego.row(n));
                batch_loss += 0.5 * config.l2 * ego.row(n).dot(&ego.row(n));
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_finite_epoch: last_finite,
                });
            }
            total += batch_loss;

            step += 1;
            let lr_t = config.learning_rate * (1.0 - f64::powi(b2, step)).sqrt() / (1.0 - f64::powi(b1, step));
            ndarray::Zip::from(&mut ego)
                .and(&mut m)
                .and(&mut v)
                .and(&grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr_t * *m / (v.sqrt() + eps);
                });
        }
        let mean = total / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_finite_epoch: last_finite,
            });
        }
        last_finite = Some(epoch);
        debug!(epoch, loss = mean, "cf epoch");
        epoch_losses.push(mean);
    }

    let fin = propagation.apply(&ego);
    let model = CfModel {
        user_vectors: fin.slice(ndarray::s![..users, ..]).to_owned(),
        item_vectors: fin.slice(ndarray::s![users.., ..]).to_owned(),
        layers: config.layers,
    };
    info!(users, items, final_loss = epoch_losses.last().copied().unwrap_or(0.0), "cf training finished");
    Ok(TrainedCf { model, epoch_losses })
}

/// A candidate list for one user. `ground_truth` is filled only for
/// training lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateList {
    pub user: usize,
    pub items: Vec<usize>,
    pub ground_truth: Vec<usize>,
}

/// Three items from the user's highest rating tier, two from the next tier
/// and five never-interacted items, shuffled. The five rated items are the
/// ground truth, ordered by rating then recency.
pub fn build_candidate_list_train(
    user: usize,
    split: &DatasetSplit,
    item_count: usize,
    rng: &mut impl Rng,
) -> Result<CandidateList> {
    let history = split.train_for(user);
    let mut tiers: BTreeMap<u8, Vec<(usize, i64)>> = BTreeMap::new();
    for x in history {
        tiers.entry(x.rating).or_default().push((x.item, x.timestamp));
    }
    let mut tier_iter = tiers.iter().rev();
    let top = tier_iter.next();
    let second = tier_iter.next();

    let top_len = top.map_or(0, |(_, v)| v.len());
    let second_len = second.map_or(0, |(_, v)| v.len());
    if top_len < 3 || second_len < 2 {
        return Err(Error::TierDeficit {
            user,
            deficit: format!(
                "top tier has {top_len} items (need 3), second tier has {second_len} (need 2)"
            ),
        });
    }
    let (top_rating, top_items) = top.unwrap();
    let (second_rating, second_items) = second.unwrap();

    let seen = split.seen_items(user);
    if item_count.saturating_sub(seen.len()) < 5 {
        return Err(Error::TierDeficit {
            user,
            deficit: format!("only {} unrated items available (need 5)", item_count - seen.len()),
        });
    }

    let mut rated: Vec<(u8, i64, usize)> = Vec::with_capacity(5);
    for (rating, pool, n) in [(*top_rating, top_items, 3), (*second_rating, second_items, 2)] {
        let mut pool = pool.clone();
        pool.sort_unstable();
        rated.extend(pool.choose_multiple(rng, n).map(|&(item, ts)| (rating, ts, item)));
    }
    rated.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    let ground_truth: Vec<usize> = rated.iter().map(|r| r.2).collect();

    let mut unrated = Vec::with_capacity(5);
    while unrated.len() < 5 {
        let j = rng.random_range(0..item_count);
        if !seen.contains(&j) && !unrated.contains(&j) {
            unrated.push(j);
        }
    }

    let mut items: Vec<usize> = ground_truth.iter().copied().chain(unrated).collect();
    items.shuffle(rng);
    Ok(CandidateList {
        user,
        items,
        ground_truth,
    })
}

/// The `size` best-scoring items the user has not interacted with in train
/// or validation, best first. With `force_include_test`, the held-out test
/// item replaces the weakest candidate when it did not make the cut.
pub fn candidate_set_inference(
    model: &CfModel,
    user: usize,
    split: &DatasetSplit,
    size: usize,
    force_include_test: bool,
) -> Result<CandidateList> {
    model.check_user(user)?;
    let mut excluded: HashSet<usize> = split.train_for(user).iter().map(|x| x.item).collect();
    excluded.extend(split.validation.get(&user).map(|x| x.item));
    let u = model.user_vectors.row(user);
    let mut scored: Vec<(usize, f64)> = model
        .item_vectors
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(i, v): (usize, ArrayView1<f64>)| (i, u.dot(&v)))
        .collect();
    let by_score = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let k = size.min(scored.len());
    if k > 0 && k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_score);
    }
    scored.truncate(k);
    if let (true, Some(test)) = (force_include_test, split.test.get(&user)) {
        if k > 0 && !scored.iter().any(|(i, _)| *i == test.item) {
            scored.sort_by(by_score);
            scored.pop();
            scored.push((test.item, u.dot(&model.item_vectors.row(test.item))));
        }
    }
    scored.sort_by(by_score);
    Ok(CandidateList {
        user,
        items: scored.into_iter().map(|(i, _)| i).collect(),
        ground_truth: Vec::new(),
    })
}
