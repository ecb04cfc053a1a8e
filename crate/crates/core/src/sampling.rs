//! Representative-user sampling for instruction construction.
//!
//! Users are weighted by interaction count, partitioned by k-means over
//! their CF vectors, and drawn cluster by cluster with a quota proportional
//! to cluster size. Each draw multiplies the drawn user's weight by a decay
//! factor so repeated picks become progressively less likely.

use ndarray::{Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DatasetSplit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub n_clusters: usize,
    pub decay_factor: f64,
    pub interaction_weight_exponent: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            n_clusters: 10,
            decay_factor: 0.9,
            interaction_weight_exponent: 1.0,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_clusters == 0 {
            return Err(Error::Config("n_samples and n_clusters must be at least 1".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config(format!("decay_factor {} not in (0, 1)", self.decay_factor)));
        }
        if !(self.interaction_weight_exponent >= 0.0) {
            return Err(Error::Config("interaction_weight_exponent must be non-negative".into()));
        }
        Ok(())
    }
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from `k` distinct seeded starting points. Stops after
/// [`KMEANS_MAX_ITERS`] rounds or once no centroid moves by more than
/// [`KMEANS_TOLERANCE`]. The returned assignment is nearest-centroid with
/// respect to the returned centroids.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = index::sample(&mut rng, n, k).into_vec();
    starts.sort_unstable();
    let mut centroids = points.select(ndarray::Axis(0), &starts);
    let mut assignments = vec![0; n];
    let mut iterations = 0;

    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        for (p, a) in assignments.iter_mut().enumerate() {
            *a = nearest(points.row(p), &centroids).0;
        }
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &a) in assignments.iter().enumerate() {
            sums.row_mut(a).scaled_add(1.0, &points.row(p));
            counts[a] += 1;
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let next = if counts[c] == 0 {
                // Re-seed an empty cluster at the point farthest from its
                // centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centroids.row(assignments[a]));
                        let db = sq_dist(points.row(b), centroids.row(assignments[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                points.row(far).to_owned()
            } else {
                sums.row(c).mapv(|v| v / counts[c] as f64)
            };
            shift = shift.max(sq_dist(centroids.row(c), next.view()).sqrt());
            centroids.row_mut(c).assign(&next);
        }
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }
    for (p, a) in assignments.iter_mut().enumerate() {
        *a = nearest(points.row(p), &centroids).0;
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
    })
}

/// Splits `total` draws across clusters in proportion to their sizes,
/// largest remainders first.
pub fn proportional_quotas(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = total - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for c in order {
        if remaining == 0 {
            break;
        }
        if sizes[c] > 0 {
            quotas[c] += 1;
            remaining -= 1;
        }
    }
    quotas
}

/// Decaying weighted sampler over a fixed population.
#[derive(Debug, Clone)]
pub struct DecayingSampler {
    weights: Vec<f64>,
    decay: f64,
}

impl DecayingSampler {
    pub fn new(weights: Vec<f64>, decay: f64) -> Self {
        Self { weights, decay }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Draws one index and decays its weight.
    pub fn draw(&mut self, rng: &mut impl rand::Rng) -> usize {
        let dist = WeightedIndex::new(&self.weights).expect("weights are positive and finite");
        let pick = dist.sample(rng);
        self.weights[pick] *= self.decay;
        // Keep weights representable after many draws of the same user.
        let max = self.weights.iter().copied().fold(0.0, f64::max);
        if max < 1e-200 {
            for w in &mut self.weights {
                *w /= max;
            }
        }
        pick
    }
}

/// Outcome of [`sample_users`], with the clustering it used.
#[derive(Debug, Clone)]
pub struct UserSample {
    pub users: Vec<usize>,
    pub clusters: KMeans,
    pub quotas: Vec<usize>,
}

/// Draws `n_samples` users with replacement. Users with no training
/// interactions are never drawn.
pub fn sample_users(split: &DatasetSplit, user_embeddings: &Array2<f64>, config: &SamplingConfig) -> Result<UserSample> {
    config.validate()?;
    let n_users = user_embeddings.nrows();
    if config.n_clusters > n_users {
        return Err(Error::Config(format!(
            "n_clusters {} exceeds the {} users available",
            config.n_clusters, n_users
        )));
    }
    let clusters = kmeans(user_embeddings, config.n_clusters, config.seed)?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.n_clusters];
    for (u, &c) in clusters.assignments.iter().enumerate() {
        if !split.train_for(u).is_empty() {
            members[c].push(u);
        }
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let quotas = proportional_quotas(&sizes, config.n_samples);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut users = Vec::with_capacity(config.n_samples);
    for (cluster, quota) in members.iter().zip(&quotas) {
        if *quota == 0 {
            continue;
        }
        let weights = cluster
            .iter()
            .map(|&u| (split.train_for(u).len() as f64).powf(config.interaction_weight_exponent))
            .collect();
        let mut sampler = DecayingSampler::new(weights, config.decay_factor);
        for _ in 0..*quota {
            users.push(cluster[sampler.draw(&mut rng)]);
        }
    }
    Ok(UserSample {
        users,
        clusters,
        quotas,
    })
}
