//! Single-layer, single-head graph attention over the item → entity edges of
//! the knowledge graph, pre-trained with a margin ranking loss.
//!
//! For an item `i` with tail entities `N(i)`:
//!
//! ```text
//! s_ij   = LeakyReLU(β · [W h_i ‖ W e_j])
//! α_ij   = softmax_j(s_ij)
//! h'_i   = Σ_j α_ij W e_j
//! ```
//!
//! Items without edges fall back to `h'_i = W h_i`.
//!
//! The loss scores a positive edge `(i, k)` against a sampled non-edge
//! `(i, j)` with the inner product of the aggregated item vector and the raw
//! entity vector, `φ(i, x) = h'_i · e_x`, the same similarity the retriever
//! ranks by. Gradients are derived by hand and checked against finite
//! differences in the tests.

use std::collections::{BTreeMap, HashSet};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::corpus::KnowledgeGraph;
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Shared transform `W` (d×d), attention vector `β` (2d) and the LeakyReLU
/// negative slope.
#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    pub weight: Array2<f64>,
    pub attention: Array1<f64>,
    pub leaky_slope: f64,
}

impl GatParams {
    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.weight.ncols() != d {
            return Err(Error::Config(format!(
                "weight must be square and non-empty, got {:?}",
                self.weight.dim()
            )));
        }
        if self.attention.len() != 2 * d {
            return Err(Error::Config(format!(
                "attention vector has length {}, expected {}",
                self.attention.len(),
                2 * d
            )));
        }
        if !self.weight.iter().chain(self.attention.iter()).all(|v| v.is_finite()) {
            return Err(Error::Config("non-finite GAT parameter".into()));
        }
        Ok(())
    }

    fn leaky(&self, x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            self.leaky_slope * x
        }
    }

    fn leaky_grad(&self, x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else {
            self.leaky_slope
        }
    }
}

/// Item and entity tables plus the attention weights and aggregated item
/// vectors materialised from them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub items: Array2<f64>,
    pub entities: Array2<f64>,
    pub updated_items: Array2<f64>,
    /// Distinct tail entities per item, ascending.
    pub neighbors: Vec<Vec<usize>>,
    /// `attention[i][n]` is α between item `i` and `neighbors[i][n]`.
    pub attention: Vec<Vec<f64>>,
}

impl EmbeddingStore {
    pub fn item_count(&self) -> usize {
        self.items.nrows()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.nrows()
    }

    pub fn dim(&self) -> usize {
        self.items.ncols()
    }

    /// Stored α for edge `(item, entity)`, if the edge exists and has been
    /// materialised.
    pub fn alpha(&self, item: usize, entity: usize) -> Option<f64> {
        let pos = self.neighbors.get(item)?.binary_search(&entity).ok()?;
        self.attention.get(item)?.get(pos).copied()
    }

    /// Recomputes α and h' for every item from the current tables.
    pub fn materialize(&mut self, params: &GatParams, chunk_size: usize) {
        let n = self.item_count();
        let results: Vec<(Vec<f64>, Array1<f64>)> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(chunk_size.max(1))
            .flat_map_iter(|chunk| {
                chunk.iter().map(|&i| {
                    let f = forward(i, params, self);
                    (f.alpha, f.updated)
                })
            })
            .collect();
        for (i, (alpha, updated)) in results.into_iter().enumerate() {
            self.attention[i] = alpha;
            self.updated_items.row_mut(i).assign(&updated);
        }
    }
}

/// Which way round the hinge compares positive and negative similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossForm {
    /// `max(0, margin + φ(neg) − φ(pos))`: positives pushed above negatives.
    #[default]
    Hinge,
    /// `max(0, margin + φ(pos) − φ(neg))`, the literal operand order some
    /// write-ups print. Kept for comparison runs.
    Reversed,
}

impl std::str::FromStr for LossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(LossForm::Hinge),
            "reversed" => Ok(LossForm::Reversed),
            other => Err(Error::Config(format!("unknown loss form `{other}` (expected hinge or reversed)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatTrainConfig {
    pub dim: usize,
    /// Positive triples per gradient step.
    pub batch_size: usize,
    /// Items whose edges are pooled and shuffled together before batching.
    pub chunk_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub margin: f64,
    pub negatives_per_positive: usize,
    pub seed: u64,
    pub loss_form: LossForm,
    pub leaky_slope: f64,
}

impl Default for GatTrainConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            batch_size: 10,
            chunk_size: 50,
            learning_rate: 1e-2,
            epochs: 20,
            margin: 1.0,
            negatives_per_positive: 1,
            seed: 0,
            loss_form: LossForm::Hinge,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl GatTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("chunk_size", self.chunk_size),
            ("epochs", self.epochs),
            ("negatives_per_positive", self.negatives_per_positive),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config("margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Half-width of the Glorot/Xavier uniform distribution.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn xavier(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = xavier_bound(fan_in, fan_out);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Xavier-initialised tables and parameters. Tables of shape (rows, d) use
/// fan_in = d, fan_out = rows; `β` is treated as a 1×2d matrix.
pub fn init_embeddings(kg: &KnowledgeGraph, config: &GatTrainConfig) -> Result<(EmbeddingStore, GatParams)> {
    if config.dim == 0 {
        return Err(Error::Config("embedding dimension must be at least 1".into()));
    }
    if kg.triples.is_empty() {
        return Err(Error::Empty("knowledge graph has no triples"));
    }
    let d = config.dim;
    let n = kg.item_count;
    let e = kg.entity_count();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let items = xavier(n, d, d, n, &mut rng);
    let entities = xavier(e, d, d, e, &mut rng);
    let weight = xavier(d, d, d, d, &mut rng);
    let attention = xavier(1, 2 * d, 2 * d, 1, &mut rng).index_axis_move(Axis(0), 0);

    let neighbors = kg.neighbors();
    let attention_rows = neighbors.iter().map(|nb| vec![0.0; nb.len()]).collect();
    let params = GatParams {
        weight,
        attention,
        leaky_slope: config.leaky_slope,
    };
    let mut store = EmbeddingStore {
        updated_items: Array2::zeros((n, d)),
        items,
        entities,
        neighbors,
        attention: attention_rows,
    };
    store.materialize(&params, config.chunk_size);
    Ok((store, params))
}

/// Intermediate values of the forward pass for one item.
struct Forward {
    transformed_item: Array1<f64>,
    /// `W e_j` per neighbour, one row each.
    transformed_neighbors: Array2<f64>,
    logits: Vec<f64>,
    alpha: Vec<f64>,
    updated: Array1<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / sum).collect()
}

fn forward(item: usize, params: &GatParams, store: &EmbeddingStore) -> Forward {
    let d = params.dim();
    let w = &params.weight;
    let transformed_item = w.dot(&store.items.row(item));
    let nb = &store.neighbors[item];
    let mut transformed_neighbors = Array2::zeros((nb.len(), d));
    for (row, &j) in nb.iter().enumerate() {
        transformed_neighbors
            .row_mut(row)
            .assign(&w.dot(&store.entities.row(j)));
    }
    if nb.is_empty() {
        return Forward {
            updated: transformed_item.clone(),
            transformed_item,
            transformed_neighbors,
            logits: Vec::new(),
            alpha: Vec::new(),
        };
    }
    let beta_self = params.attention.slice(s![..d]);
    let beta_nb = params.attention.slice(s![d..]);
    let self_term = beta_self.dot(&transformed_item);
    let logits: Vec<f64> = transformed_neighbors
        .rows()
        .into_iter()
        .map(|z| self_term + beta_nb.dot(&z))
        .collect();
    let alpha = softmax(&logits.iter().map(|&l| params.leaky(l)).collect::<Vec<_>>());
    let updated = Array1::from(alpha.clone()).dot(&transformed_neighbors);
    Forward {
        transformed_item,
        transformed_neighbors,
        logits,
        alpha,
        updated,
    }
}

/// Attention weights of `item` over its neighbours, as `(entity, α)` pairs in
/// ascending entity order. Empty for items without edges.
pub fn attention_weights(item: usize, params: &GatParams, store: &EmbeddingStore) -> Vec<(usize, f64)> {
    let f = forward(item, params, store);
    store.neighbors[item].iter().copied().zip(f.alpha).collect()
}

/// Aggregated item vector `h'_i`.
pub fn aggregate(item: usize, params: &GatParams, store: &EmbeddingStore) -> Array1<f64> {
    forward(item, params, store).updated
}

/// One ranking comparison: `positive` is a tail entity of `item`,
/// `negative` is not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContrastiveSample {
    pub item: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Gradient of the loss. Table gradients are sparse by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weight: Array2<f64>,
    pub attention: Array1<f64>,
    pub items: BTreeMap<usize, Array1<f64>>,
    pub entities: BTreeMap<usize, Array1<f64>>,
}

impl Gradients {
    fn zeros(d: usize) -> Self {
        Self {
            weight: Array2::zeros((d, d)),
            attention: Array1::zeros(2 * d),
            items: BTreeMap::new(),
            entities: BTreeMap::new(),
        }
    }

    fn is_zero(&self) -> bool {
        self.items.is_empty()
            && self.entities.is_empty()
            && self.weight.iter().chain(self.attention.iter()).all(|&v| v == 0.0)
    }
}

fn add_row(map: &mut BTreeMap<usize, Array1<f64>>, row: usize, delta: ArrayView1<f64>, scale: f64) {
    let d = delta.len();
    map.entry(row)
        .or_insert_with(|| Array1::zeros(d))
        .scaled_add(scale, &delta);
}

fn hinge_terms(form: LossForm, margin: f64, pos: f64, neg: f64) -> f64 {
    match form {
        LossForm::Hinge => margin + neg - pos,
        LossForm::Reversed => margin + pos - neg,
    }
}

fn check_batch(batch: &[ContrastiveSample], store: &EmbeddingStore) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("contrastive batch"));
    }
    for s in batch {
        if s.item >= store.item_count() {
            return Err(Error::OutOfRange {
                kind: "item",
                id: s.item,
                size: store.item_count(),
            });
        }
        for e in [s.positive, s.negative] {
            if e >= store.entity_count() {
                return Err(Error::OutOfRange {
                    kind: "entity",
                    id: e,
                    size: store.entity_count(),
                });
            }
        }
    }
    Ok(())
}

/// Mean hinge loss over `batch`.
pub fn contrastive_loss(
    batch: &[ContrastiveSample],
    params: &GatParams,
    store: &EmbeddingStore,
    margin: f64,
    form: LossForm,
) -> Result<f64> {
    check_batch(batch, store)?;
    let mut cache: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
    let mut total = 0.0;
    for s in batch {
        let h = cache
            .entry(s.item)
            .or_insert_with(|| aggregate(s.item, params, store));
        let pos = h.dot(&store.entities.row(s.positive));
        let neg = h.dot(&store.entities.row(s.negative));
        total += hinge_terms(form, margin, pos, neg).max(0.0);
    }
    Ok(total / batch.len() as f64)
}

/// Loss and its gradient with respect to `W`, `β`, item and entity rows.
pub fn contrastive_loss_and_grad(
    batch: &[ContrastiveSample],
    params: &GatParams,
    store: &EmbeddingStore,
    margin: f64,
    form: LossForm,
) -> Result<(f64, Gradients)> {
    check_batch(batch, store)?;
    let d = params.dim();
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros(d);

    let mut by_item: BTreeMap<usize, Vec<&ContrastiveSample>> = BTreeMap::new();
    for s in batch {
        by_item.entry(s.item).or_default().push(s);
    }

    let mut total = 0.0;
    for (&item, samples) in &by_item {
        let f = forward(item, params, store);
        let mut grad_updated = Array1::<f64>::zeros(d);
        for s in samples {
            let e_pos = store.entities.row(s.positive);
            let e_neg = store.entities.row(s.negative);
            let pos = f.updated.dot(&e_pos);
            let neg = f.updated.dot(&e_neg);
            let t = hinge_terms(form, margin, pos, neg);
            if t <= 0.0 {
                continue;
            }
            total += t;
            // Sign of ∂t/∂φ(pos); ∂t/∂φ(neg) is its negation.
            let sign_pos = match form {
                LossForm::Hinge => -1.0,
                LossForm::Reversed => 1.0,
            };
            grad_updated.scaled_add(sign_pos * scale, &e_pos);
            grad_updated.scaled_add(-sign_pos * scale, &e_neg);
            add_row(&mut grads.entities, s.positive, f.updated.view(), sign_pos * scale);
            add_row(&mut grads.entities, s.negative, f.updated.view(), -sign_pos * scale);
        }
        if grad_updated.iter().all(|&v| v == 0.0) {
            continue;
        }
        backward(item, params, store, &f, &grad_updated, &mut grads);
    }
    Ok((total * scale, grads))
}

/// Propagates `∂L/∂h'_i` into `grads`.
fn backward(
    item: usize,
    params: &GatParams,
    store: &EmbeddingStore,
    f: &Forward,
    grad_updated: &Array1<f64>,
    grads: &mut Gradients,
) {
    let d = params.dim();
    let w = &params.weight;
    let h = store.items.row(item);
    let nb = &store.neighbors[item];

    if nb.is_empty() {
        grads.weight += &outer(grad_updated.view(), h);
        add_row(&mut grads.items, item, w.t().dot(grad_updated).view(), 1.0);
        return;
    }

    let beta_self = params.attention.slice(s![..d]);
    let beta_nb = params.attention.slice(s![d..]);

    let grad_alpha: Vec<f64> = f
        .transformed_neighbors
        .rows()
        .into_iter()
        .map(|z| grad_updated.dot(&z))
        .collect();
    let weighted: f64 = f.alpha.iter().zip(&grad_alpha).map(|(a, g)| a * g).sum();
    let grad_logits: Vec<f64> = f
        .alpha
        .iter()
        .zip(&grad_alpha)
        .zip(&f.logits)
        .map(|((a, g), &l)| a * (g - weighted) * params.leaky_grad(l))
        .collect();
    let logit_sum: f64 = grad_logits.iter().sum();

    {
        let mut g_self = grads.attention.slice_mut(s![..d]);
        g_self.scaled_add(logit_sum, &f.transformed_item);
    }
    let grad_transformed_item = beta_self.to_owned() * logit_sum;
    grads.weight += &outer(grad_transformed_item.view(), h);
    add_row(&mut grads.items, item, w.t().dot(&grad_transformed_item).view(), 1.0);

    for (row, &j) in nb.iter().enumerate() {
        let z = f.transformed_neighbors.row(row);
        {
            let mut g_nb = grads.attention.slice_mut(s![d..]);
            g_nb.scaled_add(grad_logits[row], &z);
        }
        let mut grad_z = grad_updated * f.alpha[row];
        grad_z.scaled_add(grad_logits[row], &beta_nb);
        let e = store.entities.row(j);
        grads.weight += &outer(grad_z.view(), e);
        add_row(&mut grads.entities, j, w.t().dot(&grad_z).view(), 1.0);
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Adam with lazily updated table rows: only rows present in a gradient
/// move, while the step count is shared.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    weight: (Array2<f64>, Array2<f64>),
    attention: (Array1<f64>, Array1<f64>),
    items: (Array2<f64>, Array2<f64>),
    entities: (Array2<f64>, Array2<f64>),
}

impl Adam {
    fn new(lr: f64, params: &GatParams, store: &EmbeddingStore) -> Self {
        let zeros2 = |a: &Array2<f64>| (Array2::zeros(a.raw_dim()), Array2::zeros(a.raw_dim()));
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            weight: zeros2(&params.weight),
            attention: (
                Array1::zeros(params.attention.len()),
                Array1::zeros(params.attention.len()),
            ),
            items: zeros2(&store.items),
            entities: zeros2(&store.entities),
        }
    }

    fn apply(&mut self, grads: &Gradients, params: &mut GatParams, store: &mut EmbeddingStore) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let lr_t = self.lr * (1.0 - b2.powi(self.step)).sqrt() / (1.0 - b1.powi(self.step));
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr_t * *m / (v.sqrt() + eps);
        };

        ndarray::Zip::from(&mut params.weight)
            .and(&mut self.weight.0)
            .and(&mut self.weight.1)
            .and(&grads.weight)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        ndarray::Zip::from(&mut params.attention)
            .and(&mut self.attention.0)
            .and(&mut self.attention.1)
            .and(&grads.attention)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        for (table, state, rows) in [
            (&mut store.items, &mut self.items, &grads.items),
            (&mut store.entities, &mut self.entities, &grads.entities),
        ] {
            for (&r, g) in rows {
                ndarray::Zip::from(table.row_mut(r))
                    .and(state.0.row_mut(r))
                    .and(state.1.row_mut(r))
                    .and(g)
                    .for_each(|p, m, v, &g| update(p, m, v, g));
            }
        }
    }
}

/// Trained store and parameters with the per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainedGat {
    pub store: EmbeddingStore,
    pub params: GatParams,
    pub epoch_losses: Vec<f64>,
}

fn sample_negative(
    rng: &mut impl Rng,
    entity_count: usize,
    excluded: &HashSet<usize>,
) -> Option<usize> {
    if excluded.len() >= entity_count {
        return None;
    }
    loop {
        let j = rng.random_range(0..entity_count);
        if !excluded.contains(&j) {
            return Some(j);
        }
    }
}

/// One epoch's worth of contrastive samples, grouped into batches.
fn epoch_batches(
    store: &EmbeddingStore,
    config: &GatTrainConfig,
    rng: &mut impl Rng,
) -> Vec<Vec<ContrastiveSample>> {
    let mut items: Vec<usize> = (0..store.item_count())
        .filter(|&i| !store.neighbors[i].is_empty())
        .collect();
    items.shuffle(rng);

    let mut batches = Vec::new();
    for chunk in items.chunks(config.chunk_size) {
        let mut samples = Vec::new();
        for &i in chunk {
            let excluded: HashSet<usize> = store.neighbors[i].iter().copied().collect();
            for &k in &store.neighbors[i] {
                for _ in 0..config.negatives_per_positive {
                    if let Some(j) = sample_negative(rng, store.entity_count(), &excluded) {
                        samples.push(ContrastiveSample {
                            item: i,
                            positive: k,
                            negative: j,
                        });
                    }
                }
            }
        }
        samples.shuffle(rng);
        let per_batch = config.batch_size * config.negatives_per_positive;
        batches.extend(samples.chunks(per_batch).map(<[_]>::to_vec));
    }
    batches
}

/// Mini-batch Adam over positive edges with uniformly sampled negatives.
pub fn train(kg: &KnowledgeGraph, config: &GatTrainConfig) -> Result<TrainedGat> {
    config.validate()?;
    let (store, params) = init_embeddings(kg, config)?;
    train_from(store, params, config)
}

/// Continues training from given tables and parameters.
pub fn train_from(
    mut store: EmbeddingStore,
    mut params: GatParams,
    config: &GatTrainConfig,
) -> Result<TrainedGat> {
    config.validate()?;
    params.validate()?;
    // Sampling uses its own stream so that init and sampling are
    // independently reproducible.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_6a7);
    let mut adam = Adam::new(config.learning_rate, &params, &store);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut last_finite = None;

    for epoch in 0..config.epochs {
        let batches = epoch_batches(&store, config, &mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            let (loss, grads) =
                contrastive_loss_and_grad(batch, &params, &store, config.margin, config.loss_form)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_finite_epoch: last_finite,
                });
            }
            total += loss * batch.len() as f64;
            count += batch.len();
            if !grads.is_zero() {
                adam.apply(&grads, &mut params, &mut store);
            }
        }
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        if !mean.is_finite() || params.validate().is_err() {
            return Err(Error::Diverged {
                epoch,
                last_finite_epoch: last_finite,
            });
        }
        last_finite = Some(epoch);
        debug!(epoch, loss = mean, "gat epoch");
        epoch_losses.push(mean);
    }
    info!(
        epochs = config.epochs,
        final_loss = epoch_losses.last().copied().unwrap_or(0.0),
        "gat training finished"
    );

    store.materialize(&params, config.chunk_size);
    Ok(TrainedGat {
        store,
        params,
        epoch_losses,
    })
}
