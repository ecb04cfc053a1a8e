use kerag_core::corpus::KnowledgeGraph;
use kerag_core::gat::{contrastive_loss_and_grad, ContrastiveSample, LossForm};
use rand::Rng;

use super::fixtures::{random_kg, random_store, rng, scalar_view};
use super::oracle::ScalarGat;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Relative error with an absolute floor so that entries that are both
/// (numerically) zero compare equal.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn toy_batch(kg: &KnowledgeGraph, rng: &mut impl Rng) -> Vec<ContrastiveSample> {
    let neighbors = kg.neighbors();
    let mut batch = Vec::new();
    for (i, nb) in neighbors.iter().enumerate() {
        for &k in nb {
            let j = loop {
                let j = rng.random_range(0..kg.entity_count());
                if !nb.contains(&j) {
                    break j;
                }
            };
            batch.push(ContrastiveSample {
                item: i,
                positive: k,
                negative: j,
            });
        }
    }
    batch
}

/// Max relative error between analytic gradients and central differences of
/// the scalar oracle loss, over every entry of W, β and both tables.
pub fn max_fd_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let kg = random_kg(&mut r, 5, 8, 1, 4);
    let (store, params) = random_store(&mut r, &kg, 4);
    let batch = toy_batch(&kg, &mut r);
    let margin = 1.0;
    let (_, grads) = contrastive_loss_and_grad(&batch, &params, &store, margin, LossForm::Hinge).unwrap();
    let tuples: Vec<_> = batch.iter().map(|s| (s.item, s.positive, s.negative)).collect();

    let base = scalar_view(&store, &params);
    let numeric = |perturb: &dyn Fn(&mut ScalarGat, f64)| {
        let mut plus = scalar_view(&store, &params);
        perturb(&mut plus, FD_STEP);
        let mut minus = scalar_view(&store, &params);
        perturb(&mut minus, -FD_STEP);
        (plus.loss(&tuples, margin) - minus.loss(&tuples, margin)) / (2.0 * FD_STEP)
    };

    let mut worst: f64 = 0.0;
    let d = base.weight.len();
    for a in 0..d {
        for b in 0..d {
            let n = numeric(&|g, h| g.weight[a][b] += h);
            worst = worst.max(rel_err(grads.weight[[a, b]], n));
        }
    }
    for a in 0..2 * d {
        let n = numeric(&|g, h| g.beta[a] += h);
        worst = worst.max(rel_err(grads.attention[a], n));
    }
    for i in 0..base.items.len() {
        for a in 0..d {
            let n = numeric(&|g, h| g.items[i][a] += h);
            let an = grads.items.get(&i).map_or(0.0, |row| row[a]);
            worst = worst.max(rel_err(an, n));
        }
    }
    for j in 0..base.entities.len() {
        for a in 0..d {
            let n = numeric(&|g, h| g.entities[j][a] += h);
            let an = grads.entities.get(&j).map_or(0.0, |row| row[a]);
            worst = worst.max(rel_err(an, n));
        }
    }
    worst
}
