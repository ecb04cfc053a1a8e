//! Plain-loop reference implementations used to check the library. None of
//! these call into `kerag_core` numerics.

pub type Mat = Vec<Vec<f64>>;

pub fn matvec(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub struct ScalarGat {
    pub weight: Mat,
    pub beta: Vec<f64>,
    pub slope: f64,
    pub items: Mat,
    pub entities: Mat,
    pub neighbors: Vec<Vec<usize>>,
}

impl ScalarGat {
    /// α_ij by direct evaluation of exp(LeakyReLU(β·[W h_i ‖ W e_j])) / Σ.
    pub fn alpha(&self, i: usize) -> Vec<f64> {
        let d = self.weight.len();
        let wh = matvec(&self.weight, &self.items[i]);
        let raw: Vec<f64> = self.neighbors[i]
            .iter()
            .map(|&j| {
                let we = matvec(&self.weight, &self.entities[j]);
                let mut concat = wh.clone();
                concat.extend_from_slice(&we);
                let mut s = 0.0;
                for k in 0..2 * d {
                    s += self.beta[k] * concat[k];
                }
                let lr = if s > 0.0 { s } else { self.slope * s };
                lr.exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        raw.iter().map(|x| x / z).collect()
    }

    pub fn updated(&self, i: usize) -> Vec<f64> {
        let d = self.weight.len();
        if self.neighbors[i].is_empty() {
            return matvec(&self.weight, &self.items[i]);
        }
        let alpha = self.alpha(i);
        let mut h = vec![0.0; d];
        for (n, &j) in self.neighbors[i].iter().enumerate() {
            let we = matvec(&self.weight, &self.entities[j]);
            for k in 0..d {
                h[k] += alpha[n] * we[k];
            }
        }
        h
    }

    /// Mean of max(0, margin + φ(neg) − φ(pos)) with φ(i, x) = h'_i · e_x.
    pub fn loss(&self, batch: &[(usize, usize, usize)], margin: f64) -> f64 {
        let mut total = 0.0;
        for &(i, pos, neg) in batch {
            let h = self.updated(i);
            let t = margin + dot(&h, &self.entities[neg]) - dot(&h, &self.entities[pos]);
            if t > 0.0 {
                total += t;
            }
        }
        total / batch.len() as f64
    }
}

pub fn hr_reference(ranking: &[usize], target: usize, k: usize) -> f64 {
    for pos in 0..k.min(ranking.len()) {
        if ranking[pos] == target {
            return 1.0;
        }
    }
    0.0
}

/// DCG over the top k with binary relevance, divided by the ideal DCG of a
/// single relevant item.
pub fn ndcg_reference(ranking: &[usize], target: usize, k: usize) -> f64 {
    let mut dcg = 0.0;
    for pos in 0..k.min(ranking.len()) {
        let rel = if ranking[pos] == target { 1.0 } else { 0.0 };
        dcg += (2f64.powf(rel) - 1.0) / ((pos + 2) as f64).log2();
    }
    let idcg = 1.0 / 2f64.log2();
    dcg / idcg
}

/// Indices of `scores` sorted by descending score, ties by ascending key.
pub fn full_sort_desc(scores: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut v = scores.to_vec();
    // Insertion sort: deliberately naive.
    for a in 1..v.len() {
        let mut b = a;
        while b > 0 {
            let (ka, sa) = v[b];
            let (kb, sb) = v[b - 1];
            if sa > sb || (sa == sb && ka < kb) {
                v.swap(b, b - 1);
                b -= 1;
            } else {
                break;
            }
        }
    }
    v
}
