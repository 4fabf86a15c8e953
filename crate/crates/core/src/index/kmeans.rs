//! Centroid selection: seeded k-means++ followed by Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scoring::TermEmbeddingMatrix;

pub const MAX_LLOYD_ITERATIONS: usize = 25;
pub const CONVERGENCE_TOLERANCE: f64 = 1e-6;

/// `|C|` rows of `dim` single-precision values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidTable {
    dim: usize,
    values: Vec<f32>,
}

impl CentroidTable {
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(Error::InvalidConfig(format!(
                "centroid table of {} values does not split into rows of {dim}",
                values.len()
            )));
        }
        let count = values.len() / dim;
        if !count.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "centroid count {count} is not a power of two"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroid table".into()));
        }
        Ok(CentroidTable { dim, values })
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `⌈log2 |C|⌉`, the width of a stored centroid id.
    pub fn id_bits(&self) -> u32 {
        self.count().trailing_zeros()
    }

    pub fn row(&self, id: usize) -> &[f32] {
        &self.values[id * self.dim..(id + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn squared_distance(&self, id: usize, v: &[f64]) -> f64 {
        self.row(id)
            .iter()
            .zip(v)
            .map(|(&c, &x)| {
                let d = x - c as f64;
                d * d
            })
            .sum()
    }

    /// Nearest centroid by Euclidean distance, lowest id on ties.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for id in 0..self.count() {
            let d = self.squared_distance(id, v);
            if d < best_d {
                best_d = d;
                best = id;
            }
        }
        best
    }

    /// The `k` nearest centroids ordered by (distance, id).
    pub fn nearest_k(&self, v: &[f64], k: usize) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = (0..self.count())
            .map(|id| (self.squared_distance(id, v), id))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, id)| id).collect()
    }
}

/// `2^⌈log2 √total⌉`: the smallest power of two whose square is `>= total`.
pub fn centroid_count(total_estimate: usize) -> usize {
    let mut k = 1usize;
    while (k as u128) * (k as u128) < total_estimate as u128 {
        k *= 2;
    }
    k
}

#[derive(Clone, Debug)]
pub struct CentroidSelection {
    pub table: CentroidTable,
    /// Set when the sample had fewer distinct vectors than centroids, so
    /// some centroids are duplicates.
    pub duplicate_warning: Option<String>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_f64(centers: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (id, c) in centers.iter().enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (id, d);
        }
    }
    best
}

/// Plain k-means over explicit points; returns f64 centers.
pub(crate) fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> (Vec<Vec<f64>>, usize, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..n)].to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    let mut duplicates = false;
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            // rounding can walk past the end; fall back to the last positive weight
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).expect("total > 0");
            }
            chosen
        } else {
            duplicates = true;
            rng.gen_range(0..n)
        };
        let c = points[pick].to_vec();
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, &c));
        }
        centers.push(c);
    }

    let dim = points[0].len();
    let mut iterations = 0;
    for _ in 0..MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let assign: Vec<usize> = points
            .par_iter()
            .map(|p| nearest_f64(&centers, p).0)
            .collect();
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for (c, (sum, &count)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            if count == 0 {
                continue;
            }
            let next: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            shift = shift.max(sq_dist(c, &next).sqrt());
            *c = next;
        }
        if shift <= CONVERGENCE_TOLERANCE {
            break;
        }
    }
    (centers, iterations, duplicates)
}

/// Picks `centroid_count(total_estimate)` centroids from the sampled term
/// embeddings with seeded k-means++ and at most 25 Lloyd iterations.
pub fn select_centroids(
    sample: &[TermEmbeddingMatrix],
    total_estimate: usize,
    seed: u64,
) -> Result<CentroidSelection> {
    let points: Vec<&[f64]> = sample.iter().flat_map(|m| m.iter_rows()).collect();
    if points.is_empty() {
        return Err(Error::EmptyInput("centroid sample has no vectors".into()));
    }
    if total_estimate == 0 {
        return Err(Error::InvalidConfig("total_estimate must be >= 1".into()));
    }
    let dim = sample[0].dim();
    if let Some(bad) = sample.iter().find(|m| m.dim() != dim) {
        return Err(Error::dim(dim, bad.dim()));
    }
    let k = centroid_count(total_estimate);
    let (centers, iterations, duplicates) = kmeans(&points, k, seed);
    let values: Vec<f32> = centers.iter().flatten().map(|&v| v as f32).collect();
    let duplicate_warning = duplicates.then(|| {
        let msg = format!("fewer distinct sample vectors than {k} centroids; duplicates kept");
        log::warn!("{msg}");
        msg
    });
    Ok(CentroidSelection {
        table: CentroidTable::new(dim, values)?,
        duplicate_warning,
        iterations,
    })
}
