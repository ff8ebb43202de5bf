//! Lloyd's k-means with k-means++ seeding.
//!
//! Points are passed as a flat row-major `f32` slice with an explicit
//! dimension. Distances are squared Euclidean, accumulated in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure, RaidError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f32>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned (final) centroids.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia measured at each Lloyd assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - y;
            d * d
        })
        .sum()
}

fn nearest(point: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign_f64(points: &[f32], centroids: &[f64], dim: usize) -> (Vec<usize>, Vec<f64>) {
    points
        .par_chunks_exact(dim)
        .map(|p| nearest(p, centroids, dim))
        .unzip()
}

fn validate_points(points: &[f32], dim: usize) -> Result<usize> {
    ensure(dim >= 1, || {
        RaidError::InvalidArgument("dimension must be >= 1".into())
    })?;
    ensure(points.len().is_multiple_of(dim), || {
        RaidError::DimensionMismatch(format!(
            "{} values is not a multiple of D={dim}",
            points.len()
        ))
    })?;
    ensure(points.iter().all(|v| v.is_finite()), || {
        RaidError::NonFinite("k-means points".into())
    })?;
    Ok(points.len() / dim)
}

/// Nearest centroid for every point; ties go to the lower centroid index.
pub fn assign(points: &[f32], centroids: &[f32], dim: usize) -> Result<Vec<usize>> {
    validate_points(points, dim)?;
    ensure(!centroids.is_empty(), || {
        RaidError::Empty("no centroids".into())
    })?;
    ensure(centroids.len().is_multiple_of(dim), || {
        RaidError::DimensionMismatch("centroid length is not a multiple of D".into())
    })?;
    let c: Vec<f64> = centroids.iter().map(|&v| f64::from(v)).collect();
    Ok(assign_f64(points, &c, dim).0)
}

fn kmeans_plus_plus(
    points: &[f32],
    n: usize,
    dim: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut chosen = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    chosen.push(first);
    let mut centroids: Vec<f64> = points[first * dim..(first + 1) * dim]
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // Guard against rounding leaving us on a zero-weight tail point.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // Every point coincides with a chosen center.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        let c: Vec<f64> = points[next * dim..(next + 1) * dim]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        for (p, d) in points.chunks_exact(dim).zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.extend(c);
    }
    centroids
}

/// Fits `config.k` centroids to `points` (row-major, `dim` columns).
///
/// Deterministic for a given `(points, config)`. Empty clusters are re-seeded
/// at the point farthest from its centroid, so exactly `k` centroids are
/// always produced.
pub fn kmeans_fit(points: &[f32], dim: usize, config: &KMeansConfig) -> Result<KMeansResult> {
    let n = validate_points(points, dim)?;
    ensure(n > 0, || {
        RaidError::Empty("k-means over an empty point list".into())
    })?;
    ensure(config.k >= 1, || {
        RaidError::InvalidArgument("k must be >= 1".into())
    })?;
    ensure(config.k <= n, || {
        RaidError::InvalidArgument(format!("k = {} exceeds {n} points", config.k))
    })?;
    let k = config.k;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = kmeans_plus_plus(points, n, dim, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..config.max_iter {
        let (assignments, dists) = assign_f64(points, &centroids, dim);
        history.push(dists.iter().sum());
        iterations += 1;

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.chunks_exact(dim).zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += f64::from(v);
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                sums[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .for_each(|s| *s /= count as f64);
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<(usize, f64)> = points
                .chunks_exact(dim)
                .zip(&assignments)
                .enumerate()
                .map(|(i, (p, &a))| (i, sq_dist(p, &sums[a * dim..(a + 1) * dim])))
                .collect();
            far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (c, (idx, _)) in empty.iter().zip(far) {
                for (s, &v) in sums[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&points[idx * dim..(idx + 1) * dim])
                {
                    *s = f64::from(v);
                }
            }
        }

        let shift = sums
            .chunks_exact(dim)
            .zip(centroids.chunks_exact(dim))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        centroids = sums;
        if shift < config.tol && empty.is_empty() {
            break;
        }
    }

    let centroids: Vec<f32> = centroids.iter().map(|&v| v as f32).collect();
    let rounded: Vec<f64> = centroids.iter().map(|&v| f64::from(v)).collect();
    let (assignments, dists) = assign_f64(points, &rounded, dim);
    Ok(KMeansResult {
        dim,
        centroids,
        assignments,
        inertia: dists.iter().sum(),
        iterations_run: iterations,
        inertia_history: history,
    })
}
