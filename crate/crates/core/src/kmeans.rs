//! Lloyd's k-means with k-means++ seeding, for small-dimensional sub-vectors.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub max_iterations: usize,
    /// Stop once the relative distortion change drops below this.
    pub tolerance: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    /// `k * dim` row-major.
    pub centroids: Vec<f32>,
    /// Mean squared distance of the points to their assigned centroid.
    pub distortion: f64,
    pub iterations: usize,
}

#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Nearest centroid index (lowest index on ties) and its squared distance.
#[inline]
pub(crate) fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Centroids stored dimension-major so one point's distances to all of them
/// vectorize. Sums run over dimensions in the same order as [`sq_dist`], so
/// results are bit-identical to [`nearest`].
pub(crate) struct Transposed {
    k: usize,
    dim: usize,
    cols: Vec<f64>,
    scratch: Vec<f64>,
}

impl Transposed {
    pub(crate) fn new(centroids: &[f32], dim: usize) -> Self {
        let k = centroids.len() / dim;
        let mut cols = vec![0f64; k * dim];
        for (j, c) in centroids.chunks_exact(dim).enumerate() {
            for (t, &x) in c.iter().enumerate() {
                cols[t * k + j] = f64::from(x);
            }
        }
        Self {
            k,
            dim,
            cols,
            scratch: vec![0f64; k],
        }
    }

    pub(crate) fn nearest(&mut self, point: &[f32]) -> (usize, f64) {
        let d = &mut self.scratch;
        d.fill(0.0);
        for t in 0..self.dim {
            let x = f64::from(point[t]);
            for (acc, &c) in d.iter_mut().zip(&self.cols[t * self.k..(t + 1) * self.k]) {
                let diff = x - c;
                *acc += diff * diff;
            }
        }
        let mut lanes = [f64::INFINITY; 8];
        let mut chunks = d.chunks_exact(8);
        for c in &mut chunks {
            for (l, &v) in lanes.iter_mut().zip(c) {
                if v < *l {
                    *l = v;
                }
            }
        }
        let min = chunks
            .remainder()
            .iter()
            .chain(&lanes)
            .fold(f64::INFINITY, |a, &b| if b < a { b } else { a });
        match d.iter().position(|&v| v == min) {
            Some(j) => (j, min),
            None => (0, f64::INFINITY),
        }
    }
}

/// Mean squared distance of `points` to their nearest centroid.
pub fn distortion(points: &[f32], centroids: &[f32], dim: usize) -> f64 {
    let n = points.len() / dim;
    if n == 0 {
        return 0.0;
    }
    points
        .chunks_exact(dim)
        .map(|p| nearest(p, centroids, dim).1)
        .sum::<f64>()
        / n as f64
}

/// k-means++: each new seed is drawn with probability proportional to its
/// squared distance from the seeds chosen so far.
pub fn kmeans_plus_plus(points: &[f32], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(point(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();

    while centroids.len() < k * dim {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Fewer distinct points than k; fall back to unused indices.
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[next] = true;
        let c = point(next);
        centroids.extend_from_slice(c);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), c));
        }
    }
    centroids
}

pub fn kmeans(
    points: &[f32],
    dim: usize,
    k: usize,
    cfg: &KMeansConfig,
    rng: &mut impl Rng,
) -> Result<KMeansResult> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::invalid("point buffer is not a multiple of dim"));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::invalid(format!(
            "k-means needs at least k={k} samples, got {n}"
        )));
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = kmeans_plus_plus(points, dim, k, rng);
    let mut assign = vec![0usize; n];
    let mut dists = vec![0f64; n];
    let mut prev = f64::INFINITY;
    let mut iterations = 0;

    loop {
        let mut total = 0.0;
        let mut tr = Transposed::new(&centroids, dim);
        for i in 0..n {
            let (j, d) = tr.nearest(point(i));
            assign[i] = j;
            dists[i] = d;
            total += d;
        }
        let current = total / n as f64;
        let converged = current == 0.0
            || (prev.is_finite() && (prev - current).abs() <= cfg.tolerance * prev);
        if converged || iterations >= cfg.max_iterations {
            return Ok(KMeansResult {
                centroids,
                distortion: current,
                iterations,
            });
        }
        prev = current;
        iterations += 1;

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assign[i];
            counts[j] += 1;
            for (s, &x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(point(i)) {
                *s += f64::from(x);
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..dim {
                    centroids[j * dim + t] = (sums[j * dim + t] / counts[j] as f64) as f32;
                }
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                repair_empty(j, &mut centroids, &mut counts, &assign, &dists, points, dim);
            }
        }
    }
}

/// Moves empty centroid `j` onto the farthest member of the largest cluster.
fn repair_empty(
    j: usize,
    centroids: &mut [f32],
    counts: &mut [usize],
    assign: &[usize],
    dists: &[f64],
    points: &[f32],
    dim: usize,
) {
    let largest = (0..counts.len())
        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
        .expect("k >= 1");
    let far = (0..assign.len())
        .filter(|&i| assign[i] == largest)
        .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
    if let Some(i) = far {
        centroids[j * dim..(j + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
        counts[largest] -= 1;
        counts[j] = 1;
    }
}
