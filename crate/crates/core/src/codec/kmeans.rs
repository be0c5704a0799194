//! Seeded k-means with k-means++ seeding and farthest-point reseeding of
//! empty clusters.

use rand::Rng;

use crate::rng::stream_rng;

/// Squared Euclidean distance, eight-lane accumulation.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    pub iters: usize,
    pub seed: u64,
    /// Keep centroid 0 fixed at the origin.
    pub pin_zero: bool,
}

impl KMeans {
    /// Fits `k` centroids to the row-major `points`. Requires at least `k` rows.
    pub fn fit(&self, points: &[f32]) -> Vec<f32> {
        let dim = self.dim;
        let n = points.len() / dim;
        assert!(n >= self.k, "k-means needs at least k points");
        let row = |i: usize| &points[i * dim..(i + 1) * dim];
        let mut rng = stream_rng(self.seed, 7);

        let mut centroids = vec![0.0f32; self.k * dim];
        let mut min_d = vec![f32::INFINITY; n];
        if !self.pin_zero {
            let pick = rng.random_range(0..n);
            centroids[..dim].copy_from_slice(row(pick));
        }
        let update_min = |c: &[f32], min_d: &mut [f32]| {
            for (i, md) in min_d.iter_mut().enumerate() {
                let d = sq_dist(row(i), c);
                if d < *md {
                    *md = d;
                }
            }
        };
        update_min(&centroids[..dim], &mut min_d);
        for c in 1..self.k {
            let total: f64 = min_d.iter().map(|&d| d as f64).sum();
            let pick = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut chosen = n - 1;
                for (i, &d) in min_d.iter().enumerate() {
                    target -= d as f64;
                    if target < 0.0 && d > 0.0 {
                        chosen = i;
                        break;
                    }
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            centroids[c * dim..(c + 1) * dim].copy_from_slice(row(pick));
            update_min(&centroids[c * dim..(c + 1) * dim], &mut min_d);
        }

        let mut assign = vec![usize::MAX; n];
        let mut dist = vec![0.0f32; n];
        for _ in 0..self.iters {
            let mut changed = false;
            for i in 0..n {
                let (a, d) = nearest(row(i), &centroids, dim);
                if assign[i] != a {
                    changed = true;
                    assign[i] = a;
                }
                dist[i] = d;
            }
            if !changed {
                break;
            }
            let mut sums = vec![0.0f64; self.k * dim];
            let mut counts = vec![0usize; self.k];
            for i in 0..n {
                let a = assign[i];
                counts[a] += 1;
                for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                    *s += v as f64;
                }
            }
            let start = usize::from(self.pin_zero);
            let mut empty = Vec::new();
            for c in start..self.k {
                if counts[c] == 0 {
                    empty.push(c);
                    continue;
                }
                for (dst, &s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = (s / counts[c] as f64) as f32;
                }
            }
            if !empty.is_empty() {
                // Farthest points from their current centroid, largest first;
                // ties by index keep this deterministic.
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
                for (c, &p) in empty.iter().zip(&order) {
                    centroids[c * dim..(c + 1) * dim].copy_from_slice(row(p));
                    dist[p] = 0.0;
                }
                changed = true;
            }
            if !changed {
                break;
            }
        }
        centroids
    }
}
