use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::l2_sq;
use crate::par;

pub const DEFAULT_MAX_ITERS: usize = 25;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Flat `k x dim` centroid table produced by [`kmeans`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f32>,
    pub inertia: f64,
    /// Inertia after every assignment pass, first entry from the seeding.
    pub history: Vec<f64>,
}

impl KMeansModel {
    pub fn from_centroids(dim: usize, centroids: Vec<f32>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} centroid values for dimension {dim}",
                centroids.len()
            )));
        }
        Ok(Self {
            k: centroids.len() / dim,
            dim,
            centroids,
            inertia: 0.0,
            history: Vec::new(),
        })
    }

    #[inline]
    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid and its squared distance; ties go to the lower index.
    pub fn nearest(&self, v: &[f32]) -> (usize, f32) {
        nearest_in(&self.centroids, self.dim, v)
    }

    /// Centroid indices sorted by ascending distance to `v`.
    pub fn ranked(&self, v: &[f32]) -> Vec<(usize, f32)> {
        let mut d: Vec<(usize, f32)> = (0..self.k)
            .map(|i| (i, l2_sq(self.centroid(i), v)))
            .collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        d
    }
}

#[inline]
pub(crate) fn nearest_in(centroids: &[f32], dim: usize, v: &[f32]) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = l2_sq(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Nearest-codeword search for scalar codebooks via binary search.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SortedScalar {
    values: Vec<f32>,
    ids: Vec<u32>,
}

impl SortedScalar {
    pub fn new(codebook: &[f32]) -> Self {
        let mut order: Vec<u32> = (0..codebook.len() as u32).collect();
        order.sort_by(|&a, &b| {
            codebook[a as usize]
                .total_cmp(&codebook[b as usize])
                .then(a.cmp(&b))
        });
        let values = order.iter().map(|&i| codebook[i as usize]).collect();
        Self { values, ids: order }
    }

    /// Same answer as a linear scan: the closest value, lowest id on ties.
    #[inline]
    pub fn nearest(&self, x: f32) -> (usize, f32) {
        let pos = self.values.partition_point(|&v| v < x);
        let mut best = (usize::MAX, f32::INFINITY);
        for side in [pos.checked_sub(1), Some(pos)].into_iter().flatten() {
            let Some(&v) = self.values.get(side) else {
                continue;
            };
            let d = (v - x) * (v - x);
            if d > best.1 {
                continue;
            }
            let lo = self.values.partition_point(|&u| u < v);
            let hi = self.values.partition_point(|&u| u <= v);
            let id = self.ids[lo..hi].iter().copied().min().unwrap() as usize;
            if d < best.1 || id < best.0 {
                best = (id, d);
            }
        }
        best
    }
}

fn assign(data: &[f32], dim: usize, centroids: &[f32]) -> (Vec<u32>, Vec<f32>) {
    if dim > 1 {
        return super::distance::nearest_batch(data, dim, centroids);
    }
    let n = data.len() / dim;
    let sorted = (dim == 1).then(|| SortedScalar::new(centroids));
    const CHUNK: usize = 2048;
    let parts = par::map_range(n.div_ceil(CHUNK), |ci| {
        let start = ci * CHUNK;
        let end = (start + CHUNK).min(n);
        let mut labels = Vec::with_capacity(end - start);
        let mut dists = Vec::with_capacity(end - start);
        for p in start..end {
            let v = &data[p * dim..(p + 1) * dim];
            let (l, d) = match &sorted {
                Some(s) => s.nearest(v[0]),
                None => nearest_in(centroids, dim, v),
            };
            labels.push(l as u32);
            dists.push(d);
        }
        (labels, dists)
    });
    let mut labels = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n);
    for (l, d) in parts {
        labels.extend(l);
        dists.extend(d);
    }
    (labels, dists)
}

fn seed_plus_plus(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(point(first));
    let mut min_d: Vec<f64> = par::map_range(n, |i| l2_sq(point(i), point(first)) as f64);
    for _ in 1..k {
        let total: f64 = min_d.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in min_d.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = Some(i);
                    break;
                }
                target -= d;
            }
            pick.unwrap_or_else(|| min_d.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[next] = true;
        let c = point(next).to_vec();
        let upd = par::map_range(n, |i| l2_sq(point(i), &c) as f64);
        for (m, u) in min_d.iter_mut().zip(upd) {
            if u < *m {
                *m = u;
            }
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// k-means++ seeded Lloyd iterations over `data` (row-major, `dim` columns).
///
/// Stops after `max_iters` updates or once the relative inertia improvement
/// drops below `1e-4`. Empty clusters are re-seeded from the point farthest
/// from its centroid. Deterministic for a given seed.
pub fn kmeans(
    data: &[f32],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansModel> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch(format!(
            "{} values not divisible by dim {dim}",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {n} vectors"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(data, dim, k, &mut rng);
    let (mut labels, mut dists) = assign(data, dim, &centroids);
    let mut inertia: f64 = dists.iter().map(|&d| d as f64).sum();
    let mut history = vec![inertia];

    for _ in 0..max_iters {
        if inertia == 0.0 {
            break;
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &l) in labels.iter().enumerate() {
            let l = l as usize;
            counts[l] += 1;
            let v = &data[p * dim..(p + 1) * dim];
            for (s, &x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(v) {
                *s += x as f64;
            }
        }
        let mut used = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
                }
            } else {
                let far = (0..n)
                    .filter(|&p| !used[p])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                used[far] = true;
                dists[far] = 0.0;
                centroids[c * dim..(c + 1) * dim]
                    .copy_from_slice(&data[far * dim..(far + 1) * dim]);
            }
        }
        let (l, d) = assign(data, dim, &centroids);
        labels = l;
        dists = d;
        let next: f64 = dists.iter().map(|&d| d as f64).sum();
        history.push(next);
        let converged = inertia - next <= DEFAULT_TOL * inertia;
        inertia = next;
        if converged {
            break;
        }
    }
    Ok(KMeansModel {
        k,
        dim,
        centroids,
        inertia,
        history,
    })
}
