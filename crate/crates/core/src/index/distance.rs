//! Batched nearest-centroid assignment. Distances are computed through a
//! GEMM (`|x|^2 - 2 x.c + |c|^2`), then the few candidates within rounding
//! distance of the best are re-scored exactly, so the answer matches a
//! linear scan with exact `l2_sq` (lowest index on ties).

use crate::model::l2_sq;
use crate::par;

const BLOCK: usize = 256;

pub(crate) fn nearest_batch(data: &[f32], dim: usize, centroids: &[f32]) -> (Vec<u32>, Vec<f32>) {
    let n = data.len() / dim;
    let k = centroids.len() / dim;
    if k < 8 || dim < 4 {
        let exact = par::map_range(n, |p| {
            super::kmeans::nearest_in(centroids, dim, &data[p * dim..(p + 1) * dim])
        });
        return exact.into_iter().map(|(l, d)| (l as u32, d)).unzip();
    }
    let c_norms: Vec<f32> = centroids
        .chunks_exact(dim)
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect();
    let c_max = c_norms.iter().copied().fold(0.0f32, f32::max);
    let blocks = par::map_range(n.div_ceil(BLOCK), |b| {
        let start = b * BLOCK;
        let rows = BLOCK.min(n - start);
        let x = &data[start * dim..(start + rows) * dim];
        let mut dots = vec![0.0f32; rows * k];
        // dots[r, j] = x_r . c_j
        unsafe {
            matrixmultiply::sgemm(
                rows,
                dim,
                k,
                1.0,
                x.as_ptr(),
                dim as isize,
                1,
                centroids.as_ptr(),
                1,
                dim as isize,
                0.0,
                dots.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        let mut labels = Vec::with_capacity(rows);
        let mut dists = Vec::with_capacity(rows);
        let mut cands = Vec::new();
        for r in 0..rows {
            let xr = &x[r * dim..(r + 1) * dim];
            let xn: f32 = xr.iter().map(|v| v * v).sum();
            let row = &dots[r * k..(r + 1) * k];
            let mut best = f32::INFINITY;
            for j in 0..k {
                let d = xn - 2.0 * row[j] + c_norms[j];
                if d < best {
                    best = d;
                }
            }
            let tol = 1e-5 * (xn + c_max) + 1e-12;
            cands.clear();
            for j in 0..k {
                if xn - 2.0 * row[j] + c_norms[j] <= best + 2.0 * tol {
                    cands.push(j);
                }
            }
            let mut pick = (0usize, f32::INFINITY);
            for &j in &cands {
                let d = l2_sq(xr, &centroids[j * dim..(j + 1) * dim]);
                if d < pick.1 {
                    pick = (j, d);
                }
            }
            labels.push(pick.0 as u32);
            dists.push(pick.1);
        }
        (labels, dists)
    });
    let mut labels = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n);
    for (l, d) in blocks {
        labels.extend(l);
        dists.extend(d);
    }
    (labels, dists)
}
