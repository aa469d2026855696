//! Precise ROI pooling: the exact mean of the bilinearly interpolated
//! activation surface over a continuous region, one bin per channel.
//!
//! Cell `(i, j)` sits at feature coordinate `(u, v) = (j, i)`; the surface is
//! `f(u, v) = sum_ij w_ij * tri(u - j) * tri(v - i)` with `tri(t) = max(0, 1 - |t|)`,
//! which vanishes one cell beyond the grid. The integral factorizes into
//! per-axis weights `I(j) = T(b - j) - T(a - j)` where `T` is the
//! antiderivative of `tri`.

use super::feature_map::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::Rect;

#[inline]
fn tri_antiderivative(t: f64) -> f64 {
    if t <= -1.0 {
        0.0
    } else if t <= 0.0 {
        0.5 * (t + 1.0) * (t + 1.0)
    } else if t < 1.0 {
        1.0 - 0.5 * (1.0 - t) * (1.0 - t)
    } else {
        1.0
    }
}

/// Per-axis integration weights over `[a, b]` for grid indices `0..n`:
/// a run of indices with weight exactly 1 plus partial-weight edge indices.
struct AxisWeights {
    run: Option<(usize, usize)>,
    edges: Vec<(usize, f64)>,
}

fn axis_weights(a: f64, b: f64, n: usize) -> AxisWeights {
    let lo = ((a - 1.0).floor().max(0.0)) as usize;
    let hi = ((b + 1.0).ceil().min(n as f64 - 1.0)).max(0.0) as usize;
    let mut run: Option<(usize, usize)> = None;
    let mut edges = Vec::new();
    if (b + 1.0) < 0.0 || (a - 1.0) > n as f64 - 1.0 {
        return AxisWeights { run, edges };
    }
    for j in lo..=hi.min(n - 1) {
        let jf = j as f64;
        if jf - 1.0 >= a && jf + 1.0 <= b {
            run = Some(match run {
                None => (j, j),
                Some((s, _)) => (s, j),
            });
        } else {
            let w = tri_antiderivative(b - jf) - tri_antiderivative(a - jf);
            if w > 0.0 {
                edges.push((j, w));
            }
        }
    }
    AxisWeights { run, edges }
}

/// Summed-area tables of a feature map, for constant-time region pooling.
pub struct PoolingSurface {
    channels: usize,
    height: usize,
    width: usize,
    stride: f64,
    pad: f64,
    values: Vec<f32>,
    sat: Vec<f64>,
}

impl PoolingSurface {
    pub fn new(map: &FeatureMap) -> Self {
        let (h, w) = (map.height, map.width);
        let plane = (h + 1) * (w + 1);
        let mut sat = vec![0.0f64; map.channels * plane];
        for c in 0..map.channels {
            let s = &mut sat[c * plane..(c + 1) * plane];
            for i in 0..h {
                let mut row = 0.0f64;
                for j in 0..w {
                    row += map.at(c, i, j) as f64;
                    s[(i + 1) * (w + 1) + j + 1] = s[i * (w + 1) + j + 1] + row;
                }
            }
        }
        Self {
            channels: map.channels,
            height: h,
            width: w,
            stride: map.stride as f64,
            pad: map.pad as f64,
            values: map.values.clone(),
            sat,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    fn rect_sum(&self, c: usize, (i0, i1): (usize, usize), (j0, j1): (usize, usize)) -> f64 {
        let w1 = self.width + 1;
        let s = &self.sat[c * (self.height + 1) * w1..];
        s[(i1 + 1) * w1 + j1 + 1] - s[i0 * w1 + j1 + 1] - s[(i1 + 1) * w1 + j0] + s[i0 * w1 + j0]
    }

    #[inline]
    fn value(&self, c: usize, i: usize, j: usize) -> f64 {
        self.values[(c * self.height + i) * self.width + j] as f64
    }

    /// Resized-image pixel coordinates to feature coordinates.
    pub fn to_feature_coords(&self, r: &Rect) -> (f64, f64, f64, f64) {
        let u = |x: f64| (x + self.pad) / self.stride - 0.5;
        (u(r.x()), u(r.right()), u(r.y()), u(r.bottom()))
    }

    fn check_extent(&self, r: &Rect) -> Result<()> {
        let extent = Rect::new(
            -self.pad,
            -self.pad,
            self.width as f64 * self.stride,
            self.height as f64 * self.stride,
        )?;
        if r.intersection_area(&extent) <= 0.0 {
            return Err(Error::RegionOutside(format!(
                "region ({:.1}, {:.1}, {:.1}, {:.1}) misses the map extent",
                r.x(),
                r.y(),
                r.w(),
                r.h()
            )));
        }
        Ok(())
    }

    /// Pooled C-vector for a region given in resized-image pixel coordinates.
    pub fn pool(&self, region: &Rect) -> Result<Vec<f32>> {
        self.check_extent(region)?;
        let (u0, u1, v0, v1) = self.to_feature_coords(region);
        let mut out = vec![0.0f32; self.channels];
        self.pool_feature_into(u0, u1, v0, v1, &mut out);
        Ok(out)
    }

    fn channel_integral(&self, c: usize, wx: &AxisWeights, wy: &AxisWeights) -> f64 {
        let mut acc = 0.0f64;
        if let (Some(ry), Some(rx)) = (wy.run, wx.run) {
            acc += self.rect_sum(c, ry, rx);
        }
        if let Some(ry) = wy.run {
            for &(j, w) in &wx.edges {
                acc += w * self.rect_sum(c, ry, (j, j));
            }
        }
        if let Some(rx) = wx.run {
            for &(i, w) in &wy.edges {
                acc += w * self.rect_sum(c, (i, i), rx);
            }
        }
        for &(i, wi) in &wy.edges {
            for &(j, wj) in &wx.edges {
                acc += wi * wj * self.value(c, i, j);
            }
        }
        acc
    }

    /// Pooled vector over `[u0, u1] x [v0, v1]` in feature coordinates.
    pub fn pool_feature_into(&self, u0: f64, u1: f64, v0: f64, v1: f64, out: &mut [f32]) {
        let area = (u1 - u0) * (v1 - v0);
        let wx = axis_weights(u0, u1, self.width);
        let wy = axis_weights(v0, v1, self.height);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = (self.channel_integral(c, &wx, &wy) / area) as f32;
        }
    }

    /// Double-precision variant of [`Self::pool_feature_into`].
    pub fn pool_feature_f64(&self, u0: f64, u1: f64, v0: f64, v1: f64) -> Vec<f64> {
        let area = (u1 - u0) * (v1 - v0);
        let wx = axis_weights(u0, u1, self.width);
        let wy = axis_weights(v0, v1, self.height);
        (0..self.channels)
            .map(|c| self.channel_integral(c, &wx, &wy) / area)
            .collect()
    }
}

/// Pools one region (resized-image pixel coordinates) from `map`.
pub fn prroi_pool(map: &FeatureMap, region: &Rect) -> Result<Vec<f32>> {
    PoolingSurface::new(map).pool(region)
}

/// Direct double sum over every cell; reference implementation for tests.
pub fn prroi_pool_naive(map: &FeatureMap, u0: f64, u1: f64, v0: f64, v1: f64) -> Vec<f64> {
    let area = (u1 - u0) * (v1 - v0);
    let wx: Vec<f64> = (0..map.width)
        .map(|j| tri_antiderivative(u1 - j as f64) - tri_antiderivative(u0 - j as f64))
        .collect();
    let wy: Vec<f64> = (0..map.height)
        .map(|i| tri_antiderivative(v1 - i as f64) - tri_antiderivative(v0 - i as f64))
        .collect();
    (0..map.channels)
        .map(|c| {
            let mut acc = 0.0;
            for (i, &a) in wy.iter().enumerate() {
                for (j, &b) in wx.iter().enumerate() {
                    acc += a * b * map.at(c, i, j) as f64;
                }
            }
            acc / area
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut x = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let values = (0..c * h * w)
            .map(|_| {
                x = x
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((x >> 33) % 1000) as f32 / 100.0
            })
            .collect();
        FeatureMap::new(c, h, w, 16, 20, values).unwrap()
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let m = FeatureMap::filled(3, 10, 12, 16, 20, 2.5);
        let s = PoolingSurface::new(&m);
        let r = Rect::new(13.0, 7.5, 61.0, 90.0).unwrap();
        for v in s.pool(&r).unwrap() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn convex_hull_of_two_by_two() {
        let m = FeatureMap::new(1, 2, 2, 16, 20, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut out = [0.0f32];
        PoolingSurface::new(&m).pool_feature_into(0.0, 1.0, 0.0, 1.0, &mut out);
        assert!((out[0] - 2.5).abs() < 1e-7);
        // same hull in pixel coordinates: centers at x = 16j - 12
        let r = Rect::new(-12.0, -12.0, 16.0, 16.0).unwrap();
        assert!((prroi_pool(&m, &r).unwrap()[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn linear_ramp_gives_center_value() {
        let (h, w) = (6, 20);
        let values = (0..h * w).map(|k| (k % w) as f32).collect();
        let m = FeatureMap::new(1, h, w, 16, 20, values).unwrap();
        let mut out = [0.0f32];
        for (a, b) in [(2.0, 9.0), (3.3, 4.1), (0.5, 17.25), (7.9, 8.0)] {
            PoolingSurface::new(&m).pool_feature_into(a, b, 1.0, 3.0, &mut out);
            assert!(
                (out[0] as f64 - (a + b) / 2.0).abs() < 1e-5,
                "{a} {b} -> {}",
                out[0]
            );
        }
    }

    #[test]
    fn outside_region_is_an_error() {
        let m = FeatureMap::filled(1, 4, 4, 16, 20, 1.0);
        let r = Rect::new(200.0, 200.0, 10.0, 10.0).unwrap();
        assert!(prroi_pool(&m, &r).is_err());
    }

    proptest! {
        #[test]
        fn fast_path_matches_naive(seed in 0u64..1000, u0 in -1.5f64..12.0, du in 0.05f64..9.0,
                                   v0 in -1.5f64..8.0, dv in 0.05f64..7.0) {
            let m = random_map(3, 9, 13, seed);
            let s = PoolingSurface::new(&m);
            let mut out = vec![0.0f32; 3];
            s.pool_feature_into(u0, u0 + du, v0, v0 + dv, &mut out);
            let naive = prroi_pool_naive(&m, u0, u0 + du, v0, v0 + dv);
            for (a, b) in out.iter().zip(&naive) {
                prop_assert!((*a as f64 - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }

        #[test]
        fn halves_average_to_whole(seed in 0u64..1000, u0 in 0.0f64..6.0, du in 0.2f64..6.0,
                                   v0 in 0.0f64..4.0, dv in 0.2f64..4.0, split in 0.1f64..0.9) {
            let m = random_map(2, 9, 13, seed);
            let (u1, v1) = (u0 + du, v0 + dv);
            let um = u0 + split * du;
            let s = PoolingSurface::new(&m);
            let whole = s.pool_feature_f64(u0, u1, v0, v1);
            let left = s.pool_feature_f64(u0, um, v0, v1);
            let right = s.pool_feature_f64(um, u1, v0, v1);
            for c in 0..2 {
                let combined = split * left[c] + (1.0 - split) * right[c];
                prop_assert!((combined - whole[c]).abs() < 1e-9);
            }
        }
    }
}
