//! Multi-scale square patch grid, discriminative patch selection for the
//! index, and local query patch selection inside a marked region.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::ImageFeatures;
use crate::geometry::{iou, Point, Rect};
use crate::index::kmeans::kmeans;
use crate::model::Descriptor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub num_scales: usize,
    pub scale_factor: f64,
    /// Largest patch side relative to the largest image side.
    pub max_relative_size: f64,
    /// Lattice stride relative to the largest image side.
    pub stride_fraction: f64,
    /// Cluster count for discriminative selection.
    pub k_e: usize,
    pub base_budget: usize,
    pub budget_decrement: usize,
    /// Dataset-size step (and threshold) for the budget decrement.
    pub budget_step: usize,
    pub min_budget: usize,
    /// Patches sampled per image before clustering.
    pub sample_cap: usize,
    pub selection_iters: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            num_scales: 6,
            scale_factor: std::f64::consts::FRAC_1_SQRT_2,
            max_relative_size: 0.5,
            stride_fraction: 1.0 / 50.0,
            k_e: 200,
            base_budget: 4000,
            budget_decrement: 375,
            budget_step: 20_000,
            min_budget: 500,
            sample_cap: 10_000,
            selection_iters: 25,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error::InvalidArgument as E;
        if self.num_scales == 0 {
            return Err(E("num_scales must be at least 1".into()));
        }
        if !(self.scale_factor > 0.0 && self.max_relative_size > 0.0 && self.stride_fraction > 0.0)
        {
            return Err(E(
                "scale factor, patch size and stride must be positive".into()
            ));
        }
        if self.k_e == 0 || self.base_budget == 0 || self.min_budget == 0 || self.budget_step == 0 {
            return Err(E("k_e, budgets and budget step must be positive".into()));
        }
        if self.min_budget > self.base_budget {
            return Err(E("min_budget exceeds base_budget".into()));
        }
        Ok(())
    }
}

/// One sliding-window patch; `id` is its position in the image's grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPatch {
    pub id: u32,
    pub rect: Rect,
    pub scale_index: u8,
}

/// Square patches of side `L * max_relative_size * scale_factor^k` (L = largest
/// image side) on a lattice of stride `L * stride_fraction`, keeping only
/// squares fully inside the image. Ordered by scale, then row, then column.
pub fn generate_patch_grid(width: u32, height: u32, cfg: &ProposalConfig) -> Vec<GridPatch> {
    let (w, h) = (width as f64, height as f64);
    let largest = w.max(h);
    let stride = largest * cfg.stride_fraction;
    let mut out = Vec::new();
    for k in 0..cfg.num_scales {
        let side = largest * cfg.max_relative_size * cfg.scale_factor.powi(k as i32);
        if side > w.min(h) {
            continue;
        }
        let nx = lattice_count(w, side, stride);
        let ny = lattice_count(h, side, stride);
        for iy in 0..ny {
            for ix in 0..nx {
                let rect = Rect::square(ix as f64 * stride, iy as f64 * stride, side)
                    .expect("positive side");
                out.push(GridPatch {
                    id: out.len() as u32,
                    rect,
                    scale_index: k as u8,
                });
            }
        }
    }
    out
}

fn lattice_count(extent: f64, side: f64, stride: f64) -> usize {
    ((extent - side) / stride + 1e-9).floor() as usize + 1
}

/// Index budget per image for a dataset of `n` images.
pub fn proposals_per_image(n: usize, cfg: &ProposalConfig) -> usize {
    let steps = n.saturating_sub(cfg.budget_step).div_ceil(cfg.budget_step);
    cfg.base_budget
        .saturating_sub(cfg.budget_decrement * steps)
        .clamp(cfg.min_budget, cfg.base_budget)
}

fn content_key(seed: u64, v: &[f32]) -> u64 {
    // FNV-1a over the seed and the raw bits
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for x in v {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Picks the `budget` patches whose descriptors have the largest mean L2
/// distance to `k_e` k-means centers fitted on a sample of the patches.
///
/// Sampling and clustering depend only on descriptor content, so the result
/// does not depend on input order except through the id tie-break. Returns
/// ascending patch indices.
pub fn select_discriminative(
    descriptors: &[f32],
    dim: usize,
    cfg: &ProposalConfig,
    budget: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = descriptors.len() / dim;
    if n <= budget {
        return Ok((0..n).collect());
    }
    let row = |i: usize| &descriptors[i * dim..(i + 1) * dim];
    let mut keyed: Vec<(u64, usize)> = (0..n).map(|i| (content_key(seed, row(i)), i)).collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            let (x, y) = (row(a.1), row(b.1));
            x.iter()
                .map(|v| v.to_bits())
                .cmp(y.iter().map(|v| v.to_bits()))
        })
    });
    keyed.truncate(cfg.sample_cap.max(1).min(n));
    let sample: Vec<f32> = keyed
        .iter()
        .flat_map(|&(_, i)| row(i).iter().copied())
        .collect();
    let k = cfg.k_e.min(keyed.len());
    let centers = kmeans(&sample, dim, k, cfg.selection_iters, seed)?;

    let scores: Vec<f64> = crate::par::map_range(n, |i| {
        let v = row(i);
        let total: f64 = (0..centers.k)
            .map(|c| (crate::model::l2_sq(v, centers.centroid(c)) as f64).sqrt())
            .sum();
        total / centers.k as f64
    });
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(budget);
    order.sort_unstable();
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryPatchLimits {
    /// Minimum fraction of a patch's own area inside the query region.
    pub min_overlap: f64,
    pub nms_iou: f64,
    pub max_patches: usize,
}

impl Default for QueryPatchLimits {
    fn default() -> Self {
        Self {
            min_overlap: 0.9,
            nms_iou: 0.3,
            max_patches: 32,
        }
    }
}

/// A local query patch with its voting vector `c_q - c_f` and diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPatch {
    pub rect: Rect,
    /// Grid id in the query image; `None` for the query rectangle itself.
    pub grid_id: Option<u32>,
    pub vote: Point,
    pub diag: f64,
    pub descriptor: Descriptor,
}

impl QueryPatch {
    pub fn new(query: &Rect, rect: Rect, grid_id: Option<u32>, descriptor: Descriptor) -> Self {
        Self {
            rect,
            grid_id,
            vote: query.center() - rect.center(),
            diag: rect.diagonal(),
            descriptor,
        }
    }
}

/// Grid patches mostly inside `query`, thinned by greedy activation NMS,
/// followed by the query rectangle itself.
pub fn select_query_patches<F>(
    query: &Rect,
    grid: &[GridPatch],
    features: &ImageFeatures,
    limits: &QueryPatchLimits,
    mut describe: F,
) -> Result<Vec<QueryPatch>>
where
    F: FnMut(&Rect) -> Result<Descriptor>,
{
    let mut candidates: Vec<(f64, &GridPatch)> = grid
        .iter()
        .filter(|p| p.rect.overlap_fraction(query) >= limits.min_overlap)
        .map(|p| Ok((features.activation(&p.rect)?, p)))
        .collect::<Result<_>>()?;
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    let mut kept: Vec<&GridPatch> = Vec::new();
    for (_, p) in candidates {
        if kept.len() >= limits.max_patches {
            break;
        }
        if kept.iter().all(|k| iou(&k.rect, &p.rect) <= limits.nms_iou) {
            kept.push(p);
        }
    }
    let mut out = Vec::with_capacity(kept.len() + 1);
    for p in kept {
        out.push(QueryPatch::new(
            query,
            p.rect,
            Some(p.id),
            describe(&p.rect)?,
        ));
    }
    out.push(QueryPatch::new(query, *query, None, describe(query)?));
    Ok(out)
}
