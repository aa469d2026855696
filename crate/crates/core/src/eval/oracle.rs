//! Exhaustive references for tiny collections: exact dense matching with
//! voting, and a sliding-window search over every candidate box.

use image::RgbImage;

use crate::engine::RegionEncoder;
use crate::error::{Error, Result};
use crate::features::{FeaturePipeline, ImageFeatures};
use crate::geometry::{Point, Rect};
use crate::index::{exact_knn, Hit, PatchRef, SearchResult};
use crate::model::l2_sq;
use crate::par;
use crate::proposals::{
    generate_patch_grid, select_query_patches, ProposalConfig, QueryPatch, QueryPatchLimits,
};
use crate::voting::{local_matches, rank_candidate_images, voting_map, LocalMatch, VotingParams};

pub const ORACLE_MAX_IMAGES: usize = 10;
pub const ORACLE_MAX_SIDE: u32 = 128;

/// Every grid patch of every image with its exact descriptor.
pub struct DenseCollection {
    pub features: Vec<ImageFeatures>,
    pub sizes: Vec<(u32, u32)>,
    pub refs: Vec<PatchRef>,
    pub descriptors: Vec<f32>,
    pub encoder: RegionEncoder,
    pub proposals: ProposalConfig,
}

/// A located box with its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Located {
    pub image_id: u32,
    pub center: Point,
    pub diagonal: f64,
    pub score: f64,
}

impl DenseCollection {
    pub fn new(
        images: &[RgbImage],
        pipeline: &FeaturePipeline,
        encoder: RegionEncoder,
        proposals: ProposalConfig,
    ) -> Result<Self> {
        if images.len() > ORACLE_MAX_IMAGES
            || images
                .iter()
                .any(|i| i.width().max(i.height()) > ORACLE_MAX_SIDE)
        {
            return Err(Error::InvalidArgument(format!(
                "oracle limited to {ORACLE_MAX_IMAGES} images of at most {ORACLE_MAX_SIDE} px"
            )));
        }
        let features = par::map(images, |img| pipeline.features(img))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut refs = Vec::new();
        let mut descriptors = Vec::new();
        for (id, (img, f)) in images.iter().zip(&features).enumerate() {
            for g in generate_patch_grid(img.width(), img.height(), &proposals) {
                descriptors.extend(encoder.encode(f, &g.rect)?.0);
                refs.push(PatchRef::new(id as u32, g.id, &g.rect, g.scale_index));
            }
        }
        let sizes = images.iter().map(|i| i.dimensions()).collect();
        Ok(Self {
            features,
            sizes,
            refs,
            descriptors,
            encoder,
            proposals,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn query_patches(
        &self,
        image_id: u32,
        query: &Rect,
        limits: &QueryPatchLimits,
    ) -> Result<Vec<QueryPatch>> {
        let (w, h) = self.sizes[image_id as usize];
        let f = &self.features[image_id as usize];
        let grid = generate_patch_grid(w, h, &self.proposals);
        select_query_patches(query, &grid, f, limits, |r| self.encoder.encode(f, r))
    }

    /// Exact k-nn of every query patch over the dense set, scored.
    pub fn exact_matches(
        &self,
        patches: &[QueryPatch],
        params: &VotingParams,
    ) -> Vec<Vec<LocalMatch>> {
        let flat: Vec<f32> = patches
            .iter()
            .flat_map(|p| p.descriptor.0.iter().copied())
            .collect();
        let knn = exact_knn(&flat, &self.descriptors, self.dim(), params.k_nn);
        let results: Vec<SearchResult> = knn
            .into_iter()
            .map(|list| SearchResult {
                short: list.len() < params.k_nn,
                hits: list
                    .into_iter()
                    .map(|(i, d)| Hit {
                        patch: self.refs[i],
                        dist2: d,
                        list: 0,
                        pos: i as u32,
                    })
                    .collect(),
            })
            .collect();
        local_matches(&results, params.ref_rank)
    }

    /// Voting over exact matches: per candidate image, the peak cell center
    /// and recovered diagonal (before clipping), best first.
    pub fn exact_voting(
        &self,
        query: &Rect,
        patches: &[QueryPatch],
        params: &VotingParams,
    ) -> Vec<Located> {
        let matches = self.exact_matches(patches, params);
        let candidates = rank_candidate_images(&matches, params.top_t_images);
        let mut out: Vec<Located> = candidates
            .iter()
            .filter_map(|&(id, _)| {
                let ms: Vec<&LocalMatch> = matches
                    .iter()
                    .flatten()
                    .filter(|m| m.target.image_id == id)
                    .collect();
                let (w, h) = self.sizes[id as usize];
                let map = voting_map(query, patches, &ms, id, w, h, params);
                let (row, col, score, diagonal) = map.peak()?;
                Some(Located {
                    image_id: id,
                    center: map.cell_center(row, col),
                    diagonal,
                    score,
                })
            })
            .collect();
        out.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.image_id.cmp(&b.image_id))
        });
        out
    }

    /// The `ref_rank`-th exact neighbour distance of each patch.
    pub fn reference_distances(&self, patches: &[QueryPatch], params: &VotingParams) -> Vec<f64> {
        self.exact_matches(patches, params)
            .iter()
            .map(|ms| {
                let i = params.ref_rank.min(ms.len()).saturating_sub(1);
                ms.get(i).map(|m| m.dist2 as f64).unwrap_or(0.0)
            })
            .collect()
    }
}

/// Scores every box of every image: centers on the voting-cell lattice,
/// diagonals on a 2^(1/8) ladder from half to twice the query diagonal. A
/// box scores the summed match score of every query patch against the
/// correspondingly placed region inside the box. Returns the best box per
/// image, best first.
pub fn brute_force_retrieval_oracle(
    dense: &DenseCollection,
    query: &Rect,
    patches: &[QueryPatch],
    params: &VotingParams,
) -> Vec<Located> {
    let refs = dense.reference_distances(patches, params);
    let dq = query.diagonal();
    let ladder: Vec<f64> = (-8..=8).map(|j| dq * 2f64.powf(j as f64 / 8.0)).collect();
    let per_image = par::map_range(dense.sizes.len(), |id| {
        let (w, h) = dense.sizes[id];
        let f = &dense.features[id];
        let rows = (h as f64 / params.cell_size).ceil() as usize;
        let cols = (w as f64 / params.cell_size).ceil() as usize;
        let mut best: Option<Located> = None;
        for row in 0..rows {
            for col in 0..cols {
                let center = Point {
                    x: (col as f64 + 0.5) * params.cell_size,
                    y: (row as f64 + 0.5) * params.cell_size,
                };
                for &d in &ladder {
                    let scale = d / dq;
                    let mut score = 0.0;
                    for (p, &r) in patches.iter().zip(&refs) {
                        let c = center - p.vote * scale;
                        let Ok(region) =
                            Rect::from_center_diagonal(c, p.diag * scale, p.rect.aspect())
                        else {
                            continue;
                        };
                        let Ok(desc) = dense.encoder.encode(f, &region) else {
                            continue;
                        };
                        score +=
                            crate::voting::match_score(l2_sq(&desc.0, &p.descriptor.0) as f64, r);
                    }
                    if best.is_none_or(|b| score > b.score) {
                        best = Some(Located {
                            image_id: id as u32,
                            center,
                            diagonal: d,
                            score,
                        });
                    }
                }
            }
        }
        best
    });
    let mut out: Vec<Located> = per_image.into_iter().flatten().collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_id.cmp(&b.image_id))
    });
    out
}
