//! Local-match scoring, candidate-image ranking, voting maps and local query
//! expansion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{Point, Rect};
use crate::index::{PatchRef, SearchResult};
use crate::model::{l2_normalize, l2_sq, Descriptor};
use crate::proposals::QueryPatch;

const GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VotingParams {
    pub k_nn: usize,
    /// 1-based rank of the neighbour used as reference distance.
    pub ref_rank: usize,
    pub top_t_images: usize,
    pub cell_size: f64,
    /// Gaussian width in cells.
    pub sigma_cells: f64,
    /// Half width of the stamped window; 2 gives 5 x 5.
    pub kernel_radius: usize,
    pub expansion_nn: usize,
    pub final_k: usize,
    pub expand: bool,
}

impl Default for VotingParams {
    fn default() -> Self {
        Self {
            k_nn: 100,
            ref_rank: 100,
            top_t_images: 100,
            cell_size: 8.0,
            sigma_cells: 1.0,
            kernel_radius: 2,
            expansion_nn: 10,
            final_k: 100,
            expand: true,
        }
    }
}

impl VotingParams {
    pub fn validate(&self) -> crate::Result<()> {
        if self.k_nn == 0 || self.ref_rank == 0 || self.ref_rank > self.k_nn {
            return Err(crate::Error::InvalidArgument(format!(
                "need 1 <= ref_rank ({}) <= k_nn ({})",
                self.ref_rank, self.k_nn
            )));
        }
        if self.cell_size.is_nan()
            || self.cell_size < 1.0
            || self.sigma_cells.is_nan()
            || self.sigma_cells <= 0.0
            || self.top_t_images == 0
        {
            return Err(crate::Error::InvalidArgument(
                "cell_size must be >= 1, sigma positive and top_t_images positive".into(),
            ));
        }
        Ok(())
    }

    /// Kernel weights, row-major over the `(2r+1)^2` window, peak 1.
    pub fn kernel(&self) -> Vec<f64> {
        let r = self.kernel_radius as i64;
        let s2 = 2.0 * self.sigma_cells * self.sigma_cells;
        let mut w = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                w.push((-((dx * dx + dy * dy) as f64) / s2).exp());
            }
        }
        w
    }
}

/// `exp(-dist2 / ref_dist2)` with the denominator guarded at 1e-12.
pub fn match_score(dist2: f64, ref_dist2: f64) -> f64 {
    if dist2 < GUARD && ref_dist2 < GUARD {
        return 1.0;
    }
    (-dist2.max(0.0) / ref_dist2.max(GUARD)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMatch {
    pub query_patch: u32,
    pub target: PatchRef,
    pub dist2: f32,
    pub score: f64,
    pub list: u32,
    pub pos: u32,
}

/// Scores every hit of every query patch against that patch's reference
/// neighbour (rank `ref_rank`, or the last hit when fewer came back).
pub fn local_matches(results: &[SearchResult], ref_rank: usize) -> Vec<Vec<LocalMatch>> {
    results
        .iter()
        .enumerate()
        .map(|(qi, r)| {
            let Some(reference) = r.hits.get(ref_rank.min(r.hits.len()).saturating_sub(1)) else {
                return Vec::new();
            };
            let ref_dist2 = reference.dist2 as f64;
            r.hits
                .iter()
                .map(|h| LocalMatch {
                    query_patch: qi as u32,
                    target: h.patch,
                    dist2: h.dist2,
                    score: match_score(h.dist2 as f64, ref_dist2),
                    list: h.list,
                    pos: h.pos,
                })
                .collect()
        })
        .collect()
}

/// Images by the sum over query patches of their best score in the image,
/// descending, ties by ascending id, truncated to `top_t`.
pub fn rank_candidate_images(per_patch: &[Vec<LocalMatch>], top_t: usize) -> Vec<(u32, f64)> {
    let mut totals: BTreeMap<u32, f64> = BTreeMap::new();
    for matches in per_patch {
        let mut best: BTreeMap<u32, f64> = BTreeMap::new();
        for m in matches {
            let e = best.entry(m.target.image_id).or_insert(0.0);
            *e = e.max(m.score);
        }
        for (img, s) in best {
            *totals.entry(img).or_insert(0.0) += s;
        }
    }
    let mut ranked: Vec<(u32, f64)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_t);
    ranked
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub image_id: u32,
    pub rect: Rect,
    pub score: f64,
}

/// Quantized accumulator of kernel-weighted scores and diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct VotingMap {
    pub image_id: u32,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub score: Vec<f64>,
    pub diag: Vec<f64>,
}

impl VotingMap {
    pub fn new(image_id: u32, width: u32, height: u32, cell_size: f64) -> Self {
        let rows = (height as f64 / cell_size).ceil().max(1.0) as usize;
        let cols = (width as f64 / cell_size).ceil().max(1.0) as usize;
        Self {
            image_id,
            cell_size,
            rows,
            cols,
            score: vec![0.0; rows * cols],
            diag: vec![0.0; rows * cols],
        }
    }

    /// Cell (row, col) containing `p`, possibly outside the map.
    pub fn cell_of(&self, p: Point) -> (i64, i64) {
        (
            (p.y / self.cell_size).floor() as i64,
            (p.x / self.cell_size).floor() as i64,
        )
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        Point {
            x: (col as f64 + 0.5) * self.cell_size,
            y: (row as f64 + 0.5) * self.cell_size,
        }
    }

    /// Stamps `score` and `score * diagonal` with the kernel around `center`.
    pub fn stamp(
        &mut self,
        center: Point,
        diagonal: f64,
        score: f64,
        kernel: &[f64],
        radius: usize,
    ) {
        let (row, col) = self.cell_of(center);
        let r = radius as i64;
        let side = 2 * r + 1;
        for dy in -r..=r {
            let y = row + dy;
            if y < 0 || y >= self.rows as i64 {
                continue;
            }
            for dx in -r..=r {
                let x = col + dx;
                if x < 0 || x >= self.cols as i64 {
                    continue;
                }
                let w = kernel[((dy + r) * side + dx + r) as usize] * score;
                let i = y as usize * self.cols + x as usize;
                self.score[i] += w;
                self.diag[i] += w * diagonal;
            }
        }
    }

    /// Highest-score cell (first in row-major order on ties) with its score
    /// and weighted mean diagonal.
    pub fn peak(&self) -> Option<(usize, usize, f64, f64)> {
        let mut best: Option<usize> = None;
        for (i, &s) in self.score.iter().enumerate() {
            if s > 0.0 && best.is_none_or(|b| s > self.score[b]) {
                best = Some(i);
            }
        }
        best.map(|i| {
            (
                i / self.cols,
                i % self.cols,
                self.score[i],
                self.diag[i] / self.score[i],
            )
        })
    }
}

/// Center and diagonal voted by query patch `f` matched to target `g`.
pub fn vote_for(query: &Rect, f: &QueryPatch, g: &Rect) -> (Point, f64) {
    let (cg, dg) = g.center_diagonal();
    let scale = dg / f.diag;
    (cg + f.vote * scale, query.diagonal() * scale)
}

/// Accumulates every match into the image's voting map and reads the
/// retrieval box off the peak.
pub fn vote_image(
    query: &Rect,
    patches: &[QueryPatch],
    matches: &[&LocalMatch],
    image_id: u32,
    width: u32,
    height: u32,
    params: &VotingParams,
) -> Option<Retrieval> {
    let map = voting_map(query, patches, matches, image_id, width, height, params);
    let (row, col, score, diag) = map.peak()?;
    let rect = Rect::from_center_diagonal(map.cell_center(row, col), diag, query.aspect()).ok()?;
    let rect = rect.clip_to(width as f64, height as f64)?;
    Some(Retrieval {
        image_id,
        rect,
        score,
    })
}

pub fn voting_map(
    query: &Rect,
    patches: &[QueryPatch],
    matches: &[&LocalMatch],
    image_id: u32,
    width: u32,
    height: u32,
    params: &VotingParams,
) -> VotingMap {
    let kernel = params.kernel();
    let mut map = VotingMap::new(image_id, width, height, params.cell_size);
    for m in matches {
        let Ok(g) = m.target.rect() else { continue };
        let f = &patches[m.query_patch as usize];
        let (center, diag) = vote_for(query, f, &g);
        map.stamp(center, diag, m.score, &kernel, params.kernel_radius);
    }
    map
}

/// Best match per distinct image for one patch, nearest first.
pub fn distinct_image_neighbors(
    matches: &[LocalMatch],
    limit: usize,
    exclude_image: Option<u32>,
) -> Vec<&LocalMatch> {
    let mut sorted: Vec<&LocalMatch> = matches.iter().collect();
    sorted.sort_by(|a, b| {
        a.dist2
            .total_cmp(&b.dist2)
            .then(a.target.image_id.cmp(&b.target.image_id))
            .then(a.target.patch_id.cmp(&b.target.patch_id))
    });
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for m in sorted {
        if out.len() >= limit {
            break;
        }
        let img = m.target.image_id;
        if Some(img) == exclude_image || seen.contains(&img) {
            continue;
        }
        seen.push(img);
        out.push(m);
    }
    out
}

/// Averages each patch descriptor with its best matches in up to
/// `expansion_nn` other images, renormalizes, and re-anchors the patch on
/// the nearest candidate region of the query image.
///
/// `neighbor` returns the stored descriptor of a match; `candidates` are
/// regions of the query image with their descriptors. The patch's own region
/// is always a candidate and wins ties.
pub fn expand_queries<F>(
    query: &Rect,
    patches: &[QueryPatch],
    matches: &[Vec<LocalMatch>],
    mut neighbor: F,
    candidates: &[(Rect, Option<u32>, Descriptor)],
    exclude_image: Option<u32>,
    params: &VotingParams,
) -> Vec<QueryPatch>
where
    F: FnMut(&LocalMatch) -> Vec<f32>,
{
    patches
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let empty = Vec::new();
            let ms = matches.get(i).unwrap_or(&empty);
            let nn = distinct_image_neighbors(ms, params.expansion_nn, exclude_image);
            if nn.is_empty() {
                return f.clone();
            }
            let mut sum: Vec<f64> = f.descriptor.0.iter().map(|&v| v as f64).collect();
            for m in &nn {
                for (s, v) in sum.iter_mut().zip(neighbor(m)) {
                    *s += v as f64;
                }
            }
            let mut expanded: Vec<f32> = sum
                .iter()
                .map(|&s| (s / (nn.len() + 1) as f64) as f32)
                .collect();
            if !l2_normalize(&mut expanded) {
                return f.clone();
            }
            let mut best = (f.rect, f.grid_id, l2_sq(&expanded, &f.descriptor.0));
            for (rect, id, d) in candidates {
                let dist = l2_sq(&expanded, &d.0);
                if dist < best.2 {
                    best = (*rect, *id, dist);
                }
            }
            QueryPatch::new(query, best.0, best.1, Descriptor(expanded))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::Hit;
    use proptest::prelude::*;

    fn pref(image_id: u32, patch_id: u32, rect: Rect) -> PatchRef {
        PatchRef::new(image_id, patch_id, &rect, 0)
    }

    fn lm(q: u32, image_id: u32, score: f64) -> LocalMatch {
        LocalMatch {
            query_patch: q,
            target: pref(image_id, 0, Rect::new(0.0, 0.0, 10.0, 10.0).unwrap()),
            dist2: 0.0,
            score,
            list: 0,
            pos: 0,
        }
    }

    #[test]
    fn match_score_examples() {
        assert_eq!(match_score(0.0, 3.0), 1.0);
        assert!((match_score(2.0, 2.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((match_score(2.0, 4.0) - 0.606531).abs() < 1e-6);
        assert_eq!(match_score(0.0, 0.0), 1.0);
        assert!(match_score(1.0, 0.0) < 1e-300);
    }

    proptest! {
        #[test]
        fn match_score_bounds(d in 0.0f64..100.0, r in 0.0f64..100.0) {
            let s = match_score(d, r);
            prop_assert!((0.0..=1.0).contains(&s));
            if d > 1e-9 && r > 1e-9 && d / r < 700.0 {
                prop_assert!(s > 0.0 && s < 1.0);
            }
        }
    }

    #[test]
    fn ranking_examples() {
        let r = rank_candidate_images(&[vec![lm(0, 7, 0.9), lm(0, 3, 0.5)]], 10);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![7, 3]);
        let r = rank_candidate_images(
            &[vec![lm(0, 1, 0.9), lm(0, 1, 0.8)], vec![lm(1, 1, 0.6)]],
            10,
        );
        assert!((r[0].1 - 1.5).abs() < 1e-12);
        let r = rank_candidate_images(&[vec![lm(0, 9, 0.5), lm(0, 4, 0.5)]], 10);
        assert_eq!(r[0].0, 4);
        assert!(rank_candidate_images(&[], 10).is_empty());
        let r = rank_candidate_images(&[vec![lm(0, 1, 0.5), lm(0, 2, 0.6), lm(0, 3, 0.7)]], 2);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![3, 2]);
    }

    fn square_at(cx: f64, cy: f64, diag: f64) -> Rect {
        let side = diag / 2f64.sqrt();
        Rect::new(cx - side / 2.0, cy - side / 2.0, side, side).unwrap()
    }

    #[test]
    fn vote_arithmetic_example() {
        let q = square_at(100.0, 100.0, 50.0);
        let f_rect = square_at(90.0, 95.0, 20.0);
        let f = QueryPatch::new(&q, f_rect, Some(0), Descriptor(vec![1.0]));
        let g = square_at(200.0, 200.0, 40.0);
        let (c, d) = vote_for(&q, &f, &g);
        assert!((c.x - 220.0).abs() < 1e-9 && (c.y - 210.0).abs() < 1e-9);
        assert!((d - 100.0).abs() < 1e-9);
        let map = VotingMap::new(0, 400, 400, 8.0);
        assert_eq!(map.cell_of(c), (26, 27));
    }

    #[test]
    fn single_vote_recovers_diagonal() {
        let q = square_at(100.0, 100.0, 50.0);
        let f = QueryPatch::new(
            &q,
            square_at(90.0, 95.0, 20.0),
            Some(0),
            Descriptor(vec![1.0]),
        );
        let m = LocalMatch {
            target: pref(1, 0, square_at(200.0, 200.0, 40.0)),
            ..lm(0, 1, 0.7)
        };
        let r = vote_image(&q, &[f], &[&m], 1, 400, 400, &VotingParams::default()).unwrap();
        let c = r.rect.center();
        assert!((c.x - 220.0).abs() <= 8.0 && (c.y - 210.0).abs() <= 8.0);
        assert!((r.rect.diagonal() - 100.0).abs() < 1e-4);
        assert!((r.score - 0.7).abs() < 1e-12);
    }

    #[test]
    fn diagonals_average() {
        let mut map = VotingMap::new(0, 100, 100, 8.0);
        let p = VotingParams::default();
        let k = p.kernel();
        map.stamp(Point { x: 50.0, y: 50.0 }, 80.0, 1.0, &k, 2);
        map.stamp(Point { x: 51.0, y: 52.0 }, 120.0, 1.0, &k, 2);
        let (_, _, s, d) = map.peak().unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        assert!((d - 100.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_peak_is_one() {
        let k = VotingParams::default().kernel();
        assert_eq!(k.len(), 25);
        assert_eq!(k[12], 1.0);
        assert!((k[13] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn local_match_reference() {
        let r = Rect::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let hits = (0..3)
            .map(|i| Hit {
                patch: pref(i, i, r),
                dist2: (i + 1) as f32,
                list: 0,
                pos: i,
            })
            .collect();
        let m = local_matches(&[SearchResult { hits, short: true }], 100);
        assert!((m[0][2].score - (-1.0f64).exp()).abs() < 1e-12);
        assert!((m[0][0].score - (-1.0f64 / 3.0).exp()).abs() < 1e-12);
    }

    fn unit(v: &[f32]) -> Descriptor {
        let mut v = v.to_vec();
        l2_normalize(&mut v);
        Descriptor(v)
    }

    #[test]
    fn expansion_with_identical_neighbors_is_identity() {
        let q = square_at(50.0, 50.0, 40.0);
        let f = QueryPatch::new(
            &q,
            square_at(45.0, 45.0, 20.0),
            Some(3),
            unit(&[1.0, 2.0, 2.0]),
        );
        let ms: Vec<LocalMatch> = (1..=12).map(|i| lm(0, i, 0.5)).collect();
        let d = f.descriptor.0.clone();
        let other = (square_at(10.0, 10.0, 20.0), Some(9), unit(&[0.0, 0.0, 1.0]));
        let out = expand_queries(
            &q,
            std::slice::from_ref(&f),
            &[ms],
            |_| d.clone(),
            &[other],
            None,
            &VotingParams::default(),
        );
        for (a, b) in out[0].descriptor.0.iter().zip(&f.descriptor.0) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(out[0].vote, f.vote);
        assert_eq!(out[0].grid_id, Some(3));
    }

    #[test]
    fn distinct_image_rule() {
        let mut ms: Vec<LocalMatch> = (0..5).map(|_| lm(0, 4, 0.5)).collect();
        for (i, m) in ms.iter_mut().enumerate() {
            m.dist2 = i as f32;
            m.target.patch_id = i as u32;
        }
        let nn = distinct_image_neighbors(&ms, 10, None);
        assert_eq!(nn.len(), 1);
        assert_eq!(nn[0].target.patch_id, 0);
        assert!(distinct_image_neighbors(&ms, 10, Some(4)).is_empty());
    }

    #[test]
    fn expansion_without_matches_passes_through() {
        let q = square_at(50.0, 50.0, 40.0);
        let f = QueryPatch::new(&q, q, None, unit(&[1.0, 0.0]));
        let out = expand_queries(
            &q,
            std::slice::from_ref(&f),
            &[vec![]],
            |_| vec![0.0, 1.0],
            &[],
            None,
            &VotingParams::default(),
        );
        assert_eq!(out[0], f);
    }

    proptest! {
        #[test]
        fn expanded_norm_is_one(vals in proptest::collection::vec(-1.0f32..1.0, 12)) {
            let q = square_at(50.0, 50.0, 40.0);
            let f = QueryPatch::new(&q, q, None, unit(&[0.3, -0.2, 0.9]));
            let ms: Vec<LocalMatch> = (0..4).map(|i| lm(0, i, 0.5)).collect();
            let out = expand_queries(
                &q, &[f], &[ms], |m| vals[m.target.image_id as usize * 3..][..3].to_vec(), &[], None,
                &VotingParams::default(),
            );
            prop_assert!((out[0].descriptor.norm() - 1.0).abs() < 1e-6);
        }
    }
}
