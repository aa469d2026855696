//! The query engine over a built index: query patch selection, two search
//! passes with voting, and local query expansion in between.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    apply_whitening, load_image, FeatureMap, FeaturePipeline, FeatureSource, ImageFeatures,
    WhiteningModel,
};
use crate::geometry::Rect;
use crate::index::IvfPqIndex;
use crate::model::{fingerprint, DatasetManifest, Descriptor, ImageRecord};
use crate::par;
use crate::proposals::{
    generate_patch_grid, select_query_patches, ProposalConfig, QueryPatch, QueryPatchLimits,
};
use crate::voting::{
    expand_queries, local_matches, rank_candidate_images, vote_image, LocalMatch, Retrieval,
    VotingParams,
};

/// Smallest accepted query side in original pixels.
pub const MIN_QUERY_SIDE: f64 = 16.0;

/// Pixel access for manifest images.
pub trait ImageSource: Send + Sync {
    fn load(&self, record: &ImageRecord) -> Result<RgbImage>;

    /// Content hash used for build fingerprints.
    fn content_hash(&self, record: &ImageRecord) -> Result<String> {
        Ok(fingerprint(self.load(record)?.as_raw()))
    }
}

/// Images stored as files under a root directory.
#[derive(Debug, Clone)]
pub struct DirSource {
    pub root: PathBuf,
}

impl DirSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_of(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Manifest over every png/jpeg file directly under the root, ids in
    /// file-name order.
    pub fn scan(&self, descriptor_dim: usize) -> Result<DatasetManifest> {
        let entries = std::fs::read_dir(&self.root).map_err(|e| Error::Ingestion {
            path: self.root.clone(),
            reason: e.to_string(),
        })?;
        let mut names = Vec::new();
        for e in entries {
            let path = e?.path();
            let ext = path
                .extension()
                .and_then(|x| x.to_str())
                .map(|x| x.to_ascii_lowercase());
            if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                names.push(path.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
        names.sort();
        let mut images = Vec::with_capacity(names.len());
        for name in names {
            let path = self.root.join(&name);
            let (w, h) = image::image_dimensions(&path).map_err(|e| Error::Ingestion {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            images.push((name, w, h));
        }
        DatasetManifest::from_images(images, descriptor_dim)
    }
}

impl ImageSource for DirSource {
    fn load(&self, record: &ImageRecord) -> Result<RgbImage> {
        load_image(&self.path_of(record))
    }

    fn content_hash(&self, record: &ImageRecord) -> Result<String> {
        let path = self.path_of(record);
        let bytes = std::fs::read(&path).map_err(|e| Error::Ingestion {
            path,
            reason: e.to_string(),
        })?;
        Ok(fingerprint(&bytes))
    }
}

/// Images held in memory, indexed by id.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub images: Vec<RgbImage>,
}

impl ImageSource for MemorySource {
    fn load(&self, record: &ImageRecord) -> Result<RgbImage> {
        self.images
            .get(record.id as usize)
            .cloned()
            .ok_or(Error::UnknownImage(record.id))
    }
}

/// Whitening plus the optional L2 normalization.
#[derive(Debug, Clone)]
pub struct RegionEncoder {
    pub whitening: WhiteningModel,
    pub normalize: bool,
}

impl RegionEncoder {
    pub fn dim(&self) -> usize {
        self.whitening.d_out
    }

    pub fn encode_raw(&self, raw: &[f32]) -> Result<Descriptor> {
        if self.normalize {
            Ok(apply_whitening(&self.whitening, raw)?.descriptor)
        } else {
            if raw.len() != self.whitening.dim_in {
                return Err(Error::DimensionMismatch {
                    expected: self.whitening.dim_in,
                    found: raw.len(),
                });
            }
            Ok(Descriptor(
                self.whitening
                    .project(raw)
                    .into_iter()
                    .map(|v| v as f32)
                    .collect(),
            ))
        }
    }

    pub fn encode(&self, features: &ImageFeatures, region: &Rect) -> Result<Descriptor> {
        self.encode_raw(&features.pool(region)?)
    }
}

/// Produces the feature maps for manifest images.
#[derive(Clone)]
pub struct FeatureProvider {
    pub pipeline: FeaturePipeline,
    pub source: FeatureSource,
    pub images: Arc<dyn ImageSource>,
}

impl FeatureProvider {
    pub fn features(&self, record: &ImageRecord) -> Result<ImageFeatures> {
        match &self.source {
            FeatureSource::Toy => self.pipeline.features(&self.images.load(record)?),
            FeatureSource::Ingested { dir } => {
                let map = FeatureMap::load(&ingested_path(dir, record.id))?;
                self.pipeline.ingested(map, record.width, record.height)
            }
        }
    }

    pub fn channels(&self) -> Result<usize> {
        match &self.source {
            FeatureSource::Toy => Ok(self.pipeline.channels()),
            FeatureSource::Ingested { dir } => {
                let path = ingested_path(dir, 0);
                Ok(FeatureMap::load(&path)?.channels)
            }
        }
    }
}

pub fn ingested_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("{id}.msfm"))
}

/// Query-time settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySettings {
    pub proposals: ProposalConfig,
    pub limits: QueryPatchLimits,
    pub voting: VotingParams,
    pub n_probe: usize,
}

impl Default for QuerySettings {
    fn default() -> Self {
        Self {
            proposals: ProposalConfig::default(),
            limits: QueryPatchLimits::default(),
            voting: VotingParams::default(),
            n_probe: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryTiming {
    pub features_ms: f64,
    pub search_ms: f64,
    pub voting_ms: f64,
    pub total_ms: f64,
}

/// Rankings after each stage of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    /// Best single match of the query-rectangle descriptor per image.
    pub no_voting: Vec<Retrieval>,
    /// Voting with the original query patches.
    pub single_pass: Vec<Retrieval>,
    /// Voting with the expanded query patches.
    pub full: Vec<Retrieval>,
    /// Largest number of images voted on in either pass.
    pub candidates_considered: usize,
    pub query_patches: usize,
    pub timing: QueryTiming,
}

pub struct Engine {
    pub manifest: DatasetManifest,
    pub encoder: RegionEncoder,
    pub index: IvfPqIndex,
    pub provider: FeatureProvider,
    pub settings: QuerySettings,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Engine {
    pub fn record(&self, image_id: u32) -> Result<&ImageRecord> {
        self.manifest
            .image(image_id)
            .ok_or(Error::UnknownImage(image_id))
    }

    /// Checks that `rect` is a usable query on the image.
    pub fn validate_query(&self, image_id: u32, rect: &Rect) -> Result<()> {
        let rec = self.record(image_id)?;
        let tol = 1e-6;
        if rect.x() < -tol
            || rect.y() < -tol
            || rect.right() > rec.width as f64 + tol
            || rect.bottom() > rec.height as f64 + tol
        {
            return Err(Error::InvalidArgument(format!(
                "query rect [{}, {}, {}, {}] outside image {} ({}x{})",
                rect.x(),
                rect.y(),
                rect.w(),
                rect.h(),
                image_id,
                rec.width,
                rec.height
            )));
        }
        if rect.w().min(rect.h()) < MIN_QUERY_SIDE {
            return Err(Error::QueryTooSmall(format!(
                "query sides must be at least {MIN_QUERY_SIDE} px (one feature cell)"
            )));
        }
        Ok(())
    }

    /// Runs the full retrieval for a query region and returns every stage.
    pub fn retrieve(&self, image_id: u32, rect: &Rect, k: usize) -> Result<QueryOutcome> {
        let t0 = Instant::now();
        if self.index.is_empty() {
            return Err(Error::EmptyIndex);
        }
        self.validate_query(image_id, rect)?;
        let rec = self.record(image_id)?;
        let s = &self.settings;
        let v = &s.voting;

        let features = self.provider.features(rec)?;
        let grid = generate_patch_grid(rec.width, rec.height, &s.proposals);
        let patches = select_query_patches(rect, &grid, &features, &s.limits, |r| {
            self.encoder.encode(&features, r)
        })?;
        let features_ms = elapsed_ms(t0);

        let mut search_ms = 0.0;
        let mut voting_ms = 0.0;
        let t = Instant::now();
        let matches = self.search(&patches)?;
        search_ms += elapsed_ms(t);

        let t = Instant::now();
        let no_voting = best_match_ranking(&matches[patches.len() - 1], k);
        let (single_pass, considered1) = self.vote_all(rect, &patches, &matches, k);
        voting_ms += elapsed_ms(t);

        let (full, considered2) = if v.expand {
            let t = Instant::now();
            let candidates: Vec<(Rect, Option<u32>, Descriptor)> = par::map(&grid, |g| {
                self.encoder
                    .encode(&features, &g.rect)
                    .map(|d| (g.rect, Some(g.id), d))
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let expanded = expand_queries(
                rect,
                &patches,
                &matches,
                |m| self.index.reconstruct(m.list, m.pos),
                &candidates,
                Some(image_id),
                v,
            );
            voting_ms += elapsed_ms(t);
            let t = Instant::now();
            let matches2 = self.search(&expanded)?;
            search_ms += elapsed_ms(t);
            let t = Instant::now();
            let out = self.vote_all(rect, &expanded, &matches2, k);
            voting_ms += elapsed_ms(t);
            out
        } else {
            (single_pass.clone(), 0)
        };

        Ok(QueryOutcome {
            no_voting,
            single_pass,
            full,
            candidates_considered: considered1.max(considered2),
            query_patches: patches.len(),
            timing: QueryTiming {
                features_ms,
                search_ms,
                voting_ms,
                total_ms: elapsed_ms(t0),
            },
        })
    }

    fn search(&self, patches: &[QueryPatch]) -> Result<Vec<Vec<LocalMatch>>> {
        let dim = self.index.dim();
        let mut flat = Vec::with_capacity(patches.len() * dim);
        for p in patches {
            if p.descriptor.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.descriptor.dim(),
                });
            }
            flat.extend_from_slice(&p.descriptor.0);
        }
        let v = &self.settings.voting;
        let results = self.index.search(&flat, v.k_nn, self.settings.n_probe)?;
        Ok(local_matches(&results, v.ref_rank))
    }

    /// Stage-1 ranking followed by voting on the top candidates.
    fn vote_all(
        &self,
        query: &Rect,
        patches: &[QueryPatch],
        matches: &[Vec<LocalMatch>],
        k: usize,
    ) -> (Vec<Retrieval>, usize) {
        let v = &self.settings.voting;
        let candidates = rank_candidate_images(matches, v.top_t_images);
        let mut per_image: BTreeMap<u32, Vec<&LocalMatch>> =
            candidates.iter().map(|&(id, _)| (id, Vec::new())).collect();
        for m in matches.iter().flatten() {
            if let Some(list) = per_image.get_mut(&m.target.image_id) {
                list.push(m);
            }
        }
        let groups: Vec<(u32, Vec<&LocalMatch>)> = per_image.into_iter().collect();
        let voted = par::map(&groups, |(id, ms)| {
            let rec = self.manifest.image(*id)?;
            vote_image(query, patches, ms, *id, rec.width, rec.height, v)
        });
        let mut out: Vec<Retrieval> = voted.into_iter().flatten().collect();
        sort_retrievals(&mut out);
        out.truncate(k);
        (out, groups.len())
    }
}

/// Descending score, ties by ascending image id.
pub fn sort_retrievals(r: &mut [Retrieval]) {
    r.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_id.cmp(&b.image_id))
    });
}

/// One retrieval per image: the best-scoring matched patch itself.
pub fn best_match_ranking(matches: &[LocalMatch], k: usize) -> Vec<Retrieval> {
    let mut best: BTreeMap<u32, &LocalMatch> = BTreeMap::new();
    for m in matches {
        let e = best.entry(m.target.image_id).or_insert(m);
        if m.score > e.score {
            *e = m;
        }
    }
    let mut out: Vec<Retrieval> = best
        .into_values()
        .filter_map(|m| {
            Some(Retrieval {
                image_id: m.target.image_id,
                rect: m.target.rect().ok()?,
                score: m.score,
            })
        })
        .collect();
    sort_retrievals(&mut out);
    out.truncate(k);
    out
}
