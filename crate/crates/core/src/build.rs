//! Offline stage: style templates, per-image patch selection, whitening,
//! index training and population, and artifact persistence.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    DirSource, Engine, FeatureProvider, ImageSource, QuerySettings, RegionEncoder,
};
use crate::error::{Error, Result};
use crate::features::{
    fit_whitening, select_style_templates, FeaturePipeline, FeatureSource, PreprocessConfig,
    StyleTemplate, WhiteningModel,
};
use crate::index::{IndexParams, IvfPqIndex, PatchRef};
use crate::model::{fingerprint, DatasetManifest, ImageRecord};
use crate::par;
use crate::persist::write_atomic;
use crate::proposals::{
    generate_patch_grid, proposals_per_image, select_discriminative, GridPatch, ProposalConfig,
    QueryPatchLimits,
};
use crate::voting::VotingParams;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEMPLATES_FILE: &str = "templates.json";
pub const WHITENING_FILE: &str = "whitening.whit";
pub const INDEX_FILE: &str = "index.ivpq";
pub const BUILD_FILE: &str = "build.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub dataset_root: PathBuf,
    pub descriptor_dim: usize,
    pub preprocess: PreprocessConfig,
    pub proposals: ProposalConfig,
    pub limits: QueryPatchLimits,
    pub voting: VotingParams,
    pub index: IndexParams,
    pub seed: u64,
    pub feature_source: FeatureSource,
    pub k_s: usize,
    pub fuse: bool,
    pub normalize: bool,
    /// Images whose patches train the whitening and the index.
    pub training_images: usize,
    pub max_whitening_samples: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("."),
            descriptor_dim: 48,
            preprocess: PreprocessConfig::default(),
            proposals: ProposalConfig::default(),
            limits: QueryPatchLimits::default(),
            voting: VotingParams::default(),
            index: IndexParams::default(),
            seed: 0,
            feature_source: FeatureSource::Toy,
            k_s: 3,
            fuse: true,
            normalize: true,
            training_images: 1000,
            max_whitening_samples: 200_000,
        }
    }
}

impl BuildConfig {
    pub fn query_settings(&self) -> QuerySettings {
        QuerySettings {
            proposals: self.proposals.clone(),
            limits: self.limits.clone(),
            voting: self.voting.clone(),
            n_probe: self.index.n_probe,
        }
    }

    /// Checks every constraint that does not need the dataset.
    pub fn validate(&self, channels: usize) -> Result<()> {
        self.proposals.validate()?;
        self.voting.validate()?;
        self.index.validate(self.descriptor_dim)?;
        if self.descriptor_dim > channels {
            return Err(Error::InvalidArgument(format!(
                "descriptor_dim {} exceeds the {channels} feature channels",
                self.descriptor_dim
            )));
        }
        if self.training_images == 0 || self.max_whitening_samples <= self.descriptor_dim {
            return Err(Error::InvalidArgument(
                "training sample settings too small".into(),
            ));
        }
        if !(self.limits.min_overlap > 0.0 && self.limits.min_overlap <= 1.0) {
            return Err(Error::InvalidArgument(
                "min_overlap must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn fingerprint_with(&self, image_hashes: &[String]) -> Result<String> {
        let mut bytes = serde_json::to_vec(self)?;
        for h in image_hashes {
            bytes.extend_from_slice(h.as_bytes());
        }
        Ok(fingerprint(&bytes))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub images: usize,
    pub entries: usize,
    pub budget_per_image: usize,
    pub training_vectors: usize,
    pub seconds: f64,
}

/// Everything a query engine needs, in memory.
pub struct Artifacts {
    pub manifest: DatasetManifest,
    pub templates: Vec<StyleTemplate>,
    pub whitening: WhiteningModel,
    pub index: IvfPqIndex,
    pub stats: BuildStats,
}

impl Artifacts {
    pub fn into_engine(self, cfg: &BuildConfig, images: Arc<dyn ImageSource>) -> Engine {
        let mut pipeline = FeaturePipeline::toy(cfg.preprocess);
        pipeline.templates = self.templates;
        pipeline.fuse = cfg.fuse;
        Engine {
            manifest: self.manifest,
            encoder: RegionEncoder {
                whitening: self.whitening,
                normalize: cfg.normalize,
            },
            index: self.index,
            provider: FeatureProvider {
                pipeline,
                source: cfg.feature_source.clone(),
                images,
            },
            settings: cfg.query_settings(),
        }
    }
}

fn image_seed(seed: u64, id: u32) -> u64 {
    seed ^ (id as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct Selected {
    patches: Vec<GridPatch>,
    raw: Vec<f32>,
}

fn select_image_patches(
    provider: &FeatureProvider,
    rec: &ImageRecord,
    cfg: &BuildConfig,
    budget: usize,
) -> Result<Selected> {
    let features = provider.features(rec)?;
    let grid = generate_patch_grid(rec.width, rec.height, &cfg.proposals);
    let c = features.channels();
    let mut raw = Vec::with_capacity(grid.len() * c);
    for g in &grid {
        raw.extend(features.pool(&g.rect)?);
    }
    if grid.is_empty() {
        return Ok(Selected {
            patches: Vec::new(),
            raw,
        });
    }
    let keep = select_discriminative(
        &raw,
        c,
        &cfg.proposals,
        budget,
        image_seed(cfg.seed, rec.id),
    )?;
    let mut out_raw = Vec::with_capacity(keep.len() * c);
    for &i in &keep {
        out_raw.extend_from_slice(&raw[i * c..(i + 1) * c]);
    }
    Ok(Selected {
        patches: keep.iter().map(|&i| grid[i]).collect(),
        raw: out_raw,
    })
}

/// Runs the offline pipeline over `manifest` and returns the artifacts.
pub fn build_artifacts(
    cfg: &BuildConfig,
    mut manifest: DatasetManifest,
    images: Arc<dyn ImageSource>,
    progress: &dyn Fn(&str),
) -> Result<Artifacts> {
    let start = std::time::Instant::now();
    let mut pipeline = FeaturePipeline::toy(cfg.preprocess);
    pipeline.fuse = cfg.fuse;
    let mut provider = FeatureProvider {
        pipeline,
        source: cfg.feature_source.clone(),
        images: images.clone(),
    };
    let channels = provider.channels()?;
    cfg.validate(channels)?;
    if manifest.images.is_empty() {
        return Err(Error::InvalidArgument("dataset contains no images".into()));
    }
    manifest.descriptor_dim = cfg.descriptor_dim;
    let n = manifest.n();

    let use_templates = cfg.fuse && cfg.k_s > 0 && cfg.feature_source == FeatureSource::Toy;
    let templates = if use_templates {
        progress("selecting style templates");
        let embeddings = par::map(&manifest.images, |rec| -> Result<Vec<f32>> {
            Ok(provider
                .pipeline
                .base_map(&images.load(rec)?)?
                .global_average())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let ids: Vec<u32> = manifest.images.iter().map(|r| r.id).collect();
        let chosen = select_style_templates(&ids, &embeddings, cfg.k_s, cfg.seed)?;
        chosen
            .iter()
            .map(|&id| {
                let rec = manifest.image(id).ok_or(Error::UnknownImage(id))?;
                Ok(StyleTemplate::from_image(id, &images.load(rec)?))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    manifest.style_template_ids = templates.iter().map(|t| t.image_id).collect();
    provider.pipeline.templates = templates.clone();

    let budget = proposals_per_image(n, &cfg.proposals);
    let mut train_ids: Vec<u32> = manifest.images.iter().map(|r| r.id).collect();
    train_ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1e));
    train_ids.truncate(cfg.training_images.min(n));
    train_ids.sort_unstable();
    progress(&format!(
        "selecting patches on {} training images",
        train_ids.len()
    ));
    let train_recs: Vec<&ImageRecord> = train_ids
        .iter()
        .map(|&id| manifest.image(id).unwrap())
        .collect();
    let selected: Vec<Selected> = par::map(&train_recs, |rec| {
        select_image_patches(&provider, rec, cfg, budget)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let total: usize = selected.iter().map(|s| s.patches.len()).sum();
    let step = total.div_ceil(cfg.max_whitening_samples).max(1);
    let mut sample = Vec::with_capacity(total / step * channels + channels);
    let mut i = 0usize;
    for s in &selected {
        for row in s.raw.chunks_exact(channels) {
            if i.is_multiple_of(step) {
                sample.extend_from_slice(row);
            }
            i += 1;
        }
    }
    progress(&format!(
        "fitting whitening on {} vectors",
        sample.len() / channels
    ));
    let whitening = fit_whitening(&sample, channels, cfg.descriptor_dim)?.round_to_f32();
    let encoder = RegionEncoder {
        whitening,
        normalize: cfg.normalize,
    };
    let encoded = encode_rows(&encoder, &sample, channels)?;
    drop(sample);
    progress("training index");
    let mut index = IvfPqIndex::train(&encoded, cfg.descriptor_dim, &cfg.index, cfg.seed)?;
    let training_vectors = encoded.len() / cfg.descriptor_dim;
    drop(encoded);

    let cached: HashMap<u32, Selected> = train_ids.iter().copied().zip(selected).collect();
    let shard = (4 * par::threads()).max(8);
    for (ci, chunk) in manifest.images.chunks(shard).enumerate() {
        let parts = par::map(chunk, |rec| -> Result<(Vec<PatchRef>, Vec<f32>)> {
            let fresh;
            let sel = match cached.get(&rec.id) {
                Some(s) => s,
                None => {
                    fresh = select_image_patches(&provider, rec, cfg, budget)?;
                    &fresh
                }
            };
            let refs = sel
                .patches
                .iter()
                .map(|p| PatchRef::new(rec.id, p.id, &p.rect, p.scale_index))
                .collect();
            Ok((refs, encode_rows(&encoder, &sel.raw, channels)?))
        });
        for part in parts {
            let (refs, vecs) = part?;
            index.add(&refs, &vecs)?;
        }
        if ci % 16 == 15 {
            progress(&format!(
                "indexed {} / {n} images",
                ((ci + 1) * shard).min(n)
            ));
        }
    }
    progress(&format!("indexed {n} images, {} entries", index.len()));

    let stats = BuildStats {
        images: n,
        entries: index.len(),
        budget_per_image: budget,
        training_vectors,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(Artifacts {
        manifest,
        templates,
        whitening: encoder.whitening,
        index,
        stats,
    })
}

fn encode_rows(encoder: &RegionEncoder, raw: &[f32], channels: usize) -> Result<Vec<f32>> {
    let rows: Vec<&[f32]> = raw.chunks_exact(channels).collect();
    let enc = par::map(&rows, |r| encoder.encode_raw(r));
    let mut out = Vec::with_capacity(rows.len() * encoder.dim());
    for e in enc {
        out.extend_from_slice(&e?.0);
    }
    Ok(out)
}

/// Sidecar describing a finished build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildRecord {
    pub fingerprint: String,
    pub config: BuildConfig,
    /// Artifact file name to SHA-256 of its bytes.
    pub artifacts: BTreeMapStr,
    pub stats: BuildStats,
}

pub type BTreeMapStr = std::collections::BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub enum BuildOutcome {
    Built(BuildStats),
    UpToDate,
}

fn image_source_for(cfg: &BuildConfig) -> DirSource {
    DirSource::new(&cfg.dataset_root)
}

/// Fingerprint of the config plus the content of every dataset image.
pub fn dataset_fingerprint(
    cfg: &BuildConfig,
    manifest: &DatasetManifest,
    images: &dyn ImageSource,
) -> Result<String> {
    let hashes = par::map(&manifest.images, |r| images.content_hash(r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    cfg.fingerprint_with(&hashes)
}

/// True when `out_dir` holds a complete build for `fp`.
pub fn is_up_to_date(out_dir: &Path, fp: &str) -> bool {
    let Ok(bytes) = std::fs::read(out_dir.join(BUILD_FILE)) else {
        return false;
    };
    let Ok(record) = serde_json::from_slice::<BuildRecord>(&bytes) else {
        return false;
    };
    record.fingerprint == fp
        && record.artifacts.iter().all(|(name, hash)| {
            std::fs::read(out_dir.join(name))
                .map(|b| &fingerprint(&b) == hash)
                .unwrap_or(false)
        })
}

/// Builds the dataset under `cfg.dataset_root` into `out_dir`, skipping all
/// work when the directory already holds an identical build.
pub fn build_to_dir(
    cfg: &BuildConfig,
    out_dir: &Path,
    progress: &dyn Fn(&str),
) -> Result<BuildOutcome> {
    let source = image_source_for(cfg);
    let channels = match &cfg.feature_source {
        FeatureSource::Toy => crate::features::TOY_CHANNELS,
        FeatureSource::Ingested { dir } => {
            crate::features::FeatureMap::load(&crate::engine::ingested_path(dir, 0))?.channels
        }
    };
    cfg.validate(channels)?;
    let manifest = source.scan(cfg.descriptor_dim)?;
    build_manifest_to_dir(cfg, manifest, Arc::new(source), out_dir, progress)
}

pub fn build_manifest_to_dir(
    cfg: &BuildConfig,
    mut manifest: DatasetManifest,
    images: Arc<dyn ImageSource>,
    out_dir: &Path,
    progress: &dyn Fn(&str),
) -> Result<BuildOutcome> {
    let fp = dataset_fingerprint(cfg, &manifest, images.as_ref())?;
    if is_up_to_date(out_dir, &fp) {
        progress("artifacts up to date");
        return Ok(BuildOutcome::UpToDate);
    }
    manifest.config_fingerprint = fp.clone();
    let art = build_artifacts(cfg, manifest, images, progress)?;
    save_artifacts(&art, cfg, out_dir)?;
    Ok(BuildOutcome::Built(art.stats))
}

pub fn save_artifacts(art: &Artifacts, cfg: &BuildConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    // an interrupted rebuild must not leave a record matching new files
    let _ = std::fs::remove_file(out_dir.join(BUILD_FILE));
    let mut whit = Vec::new();
    art.whitening.write_to(&mut whit)?;
    let files: Vec<(&str, Vec<u8>)> = vec![
        (MANIFEST_FILE, art.manifest.to_json()?),
        (TEMPLATES_FILE, serde_json::to_vec_pretty(&art.templates)?),
        (WHITENING_FILE, whit),
        (INDEX_FILE, art.index.to_bytes()),
    ];
    let mut hashes = BTreeMapStr::new();
    for (name, bytes) in &files {
        write_atomic(&out_dir.join(name), bytes)?;
        hashes.insert(name.to_string(), fingerprint(bytes));
    }
    let record = BuildRecord {
        fingerprint: art.manifest.config_fingerprint.clone(),
        config: cfg.clone(),
        artifacts: hashes,
        stats: art.stats.clone(),
    };
    write_atomic(
        &out_dir.join(BUILD_FILE),
        &serde_json::to_vec_pretty(&record)?,
    )
}

/// Loads a build directory into a query engine over `images`.
pub fn load_engine(out_dir: &Path, images: Option<Arc<dyn ImageSource>>) -> Result<Engine> {
    let record: BuildRecord = serde_json::from_slice(&std::fs::read(out_dir.join(BUILD_FILE))?)?;
    let manifest = DatasetManifest::load(&out_dir.join(MANIFEST_FILE))?;
    if manifest.config_fingerprint != record.fingerprint {
        return Err(Error::Corrupt {
            what: out_dir.display().to_string(),
            reason: "manifest fingerprint does not match build record".into(),
        });
    }
    let templates: Vec<StyleTemplate> =
        serde_json::from_slice(&std::fs::read(out_dir.join(TEMPLATES_FILE))?)?;
    let whitening = WhiteningModel::load(&out_dir.join(WHITENING_FILE))?;
    let index = IvfPqIndex::load_expecting(&out_dir.join(INDEX_FILE), manifest.descriptor_dim)?;
    if whitening.d_out != manifest.descriptor_dim {
        return Err(Error::DimensionMismatch {
            expected: manifest.descriptor_dim,
            found: whitening.d_out,
        });
    }
    let images = images.unwrap_or_else(|| Arc::new(image_source_for(&record.config)));
    let stats = record.stats.clone();
    Ok(Artifacts {
        manifest,
        templates,
        whitening,
        index,
        stats,
    }
    .into_engine(&record.config, images))
}
