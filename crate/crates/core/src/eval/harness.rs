//! End-to-end benchmark runs: generate, build, query every planted instance
//! and score each retrieval stage.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::benchmark::{generate_benchmark, Benchmark, BenchmarkSpec, JitterSpec};
use super::metrics::{
    accuracy_at_1, average_precision, mean_average_precision, Annotation, AnnotationFile,
};
use crate::build::{build_artifacts, BuildConfig, BuildStats};
use crate::engine::{Engine, MemorySource};
use crate::error::{Error, Result};
use crate::features::PreprocessConfig;
use crate::geometry::{iou, Rect};
use crate::index::{IndexParams, PatchRef};
use crate::model::{l2_normalize, ImageRecord};
use crate::proposals::ProposalConfig;
use crate::voting::Retrieval;

pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Retrievals of the query image overlapping the query this much are the
/// query itself and are dropped before scoring.
pub const SELF_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tiny,
    Small,
    Scaling,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "scaling" => Ok(Preset::Scaling),
            _ => Err(Error::InvalidArgument(format!(
                "unknown preset {s:?} (tiny, small, scaling)"
            ))),
        }
    }
}

/// Build settings shared by the benchmark presets.
pub fn bench_build_config(seed: u64) -> BuildConfig {
    BuildConfig {
        descriptor_dim: 48,
        preprocess: PreprocessConfig::default(),
        proposals: ProposalConfig {
            k_e: 64,
            selection_iters: 8,
            sample_cap: 4000,
            ..ProposalConfig::default()
        },
        index: IndexParams {
            kmeans_iters: 12,
            max_train_points: 40_000,
            ..IndexParams::desk()
        },
        seed,
        ..BuildConfig::default()
    }
}

pub fn preset_spec(preset: Preset, seed: u64) -> BenchmarkSpec {
    match preset {
        Preset::Small => BenchmarkSpec {
            seed,
            ..BenchmarkSpec::default()
        },
        Preset::Tiny => BenchmarkSpec {
            seed,
            num_images: 40,
            image_size: (160, 160),
            num_motifs: 2,
            instances_per_motif: 5,
            scale_range: (40.0, 64.0),
            style_jitter: JitterSpec::default(),
            num_distractors: 20,
        },
        Preset::Scaling => BenchmarkSpec {
            seed,
            num_images: 60,
            num_motifs: 2,
            instances_per_motif: 5,
            num_distractors: 40,
            ..BenchmarkSpec::default()
        },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageScores {
    /// mAP at each of [`IOU_THRESHOLDS`].
    pub map: [f64; 3],
    pub accuracy_at_1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub full: StageScores,
    pub single_pass: StageScores,
    pub no_voting: StageScores,
    pub random: StageScores,
    pub mean_query_ms: f64,
    pub max_candidates: usize,
}

/// One query's rankings after dropping the query itself.
fn without_self(ranked: &[Retrieval], query: &Annotation) -> Vec<Retrieval> {
    ranked
        .iter()
        .filter(|r| !(r.image_id == query.image_id && iou(&r.rect, &query.rect) >= SELF_IOU))
        .copied()
        .collect()
}

fn label_of(r: Option<&Retrieval>, ann: &[Annotation]) -> Option<u32> {
    let r = r?;
    ann.iter()
        .filter(|a| a.image_id == r.image_id)
        .map(|a| (iou(&a.rect, &r.rect), a.class_id))
        .filter(|(o, _)| *o >= IOU_THRESHOLDS[0])
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|x| x.1)
}

#[derive(Default)]
struct StageAccumulator {
    ap: [BTreeMap<u32, Vec<f64>>; 3],
    top1: Vec<(u32, Option<u32>)>,
}

impl StageAccumulator {
    fn add(&mut self, query: &Annotation, ranked: &[Retrieval], all: &[Annotation]) {
        let ranked = without_self(ranked, query);
        let gts: Vec<Annotation> = all
            .iter()
            .filter(|a| a.class_id == query.class_id && *a != query)
            .copied()
            .collect();
        for (t, thr) in IOU_THRESHOLDS.iter().enumerate() {
            if let Some(ap) = average_precision(&ranked, &gts, *thr) {
                self.ap[t].entry(query.class_id).or_default().push(ap);
            }
        }
        self.top1
            .push((query.class_id, label_of(ranked.first(), all)));
    }

    fn scores(&self) -> StageScores {
        StageScores {
            map: std::array::from_fn(|t| mean_average_precision(&self.ap[t])),
            accuracy_at_1: accuracy_at_1(&self.top1),
        }
    }
}

/// Uniformly random image order with random boxes of the query size.
fn random_ranking(engine: &Engine, query: &Annotation, rng: &mut ChaCha8Rng) -> Vec<Retrieval> {
    let mut ids: Vec<&ImageRecord> = engine.manifest.images.iter().collect();
    ids.shuffle(rng);
    ids.iter()
        .enumerate()
        .filter_map(|(i, rec)| {
            let w = query.rect.w().min(rec.width as f64);
            let h = query.rect.h().min(rec.height as f64);
            let x = rng.random_range(0.0..=(rec.width as f64 - w));
            let y = rng.random_range(0.0..=(rec.height as f64 - h));
            Some(Retrieval {
                image_id: rec.id,
                rect: Rect::new(x, y, w, h).ok()?,
                score: 1.0 / (i + 1) as f64,
            })
        })
        .collect()
}

/// Queries with every annotation and scores the three retrieval stages plus
/// a random ranking.
pub fn evaluate(
    engine: &Engine,
    annotations: &AnnotationFile,
    seed: u64,
    progress: &dyn Fn(&str),
) -> Result<EvalReport> {
    let all = &annotations.annotations;
    let mut full = StageAccumulator::default();
    let mut single = StageAccumulator::default();
    let mut plain = StageAccumulator::default();
    let mut random = StageAccumulator::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbad5eed);
    let mut total_ms = 0.0;
    let mut max_candidates = 0;
    let k = engine.manifest.n();
    for (i, q) in all.iter().enumerate() {
        let out = engine.retrieve(q.image_id, &q.rect, k)?;
        total_ms += out.timing.total_ms;
        max_candidates = max_candidates.max(out.candidates_considered);
        full.add(q, &out.full, all);
        single.add(q, &out.single_pass, all);
        plain.add(q, &out.no_voting, all);
        random.add(q, &random_ranking(engine, q, &mut rng), all);
        if (i + 1) % 10 == 0 {
            progress(&format!("queried {} / {}", i + 1, all.len()));
        }
    }
    Ok(EvalReport {
        queries: all.len(),
        full: full.scores(),
        single_pass: single.scores(),
        no_voting: plain.scores(),
        random: random.scores(),
        mean_query_ms: if all.is_empty() {
            0.0
        } else {
            total_ms / all.len() as f64
        },
        max_candidates,
    })
}

/// An in-memory engine over a generated benchmark.
pub fn build_benchmark_engine(
    bench: &Benchmark,
    cfg: &BuildConfig,
    progress: &dyn Fn(&str),
) -> Result<(Engine, BuildStats)> {
    let source = Arc::new(MemorySource {
        images: bench.images.clone(),
    });
    let art = build_artifacts(cfg, bench.manifest.clone(), source.clone(), progress)?;
    let stats = art.stats.clone();
    Ok((art.into_engine(cfg, source), stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub spec: BenchmarkSpec,
    pub build: BuildStats,
    pub eval: EvalReport,
    pub seconds: f64,
}

pub fn run_benchmark(
    spec: &BenchmarkSpec,
    cfg: &BuildConfig,
    progress: &dyn Fn(&str),
) -> Result<BenchRun> {
    let start = Instant::now();
    let bench = generate_benchmark(spec)?;
    let (engine, build) = build_benchmark_engine(&bench, cfg, progress)?;
    let eval = evaluate(&engine, &bench.annotations, spec.seed, progress)?;
    Ok(BenchRun {
        spec: spec.clone(),
        build,
        eval,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub images: usize,
    pub entries: usize,
    pub mean_query_ms: f64,
    pub max_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    /// Latency at the largest size over latency at the smallest.
    pub ratio: f64,
}

/// Pads an engine with descriptor-only images until it holds `target`
/// images. Each padding image gets `entries_per_image` perturbed copies of
/// real indexed descriptors at random patch positions.
pub fn pad_with_synthetic_images(
    engine: &mut Engine,
    target: usize,
    entries_per_image: usize,
    seed: u64,
) -> Result<()> {
    let dim = engine.index.dim();
    let mut pool = Vec::new();
    for l in 0..engine.index.n_list() {
        for pos in 0..engine.index.list_len(l) {
            pool.push((l as u32, pos as u32));
        }
    }
    if pool.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let (w, h) = engine
        .manifest
        .images
        .first()
        .map(|r| (r.width, r.height))
        .unwrap_or((256, 256));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1e);
    let mut next = engine.manifest.n() as u32;
    const BATCH: usize = 256;
    while engine.manifest.n() < target {
        let count = (target - engine.manifest.n()).min(BATCH);
        let mut refs = Vec::with_capacity(count * entries_per_image);
        let mut vecs = Vec::with_capacity(count * entries_per_image * dim);
        for _ in 0..count {
            let id = next;
            next += 1;
            engine.manifest.images.push(ImageRecord {
                id,
                path: format!("synthetic/{id}"),
                width: w,
                height: h,
            });
            for p in 0..entries_per_image {
                let (l, pos) = pool[rng.random_range(0..pool.len())];
                let mut v = engine.index.reconstruct(l, pos);
                for x in v.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *x += (0.15 * n) as f32 / (dim as f32).sqrt();
                }
                l2_normalize(&mut v);
                let side = rng.random_range(20.0..(w.min(h) as f64 / 2.0));
                let x = rng.random_range(0.0..(w as f64 - side));
                let y = rng.random_range(0.0..(h as f64 - side));
                refs.push(PatchRef::new(id, p as u32, &Rect::square(x, y, side)?, 0));
                vecs.extend_from_slice(&v);
            }
        }
        engine.index.add(&refs, &vecs)?;
    }
    Ok(())
}

/// Mean query latency over the planted instances at each collection size.
pub fn run_scaling(
    spec: &BenchmarkSpec,
    cfg: &BuildConfig,
    sizes: &[usize],
    entries_per_image: usize,
    progress: &dyn Fn(&str),
) -> Result<ScalingReport> {
    let bench = generate_benchmark(spec)?;
    let (mut engine, _) = build_benchmark_engine(&bench, cfg, progress)?;
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    let queries = &bench.annotations.annotations;
    let mut points = Vec::new();
    for &n in &sorted {
        pad_with_synthetic_images(&mut engine, n, entries_per_image, spec.seed)?;
        progress(&format!(
            "{} images, {} entries",
            engine.manifest.n(),
            engine.index.len()
        ));
        // one untimed warm-up query
        if let Some(q) = queries.first() {
            engine.retrieve(q.image_id, &q.rect, 10)?;
        }
        let mut total = 0.0;
        let mut max_candidates = 0;
        for q in queries {
            let out = engine.retrieve(q.image_id, &q.rect, 10)?;
            total += out.timing.total_ms;
            max_candidates = max_candidates.max(out.candidates_considered);
        }
        points.push(ScalingPoint {
            images: engine.manifest.n(),
            entries: engine.index.len(),
            mean_query_ms: total / queries.len().max(1) as f64,
            max_candidates,
        });
    }
    let ratio = match (points.first(), points.last()) {
        (Some(a), Some(b)) if a.mean_query_ms > 0.0 => b.mean_query_ms / a.mean_query_ms,
        _ => 1.0,
    };
    Ok(ScalingReport { points, ratio })
}

fn row(name: &str, s: &StageScores) -> String {
    format!(
        "{name:<18} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
        s.map[0], s.map[1], s.map[2], s.accuracy_at_1
    )
}

/// Plain-text mAP table of an evaluation.
pub fn format_eval(e: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>8} {:>8} {:>8} {:>8}\n",
        "stage", "IoU@0.3", "IoU@0.5", "IoU@0.7", "acc@1"
    ));
    for (name, s) in [
        ("random", &e.random),
        ("no voting", &e.no_voting),
        ("voting", &e.single_pass),
        ("voting + expansion", &e.full),
    ] {
        out.push_str(&row(name, s));
        out.push('\n');
    }
    out.push_str(&format!(
        "queries {}  mean query {:.1} ms  max candidates {}\n",
        e.queries, e.mean_query_ms, e.max_candidates
    ));
    out
}

/// [`format_eval`] plus build statistics of a benchmark run.
pub fn format_report(run: &BenchRun) -> String {
    let mut out = format_eval(&run.eval);
    out.push_str(&format!(
        "images {}  entries {}  build {:.1} s  total {:.1} s\n",
        run.build.images, run.build.entries, run.build.seconds, run.seconds
    ));
    out
}

pub fn format_scaling(r: &ScalingReport) -> String {
    let mut out = format!(
        "{:>8} {:>10} {:>14} {:>12}\n",
        "images", "entries", "mean query ms", "candidates"
    );
    for p in &r.points {
        out.push_str(&format!(
            "{:>8} {:>10} {:>14.1} {:>12}\n",
            p.images, p.entries, p.mean_query_ms, p.max_candidates
        ));
    }
    out.push_str(&format!("latency ratio largest/smallest: {:.3}\n", r.ratio));
    out
}
