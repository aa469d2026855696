//! Implementations of the CLI subcommands.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use motif_search::build::build_manifest_to_dir;
use motif_search::build::BuildStats;
use motif_search::eval::harness::{
    bench_build_config, format_eval, format_report, format_scaling, preset_spec,
};
use motif_search::eval::{
    evaluate, generate_benchmark, run_benchmark, run_scaling, AnnotationFile, Preset,
};
use motif_search::{build_to_dir, load_engine, BuildConfig, BuildOutcome, DirSource, Engine};

use crate::server::{answer, router, QueryRequest};

/// Collection sizes measured by the scaling preset.
pub const SCALING_SIZES: [usize; 2] = [5_000, 20_000];

/// Index entries per padding image in the scaling preset.
pub const SCALING_ENTRIES_PER_IMAGE: usize = 100;

/// Name of the marker file a running service keeps in its artifact directory.
pub const SERVE_LOCK: &str = "serve.lock";

fn progress(msg: &str) {
    eprintln!("{msg}");
}

/// Reads a build config from JSON, or the defaults when no file is given.
pub fn load_config(path: Option<&Path>) -> anyhow::Result<BuildConfig> {
    match path {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_slice(&bytes).map_err(motif_search::Error::from)?)
        }
        None => Ok(BuildConfig::default()),
    }
}

/// Held while a service is running on an artifact directory.
pub struct ServeLock(PathBuf);

impl ServeLock {
    pub fn acquire(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(SERVE_LOCK);
        let mut f = std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    anyhow::anyhow!(
                        "{} exists; another service is using this directory",
                        path.display()
                    )
                } else {
                    anyhow::Error::from(motif_search::Error::from(e))
                }
            })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(ServeLock(path))
    }
}

impl Drop for ServeLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn ensure_not_served(out: &Path) -> anyhow::Result<()> {
    if out.join(SERVE_LOCK).exists() {
        anyhow::bail!(motif_search::Error::InvalidArgument(format!(
            "{} is being served; stop the service before rebuilding",
            out.display()
        )));
    }
    Ok(())
}

pub fn describe(outcome: &BuildOutcome) -> String {
    match outcome {
        BuildOutcome::UpToDate => "up to date".into(),
        BuildOutcome::Built(BuildStats {
            images,
            entries,
            seconds,
            ..
        }) => {
            format!("built {images} images, {entries} entries in {seconds:.1} s")
        }
    }
}

pub fn build(cfg: &BuildConfig, out: &Path) -> anyhow::Result<BuildOutcome> {
    ensure_not_served(out)?;
    let outcome = build_to_dir(cfg, out, &progress)?;
    println!("{}", describe(&outcome));
    Ok(outcome)
}

/// Writes a synthetic benchmark (images plus annotations) and builds it.
pub fn build_benchmark_dir(preset: Preset, seed: u64, out: &Path) -> anyhow::Result<BuildOutcome> {
    ensure_not_served(out)?;
    let bench = generate_benchmark(&preset_spec(preset, seed))?;
    let data = out.join("images");
    bench.write_to_dir(&data)?;
    let cfg = BuildConfig {
        dataset_root: data.clone(),
        ..bench_build_config(seed)
    };
    let source = DirSource::new(&data);
    let manifest = source.scan(cfg.descriptor_dim)?;
    Ok(build_manifest_to_dir(
        &cfg,
        manifest,
        Arc::new(source),
        out,
        &progress,
    )?)
}

pub fn open_engine(artifacts: &Path, images: Option<&Path>) -> anyhow::Result<Engine> {
    let source = images.map(|p| Arc::new(DirSource::new(p)) as Arc<dyn motif_search::ImageSource>);
    Ok(load_engine(artifacts, source)?)
}

pub async fn serve(engine: Engine, artifacts: &Path, addr: SocketAddr) -> anyhow::Result<()> {
    let _lock = ServeLock::acquire(artifacts)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(motif_search::Error::from)?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(engine)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Ranked results of one query as JSON lines.
pub fn query(
    engine: &Engine,
    image_id: u32,
    rect: [f64; 4],
    k: usize,
) -> anyhow::Result<Vec<String>> {
    let resp = answer(engine, &QueryRequest { image_id, rect, k })?;
    resp.results
        .iter()
        .map(|r| Ok(serde_json::to_string(r)?))
        .collect()
}

pub fn bench(
    preset: Preset,
    seed: u64,
    entries_per_image: Option<usize>,
) -> anyhow::Result<String> {
    let spec = preset_spec(preset, seed);
    let cfg = bench_build_config(seed);
    match preset {
        Preset::Scaling => {
            let per_image = entries_per_image.unwrap_or(SCALING_ENTRIES_PER_IMAGE);
            let report = run_scaling(&spec, &cfg, &SCALING_SIZES, per_image, &progress)?;
            Ok(format_scaling(&report))
        }
        _ => Ok(format_report(&run_benchmark(&spec, &cfg, &progress)?)),
    }
}

pub fn eval(engine: &Engine, annotations: &Path, seed: u64) -> anyhow::Result<String> {
    let ann = AnnotationFile::load(annotations)?;
    Ok(format_eval(&evaluate(engine, &ann, seed, &progress)?))
}

/// Parses `x,y,w,h`.
pub fn parse_rect(s: &str) -> anyhow::Result<[f64; 4]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        anyhow::bail!(motif_search::Error::InvalidArgument(format!(
            "rect must be x,y,w,h, got {s:?}"
        )));
    }
    let mut out = [0.0; 4];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|_| {
            motif_search::Error::InvalidArgument(format!("rect component {p:?} is not a number"))
        })?;
    }
    Ok(out)
}
