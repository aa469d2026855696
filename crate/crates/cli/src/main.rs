use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use motif_search::eval::Preset;
use motif_search::features::FeatureSource;
use motif_search_cli::{commands, error_line, init_threads_from_env};

#[derive(Parser)]
#[command(
    name = "motif-search",
    version,
    about = "Style-invariant visual motif search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the search artifacts for a dataset directory.
    Build {
        /// Directory of png/jpeg images.
        #[arg(long, required_unless_present_any = ["synthetic", "config"])]
        dataset: Option<PathBuf>,
        /// Output artifact directory.
        #[arg(long)]
        out: PathBuf,
        /// JSON build config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        descriptor_dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_list: Option<usize>,
        #[arg(long)]
        n_probe: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        /// Use precomputed feature maps `<dir>/<id>.msfm` instead of the toy extractor.
        #[arg(long)]
        ingested: Option<PathBuf>,
        /// Generate the synthetic benchmark of this preset into `<out>/images` and build it.
        #[arg(long, conflicts_with = "dataset")]
        synthetic: Option<Preset>,
    },
    /// Serve the HTTP API over built artifacts.
    Serve {
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Image directory, when it moved since the build.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Run one query and print ranked results as JSON lines.
    Query {
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        image: u32,
        /// Query rectangle `x,y,w,h` in pixels.
        #[arg(long, allow_hyphen_values = true)]
        rect: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Generate the synthetic benchmark, build, evaluate and print the tables.
    Bench {
        #[arg(long, default_value = "small")]
        preset: Preset,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Index entries per padding image (scaling preset only).
        #[arg(long)]
        entries_per_image: Option<usize>,
    },
    /// Score an annotations file against built artifacts.
    Eval {
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Build {
            dataset,
            out,
            config,
            descriptor_dim,
            seed,
            n_list,
            n_probe,
            m,
            ingested,
            synthetic,
        } => {
            if let Some(preset) = synthetic {
                let outcome = commands::build_benchmark_dir(preset, seed.unwrap_or(7), &out)?;
                println!("{}", commands::describe(&outcome));
                return Ok(());
            }
            let mut cfg = commands::load_config(config.as_deref())?;
            if let Some(d) = dataset {
                cfg.dataset_root = d;
            }
            if let Some(d) = descriptor_dim {
                cfg.descriptor_dim = d;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = n_list {
                cfg.index.n_list = n;
            }
            if let Some(n) = n_probe {
                cfg.index.n_probe = n;
            }
            if m.is_some() {
                cfg.index.m = m;
            }
            if let Some(dir) = ingested {
                cfg.feature_source = FeatureSource::Ingested { dir };
            }
            commands::build(&cfg, &out)?;
        }
        Command::Serve {
            artifacts,
            addr,
            images,
        } => {
            let engine = commands::open_engine(&artifacts, images.as_deref())?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(commands::serve(engine, &artifacts, addr))?;
        }
        Command::Query {
            artifacts,
            image,
            rect,
            k,
            images,
        } => {
            let rect = commands::parse_rect(&rect)?;
            let engine = commands::open_engine(&artifacts, images.as_deref())?;
            for line in commands::query(&engine, image, rect, k)? {
                println!("{line}");
            }
        }
        Command::Bench {
            preset,
            seed,
            entries_per_image,
        } => {
            print!("{}", commands::bench(preset, seed, entries_per_image)?);
        }
        Command::Eval {
            artifacts,
            annotations,
            images,
            seed,
        } => {
            let engine = commands::open_engine(&artifacts, images.as_deref())?;
            print!("{}", commands::eval(&engine, &annotations, seed)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let msg: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!(
                "error: usage: {}",
                msg.join(" ").trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    if let Err(e) = init_threads_from_env() {
        eprintln!("{}", error_line(&e));
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
