//! `satslab`: dataset generation, protocol runs, ablation sweeps and plot data.

mod ablate;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use satslab::continual::{config_hash, run_dir_name, run_protocol, RunConfig, RunOptions, RunResult, PRESETS};
use satslab::data::{self, Dataset, SceneSpec};
use satslab::{Error, Result};

#[derive(Parser)]
#[command(name = "satslab", version, about = "Class-incremental segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigSource {
    /// Run configuration JSON.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Protocol preset: synth-4-1, synth-4-2 or synth-2-2.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(clap::Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing run directories.
    #[arg(long)]
    force: bool,
    /// Save a model snapshot after every stage.
    #[arg(long)]
    snapshots: bool,
    /// Share trained stage-0 models through this directory.
    #[arg(long)]
    stage0_cache: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        /// Scene spec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run a protocol for every seed.
    Run(RunArgs),
    /// Run an ablation grid derived from one config.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: ablate::Axis,
    },
    /// Aggregate per-stage all-class mIoU into a CSV.
    PlotData {
        /// Run directories, or directories containing them.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses JSON, naming the offending field on failure.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{}: at `{path}`: {}", what.display(), e.inner()))
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_config(src: &ConfigSource) -> Result<RunConfig> {
    let cfg = match (&src.config, &src.preset) {
        (Some(path), _) => parse_json::<RunConfig>(&read_text(path)?, path)?,
        (None, Some(name)) => RunConfig::preset(name).ok_or_else(|| {
            Error::Usage(format!("unknown preset {name}; choose one of {}", PRESETS.join(", ")))
        })?,
        (None, None) => return Err(Error::Usage("pass --config <file> or --preset <name>".into())),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn nonempty_dir(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    Ok(fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some())
}

fn cmd_generate(spec: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let spec: SceneSpec = match spec {
        Some(p) => parse_json(&read_text(p)?, p)?,
        None => SceneSpec::default(),
    };
    spec.validate()?;
    if nonempty_dir(out)? && !force {
        return Err(Error::Usage(format!(
            "{} is not empty (use --force to overwrite)",
            out.display()
        )));
    }
    let ds = data::generate(&spec)?;
    let m = data::io::save(&ds, out)?;
    println!(
        "{}: {} classes, {} train + {} eval images, digest {}",
        out.display(),
        m.class_count,
        m.train.len(),
        m.eval.len(),
        data::io::dataset_digest(&m)
    );
    Ok(())
}

/// Record of one `run` or `ablate` invocation.
#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a RunConfig,
    config_hash: String,
    seeds: &'a [u64],
    out_root: &'a Path,
    dataset: &'a Path,
    dataset_digest: String,
    run_dirs: Vec<String>,
}

fn write_manifest(cfg: &RunConfig, args: &RunArgs) -> Result<()> {
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let m = RunManifest {
        config: cfg,
        config_hash: config_hash(cfg),
        seeds: &args.seeds,
        out_root: &args.out,
        dataset: &args.data,
        dataset_digest: data::io::dataset_digest(&data::io::read_manifest(&args.data)?),
        run_dirs: args.seeds.iter().map(|&s| run_dir_name(s, cfg)).collect(),
    };
    let path = args.out.join(format!("manifest-{}.json", m.config_hash));
    fs::write(&path, serde_json::to_string_pretty(&m).unwrap()).map_err(|e| Error::io(&path, e))
}

/// Worker pool capped by `SATSLAB_THREADS`.
pub fn pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("SATSLAB_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("SATSLAB_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Internal(e.to_string()))
}

/// Runs every `(config, seed)` job on the pool; the first error wins.
pub fn run_jobs(jobs: &[(RunConfig, u64)], ds: &Dataset, opts: &RunOptions) -> Result<Vec<RunResult>> {
    use rayon::prelude::*;
    let results: Vec<Result<RunResult>> =
        pool()?.install(|| jobs.par_iter().map(|(cfg, seed)| run_protocol(cfg, ds, *seed, opts)).collect());
    results.into_iter().collect()
}

fn print_result(r: &RunResult) {
    let last = r.stages.last().expect("at least one stage");
    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} seed {} ({}): final mIoU all {} initial {} incremental {}",
        r.name,
        r.seed,
        run_dir_name_of(r),
        show(last.report.miou_all),
        show(last.report.miou_initial),
        show(last.report.miou_incremental)
    );
}

fn run_dir_name_of(r: &RunResult) -> String {
    format!("run-{}-{}", r.seed, r.config_hash)
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    let mut s = seeds.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != seeds.len() || seeds.is_empty() {
        return Err(Error::Usage(format!("seeds must be distinct and nonempty, got {seeds:?}")));
    }
    Ok(())
}

fn options(args: &RunArgs) -> RunOptions {
    RunOptions {
        out_root: Some(args.out.clone()),
        force: args.force,
        save_snapshots: args.snapshots,
        stage0_cache: args.stage0_cache.clone(),
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(&args.source)?;
    check_seeds(&args.seeds)?;
    let ds = data::io::load(&args.data)?;
    write_manifest(&cfg, args)?;
    let jobs: Vec<(RunConfig, u64)> = args.seeds.iter().map(|&s| (cfg.clone(), s)).collect();
    for r in run_jobs(&jobs, &ds, &options(args))? {
        print_result(&r);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out, force } => cmd_generate(spec.as_deref(), &out, force),
        Command::Run(args) => cmd_run(&args),
        Command::Ablate { run, axis } => ablate::cmd_ablate(&run, axis),
        Command::PlotData { runs, out } => plot::cmd_plot_data(&runs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
