use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use oneclick_core::dataset::{load_dataset_dir, synthetic_corpus, write_dataset_dir, SyntheticSpec};
use oneclick_core::simulate::{simulate, sweep, ClickModel, SimulationParams, SweepParam, SweepTable};
use oneclick_core::{EngineConfig, GroundTruthImage, NoiseProfile, PruningMode};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "oneclick", version, about = "Batch simulation for click-guided annotation refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay synthetic annotators over a dataset and compare raw detector
    /// output with refined annotations.
    Simulate(SimulateArgs),
    /// Write a seeded synthetic dataset directory.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Pruning {
    Exhaustive,
    BestFirst,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Anchors,
    Depth,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Directory of native JSON and/or VOC XML ground truth.
    #[arg(long)]
    dataset: PathBuf,
    /// `exact` or `jitter:<sigma>`, sigma relative to sqrt(box area).
    #[arg(long, default_value = "exact")]
    clicks: ClickModel,
    /// Noise profile JSON. Noiseless when omitted.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Engine config JSON. Defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path. Printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the engine config's pruning mode.
    #[arg(long, value_enum)]
    pruning: Option<Pruning>,
    #[arg(long, value_enum, requires = "values")]
    sweep: Option<Sweep>,
    /// Comma-separated values for --sweep.
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    values: Vec<u32>,
    /// Record wall-clock milliseconds. Reports are then no longer
    /// byte-reproducible.
    #[arg(long)]
    timing: bool,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    min_objects: usize,
    #[arg(long, default_value_t = 12)]
    max_objects: usize,
    #[arg(long, default_value_t = 5)]
    classes: u32,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<Vec<GroundTruthImage>> {
    let data = load_dataset_dir(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if data.is_empty() {
        bail!("dataset {} contains no images", dir.display());
    }
    Ok(data)
}

fn write_report<T: Serialize>(report: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let noise: NoiseProfile = args.noise.as_deref().map(read_json).transpose()?.unwrap_or_default();
    let mut engine: EngineConfig = args.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    if let Some(p) = args.pruning {
        engine.pruning = match p {
            Pruning::Exhaustive => PruningMode::Exhaustive,
            Pruning::BestFirst => PruningMode::BestFirst,
        };
    }
    let params = SimulationParams::new(args.clicks, noise, engine, args.seed);

    let Some(kind) = args.sweep else {
        let start = Instant::now();
        let mut report = simulate(&dataset, &params)?;
        if args.timing {
            report.wall_ms = Some(start.elapsed().as_millis() as u64);
        }
        return write_report(&report, args.out.as_deref());
    };

    let param = match kind {
        Sweep::Anchors => SweepParam::Anchors,
        Sweep::Depth => SweepParam::Depth,
    };
    let table = if args.timing {
        let mut rows = Vec::with_capacity(args.values.len());
        for &v in &args.values {
            let start = Instant::now();
            let mut row = sweep(&dataset, param, &[v], &params)?.rows.remove(0);
            row.report.wall_ms = Some(start.elapsed().as_millis() as u64);
            rows.push(row);
        }
        SweepTable { param, rows }
    } else {
        sweep(&dataset, param, &args.values, &params)?
    };
    write_report(&table, args.out.as_deref())
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    if args.min_objects > args.max_objects {
        bail!("--min-objects must not exceed --max-objects");
    }
    if args.classes == 0 {
        bail!("--classes must be at least 1");
    }
    let spec = SyntheticSpec {
        images: args.images,
        min_objects: args.min_objects,
        max_objects: args.max_objects,
        classes: args.classes,
        ..SyntheticSpec::default()
    };
    let corpus = synthetic_corpus(&spec, args.seed);
    write_dataset_dir(&args.out, &corpus).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("wrote {} images to {}", corpus.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Generate(args) => run_generate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
