//! Command-line front door: flag parsing, config resolution, exit-code
//! policy, and report printing. All heavy lifting lives in `cmdse-core`;
//! this binary only wires subcommands to it.
//!
//! Exit codes: 0 on success (including `--help`), 1 for usage and
//! validation problems caught before any compute, 2 for runtime failures.
//! Diagnostics go to stderr; results and reports go to stdout and are
//! byte-reproducible for identical inputs.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use cmdse_core::evalkit::{read_detections_jsonl, write_detections_jsonl};
use cmdse_core::matching::{hungarian, CostMatrix};
use cmdse_core::numcore::AdamW;
use cmdse_core::semantics::Vocabulary;
use cmdse_core::synthgen::{generate, Dataset, GeneratorSpec};
use cmdse_core::trainer::{
    ablate, evaluate_detections, infer, load_checkpoint, render_ablation_table, train,
    AblationAxis, Pipeline, RunConfig,
};

const SEED_ENV: &str = "CMDSE_SEED";

#[derive(Parser)]
#[command(
    name = "cmdse",
    version,
    about = "Open-vocabulary human-object interaction detection on synthetic scenes",
    after_help = "The CMDSE_SEED environment variable overrides the run-config seed \
                  for train and ablate."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as a directory
    GenData {
        /// Generator spec JSON; defaults cover every field
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Base seed for every derived stream
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, config, and logs
    Train {
        /// Run config JSON; omitted fields take the reference preset
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (overrides the config's data_dir)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (overrides the config's out_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to resume from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a trained checkpoint over a dataset's test split
    Infer {
        /// checkpoint.bin written by train (config.json must sit beside it)
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Detections output path (JSON lines)
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against a dataset's test annotations
    Eval {
        /// Detections JSON lines, as written by infer
        #[arg(long)]
        dets: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Also write the full report as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train every variant along one axis and print the comparison table
    Ablate {
        /// One of: levels, lambda_d, distance_type, prompts
        #[arg(long)]
        axis: String,
        /// Base run config JSON shared by all variants
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (overrides the config's data_dir)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (overrides the config's out_dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve one assignment problem from a JSON cost matrix (solver debug)
    Match {
        /// JSON array of rows, e.g. [[1.0, 2.0], [3.0, 0.5]]
        #[arg(long)]
        cost: PathBuf,
    },
}

enum CliError {
    /// Bad invocation or invalid configuration, caught before any compute.
    Usage(String),
    /// Failure while doing the actual work.
    Runtime(cmdse_core::Error),
}

impl From<cmdse_core::Error> for CliError {
    fn from(e: cmdse_core::Error) -> Self {
        Self::Runtime(e)
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let kind = e.kind();
            if kind == ErrorKind::DisplayHelp || kind == ErrorKind::DisplayVersion {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { spec, seed, out } => cmd_gen_data(spec.as_deref(), seed, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => cmd_train(config.as_deref(), data, out, resume.as_deref()),
        Command::Infer { ckpt, data, out } => cmd_infer(&ckpt, &data, &out),
        Command::Eval { dets, data, json } => cmd_eval(&dets, &data, json.as_deref()),
        Command::Ablate {
            axis,
            config,
            data,
            out,
        } => cmd_ablate(&axis, config.as_deref(), data, out),
        Command::Match { cost } => cmd_match(&cost),
    }
}

/// Load a run config (or take the defaults) and apply the seed override
/// from the environment. Everything here is validation, so failures are
/// usage errors.
fn resolve_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.seed = raw
            .parse::<u64>()
            .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}")))?;
    }
    Ok(cfg)
}

fn resolve_dir(
    flag: Option<PathBuf>,
    from_config: &Option<PathBuf>,
    what: &str,
    flag_name: &str,
    field: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| from_config.clone()).ok_or_else(|| {
        usage(format!(
            "no {what}: pass {flag_name} or set {field} in the config"
        ))
    })
}

fn cmd_gen_data(spec_path: Option<&Path>, seed: u64, out: &Path) -> Result<(), CliError> {
    let spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(usage)?;
            let spec: GeneratorSpec = serde_json::from_str(&text)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?;
            spec.validate().map_err(usage)?;
            spec
        }
        None => GeneratorSpec::default(),
    };
    let dataset = generate(&spec, &Vocabulary::builtin(), seed)?;
    dataset.export(out)?;
    println!(
        "wrote {} train and {} test scenes to {}",
        dataset.train.len(),
        dataset.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = resolve_config(config)?;
    let data_dir = resolve_dir(data, &cfg.data_dir, "dataset directory", "--data", "data_dir")?;
    let out_dir = resolve_dir(out, &cfg.out_dir, "output directory", "--out", "out_dir")?;
    let dataset = Dataset::import(&data_dir)?;
    let (_, outcome) = train(&cfg, &dataset, &out_dir, resume)?;
    if let Some(last) = outcome.reports.last() {
        println!(
            "trained {} steps; final loss {:.4}; level-distance agreement {:.4}",
            cfg.steps, last.total, outcome.agreement
        );
    }
    println!("checkpoint: {}", out_dir.join("checkpoint.bin").display());
    println!("log: {}", out_dir.join("log.jsonl").display());
    Ok(())
}

fn cmd_infer(ckpt: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let sidecar = ckpt
        .parent()
        .map(|d| d.join("config.json"))
        .filter(|p| p.exists())
        .ok_or_else(|| {
            usage(format!(
                "no config.json beside {}; point --ckpt at a checkpoint.bin written by train",
                ckpt.display()
            ))
        })?;
    let cfg = RunConfig::load(&sidecar)?;
    let dataset = Dataset::import(data)?;
    let mut pipe = Pipeline::for_dataset(cfg.clone(), &dataset)?;
    let mut opt = AdamW::new(cfg.lr, (0.9, 0.999), 1e-8, cfg.weight_decay);
    load_checkpoint(pipe.store_mut(), &mut opt, ckpt)?;
    let dets = infer(&pipe, &dataset.test)?;
    write_detections_jsonl(out, &dets)?;
    println!(
        "wrote {} detections across {} test images to {}",
        dets.len(),
        dataset.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(dets: &Path, data: &Path, json: Option<&Path>) -> Result<(), CliError> {
    let detections = read_detections_jsonl(dets)?;
    let dataset = Dataset::import(data)?;
    let report = evaluate_detections(&dataset, &detections)?;
    print!("{}", report.render_table());
    if let Some(path) = json {
        let body = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, body + "\n").map_err(cmdse_core::Error::from)?;
        println!("report json: {}", path.display());
    }
    Ok(())
}

fn cmd_ablate(
    axis: &str,
    config: Option<&Path>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let axis: AblationAxis = axis.parse().map_err(usage)?;
    let cfg = resolve_config(config)?;
    let data_dir = resolve_dir(data, &cfg.data_dir, "dataset directory", "--data", "data_dir")?;
    let out_dir = resolve_dir(out, &cfg.out_dir, "output directory", "--out", "out_dir")?;
    let dataset = Dataset::import(&data_dir)?;
    let rows = ablate(&cfg, &dataset, axis, &out_dir)?;
    print!("{}", render_ablation_table(axis, &rows));
    println!("artifacts: {}", out_dir.display());
    Ok(())
}

fn cmd_match(cost: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(cost).map_err(usage)?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
        .map_err(|e| usage(format!("{}: expected a JSON array of number rows: {e}", cost.display())))?;
    let matrix = CostMatrix::from_rows(rows).map_err(usage)?;
    let assignment = hungarian(&matrix).map_err(usage)?;
    for &(row, col) in &assignment.pairs {
        println!("row {row} -> col {col}  cost {:.6}", matrix.at(row, col));
    }
    println!("total {:.6}", assignment.total);
    Ok(())
}
