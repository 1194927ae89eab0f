mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use malbyte::ingest::UnknownBytePolicy;
use malbyte::models::Architecture;
use malbyte::resample::Interpolation;
use malbyte::sampling::{ClassDraw, SamplerMode};
use malbyte::train_eval::Precision;

use crate::config::RunConfig;

/// Malware family classification from raw file bytes.
#[derive(Debug, Parser)]
#[command(name = "malbyte", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Resample every sample file into the sequence cache.
    Preprocess(PreprocessArgs),
    /// Per-class counts and file-size histogram of a labeled corpus.
    Stats(StatsArgs),
    /// Stratified k-fold cross-validation with pooled out-of-fold metrics.
    Cv(CvArgs),
    /// Train a final model on a 90/10 split, keeping the best epoch.
    Train(TrainArgs),
    /// Classify files with a trained model.
    Predict(PredictArgs),
    /// Write a resampled sample as a greyscale PGM image.
    Visualize(VisualizeArgs),
    /// Write a probability submission file for every sample in a directory.
    ExportSubmission(ExportArgs),
}

#[derive(Debug, Args, Default)]
struct DataArgs {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_interp)]
    interpolation: Option<Interpolation>,
    #[arg(long, value_parser = parse_policy)]
    unknown_bytes: Option<UnknownBytePolicy>,
}

#[derive(Debug, Args, Default)]
struct ModelArgs {
    #[arg(long, value_parser = parse_arch)]
    architecture: Option<Architecture>,
    /// Weight initialisation seed.
    #[arg(long)]
    model_seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
struct TrainingArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse_sampler)]
    sampler: Option<SamplerMode>,
    #[arg(long, value_parser = parse_draw)]
    class_draw: Option<ClassDraw>,
    /// Batch order and dropout seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Histogram bucket width in KiB.
    #[arg(long, default_value_t = 100)]
    bucket_kb: usize,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainingArgs,
    #[arg(long)]
    folds: Option<usize>,
    /// Stratified fraction of the corpus to use.
    #[arg(long)]
    subsample: Option<f64>,
    /// All three architectures under both samplers, plus a comparison table.
    #[arg(long)]
    compare: bool,
    /// Train folds one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainingArgs,
    #[arg(long)]
    subsample: Option<f64>,
    /// Output weight file.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Weight file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prediction rows (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a submission file.
    #[arg(long)]
    submission: Option<PathBuf>,
    #[arg(long, value_parser = parse_interp)]
    interpolation: Option<Interpolation>,
    #[arg(long, value_parser = parse_policy)]
    unknown_bytes: Option<UnknownBytePolicy>,
    /// Sample files or directories of them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    input: PathBuf,
    #[arg(long, default_value_t = 100)]
    width: usize,
    /// Output image (default: `<id>.pgm`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    input_len: Option<usize>,
    #[arg(long, value_parser = parse_interp)]
    interpolation: Option<Interpolation>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse().map_err(|e: malbyte::Error| e.to_string())
}

fn parse_sampler(s: &str) -> Result<SamplerMode, String> {
    s.parse().map_err(|e: malbyte::Error| e.to_string())
}

fn parse_interp(s: &str) -> Result<Interpolation, String> {
    s.parse().map_err(|e: malbyte::Error| e.to_string())
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: malbyte::Error| e.to_string())
}

fn parse_policy(s: &str) -> Result<UnknownBytePolicy, String> {
    match s {
        "zero" => Ok(UnknownBytePolicy::Zero),
        "drop" => Ok(UnknownBytePolicy::Drop),
        _ => Err(format!("unknown policy `{s}` (expected zero or drop)")),
    }
}

fn parse_draw(s: &str) -> Result<ClassDraw, String> {
    match s {
        "per_slot" | "per-slot" => Ok(ClassDraw::PerSlot),
        "quota" => Ok(ClassDraw::Quota),
        _ => Err(format!("unknown class draw `{s}` (expected per_slot or quota)")),
    }
}

impl DataArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.paths.data_dir, &self.data_dir);
        set(&mut c.paths.labels, &self.labels);
        set(&mut c.paths.cache_dir, &self.cache_dir);
        if let Some(v) = self.interpolation {
            c.preprocess.interpolation = v;
        }
        if let Some(v) = self.unknown_bytes {
            c.preprocess.unknown_bytes = v;
        }
    }
}

impl ModelArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(a) = self.architecture {
            c.model.architecture = a;
        }
        if let Some(s) = self.model_seed {
            c.model.seed = s;
        }
    }
}

impl TrainingArgs {
    fn apply(&self, c: &mut RunConfig) {
        let t = &mut c.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.sampler {
            t.sampler = v;
        }
        if let Some(v) = self.class_draw {
            t.class_draw = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.precision {
            t.precision = v;
        }
        if let Some(v) = self.learning_rate {
            t.adam.learning_rate = v;
        }
        set(&mut c.paths.output_dir, &self.output_dir);
    }
}

fn set<T: Clone>(slot: &mut Option<T>, value: &Option<T>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), commands::Failure> {
    use commands::Failure;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.into()))?;
    }
    match cli.command {
        Command::Preprocess(a) => {
            a.data.apply(&mut cfg);
            commands::preprocess(&cfg)
        }
        Command::Stats(a) => {
            a.data.apply(&mut cfg);
            set(&mut cfg.paths.output_dir, &a.output_dir);
            commands::stats(&cfg, a.bucket_kb)
        }
        Command::Cv(a) => {
            a.data.apply(&mut cfg);
            a.model.apply(&mut cfg);
            a.train.apply(&mut cfg);
            if let Some(f) = a.folds {
                cfg.cv.folds = f;
            }
            if let Some(s) = a.subsample {
                cfg.cv.subsample = s;
            }
            cfg.cv.compare |= a.compare;
            if a.sequential {
                cfg.cv.parallel_folds = false;
            }
            commands::cross_validate(&cfg)
        }
        Command::Train(a) => {
            a.data.apply(&mut cfg);
            a.model.apply(&mut cfg);
            a.train.apply(&mut cfg);
            if let Some(s) = a.subsample {
                cfg.cv.subsample = s;
            }
            set(&mut cfg.paths.model, &a.model_out);
            commands::train(&cfg)
        }
        Command::Predict(a) => {
            set(&mut cfg.paths.model, &a.model);
            if let Some(v) = a.interpolation {
                cfg.preprocess.interpolation = v;
            }
            if let Some(v) = a.unknown_bytes {
                cfg.preprocess.unknown_bytes = v;
            }
            commands::predict(&cfg, &a.inputs, a.out.as_deref(), a.submission.as_deref())
        }
        Command::Visualize(a) => {
            if let Some(v) = a.interpolation {
                cfg.preprocess.interpolation = v;
            }
            if let Some(n) = a.input_len {
                cfg.model.input_len = Some(n);
            }
            commands::visualize(&cfg, &a.input, a.width, a.out.as_deref())
        }
        Command::ExportSubmission(a) => {
            set(&mut cfg.paths.model, &a.model);
            set(&mut cfg.paths.data_dir, &a.data_dir);
            commands::export_submission(&cfg, &a.out)
        }
    }
}
