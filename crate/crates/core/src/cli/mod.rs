//! `camforge` command line: explain, profile, compare, train, bench,
//! dataset and demo.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use camforge::cam::Method;
use camforge::Error;
use clap::{Args, Parser, Subcommand};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_FILE: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_TRAINING: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "camforge", version, about = "Class activation maps for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Heatmap overlay, raw map and report for one method.
    Explain(ExplainArgs),
    /// Per-block peak Grad-CAM magnitude chart and CSV.
    Profile(ProfileArgs),
    /// All five methods side by side, scored against `--bbox` if given.
    Compare(CompareArgs),
    /// Train the reference network on the synthetic task.
    Train(TrainArgs),
    /// Train, then score every method on held-out synthetic scenes.
    Bench(TrainArgs),
    /// Export a synthetic dataset as PNGs plus an index.
    Dataset(DatasetArgs),
    /// Write an untrained reference model and one synthetic scene.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Weights file (CWGT).
    #[arg(long)]
    weights: PathBuf,
    /// 8-bit grayscale or RGB PNG.
    #[arg(long)]
    image: PathBuf,
    /// `predicted`, a class index, or a class label.
    #[arg(long = "class", default_value = "predicted")]
    class: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "combicam")]
    method: Method,
    /// `all-blocks`, `last`, or comma-separated block ids. Defaults to
    /// `all-blocks`, or `last` for single-layer methods.
    #[arg(long)]
    layers: Option<String>,
    /// Heatmap opacity in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Rescale each layer's map to [0, 1] before the Combi-CAM sum.
    #[arg(long)]
    per_layer_normalize: bool,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Layer set for the multi-layer methods; single-layer methods use the
    /// last block unless this names exactly one block.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    per_layer_normalize: bool,
    /// Pattern box `top,left,h,w` in input pixels.
    #[arg(long)]
    bbox: Option<BBoxArg>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    count: usize,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct BBoxArg(camforge::bench::BBox);

impl std::str::FromStr for BBoxArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| format!("'{p}' is not a pixel count")))
            .collect::<Result<_, _>>()?;
        match v[..] {
            [top, left, height, width] if height > 0 && width > 0 => {
                Ok(BBoxArg(camforge::bench::BBox { top, left, height, width }))
            }
            _ => Err("expected top,left,h,w with positive h and w".into()),
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }

    fn file(context: impl fmt::Display, err: Error) -> Self {
        CliError { code: EXIT_FILE, message: format!("{context}: {err}") }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Io { .. } | Error::Parse { .. } | Error::Bounds(_) | Error::Image(_) => EXIT_FILE,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Training { .. } => EXIT_TRAINING,
            _ => EXIT_USAGE,
        };
        CliError { code, message: err.to_string() }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("CAMFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("CAMFORGE_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("CAMFORGE_THREADS: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let (out, files) = match cli.command {
        Command::Explain(a) => (a.model.out.clone(), commands::explain(&a)?),
        Command::Profile(a) => (a.model.out.clone(), commands::profile(&a)?),
        Command::Compare(a) => (a.model.out.clone(), commands::compare(&a)?),
        Command::Train(a) => (a.out.clone(), commands::train(&a, false)?),
        Command::Bench(a) => (a.out.clone(), commands::train(&a, true)?),
        Command::Dataset(a) => (a.out.clone(), commands::dataset(&a)?),
        Command::Demo(a) => (a.out.clone(), commands::demo(&a)?),
    };
    commands::write_outputs(&out, &files)
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("camforge: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
