//! `sentinel` — train a small CNN, fit the Mahalanobis-score detector,
//! craft adversarial examples, and report detection metrics.
//!
//! Exit codes: 0 success, 1 metric-floor failure, 2 usage/config error,
//! 3 runtime/numeric error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sentinel_cli::{commands, config::RunConfig, CliError};

#[derive(Parser)]
#[command(name = "sentinel", version, about = "abnormal-input detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Treat undecodable files and empty class directories as errors.
    #[arg(long)]
    strict: bool,
}

impl Common {
    /// Flags take precedence over config keys, which cover the defaults.
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if self.strict {
            config.strict = true;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier and write checkpoint.ckpt + history.json.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Fit Gaussian statistics, the layer ensemble, and the threshold.
    FitDetector {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to fit against (default: <out>/checkpoint.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Craft adversarial batches and the budget-sweep contact sheet.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Restrict to one attack: fgsm, bim, deepfool, cw.
        #[arg(long)]
        kind: Option<String>,
        /// Override the L-infinity budget of the selected attack.
        #[arg(long)]
        eps: Option<f32>,
        /// Override the step / iteration count of the selected attack.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the test split against every abnormality source and write
    /// report.json / report.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Detector artifact (default: <out>/detector.det).
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// Re-render a report.json as CSV.
    Report {
        /// Path to an existing report.json.
        #[arg(long)]
        json: PathBuf,
        /// Where to write the CSV (stdout only when omitted).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate a synthetic dataset as a directory-per-class PPM tree.
    SynthData {
        /// Images per class.
        #[arg(long)]
        n: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 125)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generate the shifted-distribution variant.
        #[arg(long)]
        ood: bool,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    let cwd = Path::new(".");
    match cli.command {
        Command::Train { common } => {
            let config = common.load()?;
            commands::cmd_train(&config, cwd)?;
        }
        Command::FitDetector { common, checkpoint } => {
            let config = common.load()?;
            commands::cmd_fit_detector(&config, cwd, checkpoint.as_deref())?;
        }
        Command::Attack { common, kind, eps, steps, checkpoint } => {
            let config = common.load()?;
            commands::cmd_attack(
                &config,
                cwd,
                kind.as_deref(),
                eps,
                steps,
                checkpoint.as_deref(),
            )?;
        }
        Command::Evaluate { common, checkpoint, detector } => {
            let config = common.load()?;
            commands::cmd_evaluate(&config, cwd, checkpoint.as_deref(), detector.as_deref())?;
        }
        Command::Report { json, csv } => {
            let table = commands::cmd_report(&json, csv.as_deref())?;
            print!("{table}");
        }
        Command::SynthData { n, size, seed, ood, out } => {
            commands::cmd_synth_data(n, size, seed, ood, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
