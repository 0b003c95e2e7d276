//! Pipeline driver: gen-data, train, calibrate, eval, sweep over one
//! declarative run config. Exit status 0 on success, 1 on configuration
//! errors (bad config file, bad flags, fingerprint mismatches), 2 on
//! runtime or numeric failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use parrotgate_core::config::{ConfigError, RunConfig};
use parrotgate_core::eval::Split;
use parrotgate_core::pipeline::{
    paths, stage_calibrate, stage_eval, stage_gen_data, stage_train, sweep, PipelineError,
    SweepGrid,
};

#[derive(Parser)]
#[command(
    name = "parrotgate",
    version,
    about = "Detects generative parroting by overfitting a masked autoencoder \
             and thresholding reconstruction loss",
    after_help = "Flag overrides are applied before the config is fingerprinted, \
                  so a run that used --epochs must pass the same value to every \
                  later stage."
)]
struct Cli {
    /// Path to the run config JSON.
    #[arg(long, global = true, default_value = "run.json")]
    config: PathBuf,
    /// Override train.epochs from the config.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train/mod1/mod2/novel splits into the run directory.
    GenData,
    /// Overfit the autoencoder on the train split.
    Train {
        /// Continue from an existing checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the train split and write threshold.json.
    Calibrate {
        /// Checkpoint to calibrate (default: checkpoints/final.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Apply the threshold to dataset splits and write report files.
    Eval {
        /// Checkpoint to score with (default: checkpoints/final.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of train,mod1,mod2,novel.
        #[arg(long, value_delimiter = ',')]
        splits: Option<Vec<String>>,
        /// Also write per-split score histograms as SVG.
        #[arg(long)]
        plot: bool,
    },
    /// Full pipeline once per grid cell; lists multiply cartesian-style.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        p_mask: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        weight_decay: Vec<bool>,
        #[arg(long, value_delimiter = ',')]
        augmentation: Vec<bool>,
        /// Epoch counts for the grid (distinct from the global override).
        #[arg(long = "epochs-grid", value_delimiter = ',')]
        epochs_grid: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(classify(&err))
        }
    }
}

/// Configuration problems exit 1; anything that failed while computing
/// (numeric aborts, io, corrupt artifacts) exits 2.
fn classify(err: &PipelineError) -> u8 {
    match err {
        PipelineError::Config(_) | PipelineError::Fingerprint { .. } => 1,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(epochs) = cli.epochs {
        config.train.epochs = epochs;
    }
    config.validate()?;
    Ok(config)
}

fn parse_splits(names: &Option<Vec<String>>) -> Result<Vec<Split>, PipelineError> {
    let Some(names) = names else {
        return Ok(Split::ALL.to_vec());
    };
    names
        .iter()
        .map(|n| {
            Split::from_name(n).ok_or_else(|| {
                PipelineError::Config(ConfigError::Invalid(format!(
                    "unknown split {n:?}; expected train, mod1, mod2, or novel"
                )))
            })
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let config = load_config(&cli)?;
    let run = paths(&config);
    match &cli.command {
        Command::GenData => {
            let manifest = stage_gen_data(&config)?;
            for split in ["train", "mod1", "mod2", "novel"] {
                println!("{split}: {} images", manifest.entries_for(split).count());
            }
            println!("wrote {}", run.data_dir().display());
        }
        Command::Train { resume } => {
            let outcome = stage_train(&config, resume.as_deref())?;
            let final_loss = outcome.curve.entries.last().map_or(f64::NAN, |&(_, l)| l);
            println!(
                "trained {} epochs, final mean loss {final_loss:.6e}",
                outcome.epochs_completed
            );
            println!("wrote {}", run.final_checkpoint().display());
        }
        Command::Calibrate { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| run.final_checkpoint());
            let threshold = stage_calibrate(&config, &ckpt)?;
            println!(
                "tau = {:.6e} over {} train samples (K = {})",
                threshold.tau, threshold.n_samples, threshold.k
            );
            println!("wrote {}", run.threshold().display());
        }
        Command::Eval { checkpoint, splits, plot } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| run.final_checkpoint());
            let selected = parse_splits(splits)?;
            let report = stage_eval(&config, &ckpt, &selected, *plot)?;
            print!("{}", parrotgate_core::eval::render_markdown(std::slice::from_ref(&report)));
            println!("wrote {}", run.report("json").display());
        }
        Command::Sweep { p_mask, weight_decay, augmentation, epochs_grid } => {
            let grid = SweepGrid {
                p_mask: p_mask.clone(),
                weight_decay: weight_decay.clone(),
                augmentation: augmentation.clone(),
                epochs: epochs_grid.clone(),
            };
            let reports = sweep(&config, &grid)?;
            print!("{}", parrotgate_core::eval::render_markdown(&reports));
            println!("wrote {} ({} cells)", run.report("md").display(), reports.len());
        }
    }
    Ok(())
}
