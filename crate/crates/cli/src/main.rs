mod commands;
mod predictor;
mod report;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Adversarial watermarking of contrastive-learning encoders.
///
/// Exit status: 0 success or verified, 1 not verified, 2 usage or
/// configuration error, 3 numerical failure during a run.
#[derive(Parser)]
#[command(name = "awenc", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args, Clone)]
pub struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `output_dir` from the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    White,
    Black,
}

#[derive(Subcommand)]
enum Cmd {
    /// Phase I: contrastive pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Phases II and III: generate the adversarial watermark and embed it.
    Watermark {
        #[command(flatten)]
        common: Common,
        /// Pretrained encoder; its head is read from `head.awck` beside it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check a suspicious encoder or downstream classifier for the watermark.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "white")]
        mode: ModeArg,
        /// Encoder checkpoint (white box, or black box with --probe).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        watermark: Option<PathBuf>,
        /// Linear probe on top of --checkpoint (black box).
        #[arg(long)]
        probe: Option<PathBuf>,
        /// External label predictor command (black box).
        #[arg(long, conflicts_with = "probe")]
        predictor: Option<String>,
        /// Decision threshold; otherwise taken from the config or the run's
        /// calibrated thresholds.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the configured removal attacks on the clean and marked encoders.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Marked encoder under attack.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Clean encoder for the comparison columns.
        #[arg(long)]
        clean: Option<PathBuf>,
        #[arg(long)]
        watermark: Option<PathBuf>,
    },
    /// Summarise one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write the summary; defaults to the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label images read from stdin, one per line, with an encoder and probe.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        probe: PathBuf,
    },
}

pub enum Outcome {
    Done,
    Verdict(bool),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<awenc_core::Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("AWENC_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("AWENC_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("AWENC_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Cmd::Pretrain { common } => commands::pretrain(&common),
        Cmd::Watermark { common, checkpoint } => commands::watermark(&common, checkpoint),
        Cmd::Verify {
            common,
            mode,
            checkpoint,
            watermark,
            probe,
            predictor,
            threshold,
        } => commands::verify(
            &common,
            mode,
            commands::VerifyInputs {
                checkpoint,
                watermark,
                probe,
                predictor,
                threshold,
            },
        ),
        Cmd::Attack {
            common,
            checkpoint,
            clean,
            watermark,
        } => commands::attack(&common, checkpoint, clean, watermark),
        Cmd::Report { runs, out } => report::report(&runs, out),
        Cmd::Predict { checkpoint, probe } => commands::predict(&checkpoint, &probe),
    });
    match result {
        Ok(Outcome::Done) | Ok(Outcome::Verdict(true)) => ExitCode::SUCCESS,
        Ok(Outcome::Verdict(false)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
