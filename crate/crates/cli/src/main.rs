mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use acmt_core::AcmtError;
use clap::{Parser, Subcommand, ValueEnum};

/// MR/US modality translation toward a shared intermediate domain.
#[derive(Parser, Debug)]
#[command(name = "acmt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired phantom dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the translator on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Translate every MR and US image of a dataset.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        stochastic: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Deformably register a moving image to a fixed image.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// Output field (`.bin`, with a `.json` sidecar).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score translation or registration quality.
    Eval {
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Dataset directory (raw or translated).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Translation mode: compare every image of `--data` with every
        /// image of this dataset instead of MR against US.
        #[arg(long)]
        against: Option<PathBuf>,
        /// Registration mode, single pair: field file.
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        moving_mask: Option<PathBuf>,
        #[arg(long)]
        fixed_mask: Option<PathBuf>,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Translation,
    Registration,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<AcmtError>() {
        Some(AcmtError::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ACMT_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_failures_map_to_exit_3() {
        let nf = anyhow::Error::from(AcmtError::NonFinite {
            component: "texture".into(),
            detail: "nan".into(),
        })
        .context("training");
        assert_eq!(exit_code(&nf), 3);
        assert_eq!(exit_code(&anyhow::Error::from(AcmtError::Config("x".into()))), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 2);
    }
}
