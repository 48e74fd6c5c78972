use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use midi_vae_cli::commands;
use midi_vae_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "midi-vae",
    about = "Multi-track MIDI autoencoder: dataset preparation, training, style transfer and evaluation",
    version
)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, default_value = "midi-vae.conf")]
    config: PathBuf,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-style toy corpus under the dataset root.
    MakeToy,
    /// Parse and encode every `<root>/<style>/*.mid` into the dataset cache.
    Prepare,
    /// Train a model on the cached dataset and write a checkpoint.
    Train,
    /// Reconstruction metrics, style classifiers and transfer reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Re-style one MIDI file from a source style to a target style.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decode a latent interpolation from the end of song A to the start of song B.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_a: PathBuf,
        #[arg(long)]
        input_b: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Join two songs with latent-interpolated bridge bars.
    Medley {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_a: PathBuf,
        #[arg(long)]
        input_b: PathBuf,
        #[arg(long, default_value_t = 4)]
        bridge_bars: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Bar-wise latent blend of two songs at a fixed weight.
    Mix {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_a: PathBuf,
        #[arg(long)]
        input_b: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sweep each latent dimension and correlate with bar-level metrics.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Export per-bar latent vectors as comma-separated text.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = if cli.config.exists() {
        RunConfig::load(&cli.config)?
    } else {
        RunConfig::default()
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.hp.seed = seed;
        config.classifier.seed = seed ^ 0xc1a5;
        config.toy.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::MakeToy => {
            commands::cmd_make_toy(&load_config(cli)?)?;
        }
        Command::Prepare => {
            commands::cmd_prepare(&load_config(cli)?)?;
        }
        Command::Train => {
            commands::cmd_train(&load_config(cli)?)?;
        }
        Command::Eval { checkpoint } => {
            commands::cmd_eval(&load_config(cli)?, checkpoint)?;
        }
        Command::Transfer {
            checkpoint,
            input,
            source,
            target,
            output,
        } => {
            commands::cmd_transfer(checkpoint, input, source, target, output)?;
        }
        Command::Interpolate {
            checkpoint,
            input_a,
            input_b,
            steps,
            output,
        } => {
            commands::cmd_interpolate(checkpoint, input_a, input_b, *steps, output)?;
        }
        Command::Medley {
            checkpoint,
            input_a,
            input_b,
            bridge_bars,
            output,
        } => {
            commands::cmd_medley(checkpoint, input_a, input_b, *bridge_bars, output)?;
        }
        Command::Mix {
            checkpoint,
            input_a,
            input_b,
            alpha,
            output,
        } => {
            commands::cmd_mix(checkpoint, input_a, input_b, *alpha, output)?;
        }
        Command::Sweep { checkpoint, output } => {
            commands::cmd_sweep(&load_config(cli)?, checkpoint, output)?;
        }
        Command::ExportLatents { checkpoint, output } => {
            commands::cmd_export_latents(&load_config(cli)?, checkpoint, output)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
