use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

/// Exit status 2: bad flags, configuration or input paths.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit status 1 after output was written for the clips that succeeded.
#[derive(Debug)]
pub struct PartialFailure(pub String);

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for PartialFailure {}

#[derive(Parser)]
#[command(name = "modattn", version, about = "Multimodal attention caption generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract normalized, stacked MFCC feature files from a directory of WAVs.
    #[command(after_long_help = config::FEATURES_HELP)]
    Features {
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Train a model and keep the checkpoint with the best validation loss.
    #[command(after_long_help = config::TRAIN_HELP)]
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoint.mmck, log.jsonl and config.json.
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        print_config: bool,
    },
    /// Caption every clip of a split with a trained checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
        /// Add per-word temporal (alpha) and modality (beta) weights.
        #[arg(long)]
        dump_attention: bool,
        #[arg(long, default_value = "test")]
        split: String,
        /// Write JSON lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a hypotheses file against the test split with BLEU1-4 and CIDEr-D.
    Evaluate {
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter of a tiny two-modality
    /// attention-fusion model. Exits 0 iff the max relative error is < 1e-4.
    Gradcheck {
        #[arg(long, default_value = "small")]
        dims: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Write the synthetic two-stream captioning task.
    #[command(after_long_help = config::SYNTH_HELP)]
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if let Some(modattn_core::Error::Config(_)) = e.downcast_ref::<modattn_core::Error>() {
        return 2;
    }
    if let Some(modattn_audio::AudioError::Config(_)) = e.downcast_ref::<modattn_audio::AudioError>() {
        return 2;
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Features { wav_dir, out_dir, config, print_config } => {
            commands::features(&wav_dir, &out_dir, config.as_deref(), print_config)
        }
        Command::Train { corpus, config, out, seed, print_config } => {
            commands::train(&corpus, config.as_deref(), &out, seed, print_config)
        }
        Command::Decode { checkpoint, corpus, beam, max_len, dump_attention, split, out } => commands::decode(
            &checkpoint,
            &corpus,
            &commands::DecodeOptions { beam, max_len, dump_attention, split },
            out.as_deref(),
        ),
        Command::Evaluate { hypotheses, corpus, out } => commands::evaluate(&hypotheses, &corpus, out.as_deref()),
        Command::Gradcheck { dims, seed, fault } => commands::gradcheck(&dims, seed, fault.as_deref()),
        Command::Synth { out, config, seed } => commands::synth(&out, config.as_deref(), seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
