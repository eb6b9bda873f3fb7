//! `xaln`: data preparation, word-vector and alignment training, gradient
//! checks, downstream probes and retrieval from the command line.
//!
//! Success prints one JSON object on stdout. Failure prints one JSON object
//! `{"error": kind, "message": ..., ...}` on stderr and exits nonzero.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "xaln", version, about = "Audio representations aligned with tag semantics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic tagged dataset with its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        clips_per_class: usize,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        folds: usize,
    },
    /// Compute scaled max-energy patches and scaling statistics.
    PrepareData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the tag vocabulary and train CBOW word vectors.
    TrainW2v {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Jointly train the autoencoder and the tag encoder.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by `prepare-data`.
        #[arg(long)]
        data: PathBuf,
        /// File written by `train-w2v`.
        #[arg(long)]
        w2v: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finite-difference check of the full objective in 64-bit.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = xaln::model::check::RELATIVE_TOLERANCE)]
        tolerance: f64,
        /// Entries sampled from every parameter tensor.
        #[arg(long, default_value_t = 5)]
        per_tensor: usize,
    },
    /// Downstream MLP probe on frozen features.
    #[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "mfcc"])))]
    Probe {
        #[arg(long)]
        task_manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the MFCC baseline instead of an encoder.
        #[arg(long)]
        mfcc: bool,
        /// Probe φ_w of the clip tags instead of the audio embedding.
        #[arg(long, requires = "checkpoint")]
        tags: bool,
        /// Run configuration whose `probe` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank prepared clips against a tag or audio query.
    #[command(group(ArgGroup::new("query").required(true).args(["query_tags", "query_audio"])))]
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by `prepare-data`.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated tags.
        #[arg(long)]
        query_tags: Option<String>,
        /// Audio file whose max-energy patch is the query.
        #[arg(long)]
        query_audio: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Debug)]
pub enum CliError {
    Core(xaln::Error),
    Usage(String),
    CheckFailed(String),
}

impl From<xaln::Error> for CliError {
    fn from(e: xaln::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn to_json(&self) -> Value {
        match self {
            CliError::Core(e) => {
                let mut v = json!({ "error": e.kind(), "message": one_line(&e.to_string()) });
                if let Some(id) = e.clip_id() {
                    v["clip"] = json!(id);
                }
                let mut cause = e;
                while let xaln::Error::Clip { source, .. } = cause {
                    cause = source;
                }
                if let xaln::Error::OutOfVocabulary(token) = cause {
                    v["token"] = json!(token);
                }
                v
            }
            CliError::Usage(m) => json!({ "error": "usage", "message": one_line(m) }),
            CliError::CheckFailed(m) => json!({ "error": "check_failed", "message": one_line(m) }),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<Value, CliError> {
    match cli.command {
        Command::Synth { out, clips_per_class, frames, seed, test_fraction, folds } => {
            commands::synth(&out, clips_per_class, frames, config::resolve_seed(seed)?, test_fraction, folds)
        }
        Command::PrepareData { manifest, out } => commands::prepare_data(&manifest, &out),
        Command::TrainW2v { manifest, dim, out, seed } => {
            commands::train_w2v(&manifest, dim, &out, config::resolve_seed(seed)?)
        }
        Command::Train { config, data, w2v, out, resume } => {
            commands::train(&config, &data, &w2v, &out, resume.as_deref())
        }
        Command::Gradcheck { config, tolerance, per_tensor } => commands::gradcheck(&config, tolerance, per_tensor),
        Command::Probe { task_manifest, checkpoint, mfcc: _, tags, config, out } => {
            commands::probe(&task_manifest, checkpoint.as_deref(), tags, config.as_deref(), &out)
        }
        Command::Retrieve { checkpoint, data, query_tags, query_audio, k } => {
            commands::retrieve(&checkpoint, &data, query_tags.as_deref(), query_audio.as_deref(), k)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return fail(&CliError::Usage(first.to_owned()));
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code())
}
