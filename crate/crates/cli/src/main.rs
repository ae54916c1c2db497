mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tsjoint::Error;

#[derive(Parser)]
#[command(name = "tsjoint", version, about = "Joint text and time-series decoder: data, training, forecasting and evaluation")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the run manifest as one JSON line on stderr.
    #[arg(long, global = true)]
    pub json: bool,
    /// Human-readable tables for reports instead of JSON.
    #[arg(long, global = true)]
    pub pretty: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Byte-level BPE vocabularies.
    #[command(subcommand)]
    Tokenize(TokenizeCmd),
    /// Synthetic series.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Two-stage training from a TOML config.
    Train(TrainArgs),
    /// Quantile forecasts from a checkpoint.
    Forecast(ForecastArgs),
    /// Mean-pooled embeddings from a checkpoint.
    Embed(EmbedArgs),
    /// Classification head on frozen embeddings.
    Probe(ProbeArgs),
    /// Forecast and classification metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Subcommand)]
pub enum TokenizeCmd {
    Train {
        /// Text files; every non-empty line is one document.
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text lines to JSON arrays of ids.
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// JSON arrays of ids back to text lines.
    Decode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
pub enum SynthCmd {
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        len: usize,
        /// Use a single kernel of this kind.
        #[arg(long)]
        force_kernel: Option<String>,
        /// TOML generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub horizon: usize,
    /// Text placed before every series.
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Defaults to tokenizer.json beside the checkpoint.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Rerun the whole sequence at each step instead of using the KV cache.
    #[arg(long)]
    pub no_cache: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum HeadKind {
    Linear,
    Mlp,
}

#[derive(Args)]
pub struct ProbeArgs {
    /// JSONL {id, embedding}.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// JSONL {id, label}.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub test_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = HeadKind::Linear)]
    pub head: HeadKind,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub class_balanced: Option<bool>,
    /// Per-example predictions on the test set (or the training set).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum EvalCmd {
    Forecast {
        /// Forecast JSONL {id, quantiles, median}.
        #[arg(long)]
        pred: PathBuf,
        /// Series JSONL holding the observed continuation.
        #[arg(long)]
        truth: PathBuf,
        /// Series JSONL the forecasts were made from.
        #[arg(long)]
        context: PathBuf,
        #[arg(long, default_value = "seasonal-naive")]
        baseline: String,
        /// Season length; taken from each series' frequency when absent.
        #[arg(long)]
        season: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Cls {
        /// JSONL {id, label, scores}.
        #[arg(long)]
        pred: PathBuf,
        /// JSONL {id, label}.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        Error::Data(_)
        | Error::InvalidSeries(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Checkpoint(_)
        | Error::UnknownToken { .. }
        | Error::Dimension(_)
        | Error::Undefined(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match commands::dispatch(&cli, &args) {
        Ok(manifest) => {
            if cli.json {
                match serde_json::to_string(&manifest) {
                    Ok(s) => eprintln!("{s}"),
                    Err(e) => eprintln!("manifest: {e}"),
                }
            } else {
                eprintln!(
                    "{} done in {:.0} ms, config {}",
                    manifest.command,
                    manifest.wall_clock_ms,
                    &manifest.config_hash[..12]
                );
                for o in &manifest.outputs {
                    eprintln!("  {} sha256 {}", o.path, o.sha256);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
