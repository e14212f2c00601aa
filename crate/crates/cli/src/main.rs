use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// CAM++ speaker embeddings on the CPU.
#[derive(Parser, Debug)]
#[command(name = "camforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// How to obtain a model: a preset, optionally overridden by a config file,
/// with weights either loaded or freshly initialized from `--seed`.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// campp, dtdnn_l, dtdnn_vanilla, dtdnn_cam_gp_sp or tiny.
    #[arg(long, default_value = "campp")]
    pub preset: String,
    /// `key = value` overrides applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight file; without it weights are initialized from `--seed`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Table,
    Tsv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed WAV files or CAMW feature files into an embedding store.
    Embed {
        #[command(flatten)]
        model: ModelArgs,
        /// WAV files, CAMW feature files or directories of WAV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine-score a trial list against an embedding store.
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// spk2utt-style map: `enroll_id utt1 utt2 ...`; members are averaged.
        #[arg(long)]
        enroll: Option<PathBuf>,
        /// Score file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// EER and minDCF of a score file against labelled trials.
    Eval {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        p_target: f64,
        #[arg(long, default_value_t = 1.0)]
        c_miss: f64,
        #[arg(long, default_value_t = 1.0)]
        c_fa: f64,
    },
    /// Parameter and FLOP accounting per layer.
    Analyze {
        #[arg(long, default_value = "campp")]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input length for the per-layer FLOP columns.
        #[arg(long, default_value_t = 1.0)]
        duration_seconds: f64,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Single-thread real-time factor of embedding extraction.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10.0)]
        duration_seconds: f64,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Time filterbank extraction together with the network.
        #[arg(long)]
        include_features: bool,
    },
    /// Fit a model on a small labelled set and write the weights.
    TrainToy {
        #[command(flatten)]
        model: ModelArgs,
        /// Directory of `<speaker>_<utt>.wav` files, or a `path<TAB>speaker` manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Loss trace (`step loss accuracy`); standard output when absent.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic two-or-more speaker dataset with a manifest.
    ToyData {
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        #[arg(long, default_value_t = 5)]
        utterances: usize,
        #[arg(long, default_value_t = 1.0)]
        duration_seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize weights for a preset and write them.
    Init {
        #[arg(long, default_value = "campp")]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("CAMFORGE_LOG")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<camforge_core::Error>().map_or("other", |c| c.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: kind={kind} msg={msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Embed { model, inputs, out } => commands::embed(&model, &inputs, &out),
        Command::Score { embeddings, trials, enroll, out } => {
            commands::score(&embeddings, &trials, enroll.as_deref(), out.as_deref())
        }
        Command::Eval { trials, scores, p_target, c_miss, c_fa } => {
            commands::eval(&trials, &scores, camforge_core::scoring::DcfParams { p_target, c_miss, c_fa })
        }
        Command::Analyze { preset, config, duration_seconds, format } => {
            commands::analyze(&preset, config.as_deref(), duration_seconds, format)
        }
        Command::Bench { model, duration_seconds, repeats, include_features } => {
            commands::bench(&model, duration_seconds, repeats, include_features)
        }
        Command::TrainToy { model, data, steps, trace, out } => {
            commands::train_toy(&model, &data, steps, trace.as_deref(), &out)
        }
        Command::ToyData { speakers, utterances, duration_seconds, seed, out } => {
            commands::toy_data(speakers, utterances, duration_seconds, seed, &out)
        }
        Command::Init { preset, config, seed, out } => commands::init(&preset, config.as_deref(), seed, &out),
    }
}
