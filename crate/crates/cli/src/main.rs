mod commands;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use crate::spec::TaskSel;

#[derive(Parser)]
#[command(name = "onebt", version, about = "Latent-bottleneck transformer for EEG workload classification")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Fit one model, on all data or with one held-out subject.
    Train(TrainArgs),
    /// Leave-one-subject-out evaluation of one configuration.
    Loso(LosoArgs),
    /// LOSO evaluation of every configuration in a preset.
    Sweep(SweepArgs),
    /// Parameter and FLOP table, no training.
    #[command(alias = "cost-report")]
    Cost(CostArgs),
    /// Print the default run configuration.
    DefaultConfig,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Number of subjects [default: 11].
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Samples per (subject, task, level) [default: 12].
    #[arg(long)]
    pub per_level: Option<usize>,
    /// Class separation: RMS of the hard-class band signal [default: 1.0].
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset file to write; the manifest and run record go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Window length in samples [default: 1280].
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Sampling rate in Hz [default: 128].
    #[arg(long)]
    pub sample_rate: Option<u32>,
    /// TOML file with further generator settings; flags win.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// IQ, MATH, GAME, all (each task separately) or pooled.
    #[arg(long)]
    pub task: Option<TaskSel>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Hold this subject out and report its metrics.
    #[arg(long)]
    pub holdout: Option<u16>,
    /// Save model and optimizer state every N epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from the saved state in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Save state and exit after this many epochs; continue later with --resume.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args)]
pub struct LosoArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Folds trained concurrently (capped by ONEBT_THREADS).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// table1, table2, table3, table4 or all.
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Jsonl,
}

#[derive(Args)]
pub struct CostArgs {
    /// Rows to report; without it only the configured model is reported.
    #[arg(long)]
    pub preset: Option<String>,
    /// Run configuration whose model section is the base for preset rows.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                eprintln!("  {}", line.trim_end());
            }
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Loso(a) => commands::loso(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Cost(a) => commands::cost(&a),
        Command::DefaultConfig => commands::default_config(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = commands::categorize(&e);
            eprintln!("error[{category}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
