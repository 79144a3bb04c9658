//! `userllm`: run the service, chat in a terminal, run and score benchmarks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure classes, each with its own exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Other = 1,
    Config = 3,
    Backend = 4,
    MissingAnswer = 5,
    Io = 6,
}

/// An error tagged with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub class: ExitClass,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(class: ExitClass, error: impl Into<anyhow::Error>) -> Self {
        Self { class, error: error.into() }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Attaches an exit class to any error.
pub trait Classify<T> {
    fn class(self, class: ExitClass) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn class(self, class: ExitClass) -> CliResult<T> {
        self.map_err(|e| Failure::new(class, e))
    }
}

#[derive(Parser)]
#[command(name = "userllm", version, about = "Personalized assistant pipeline: service, chat and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP JSON service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Listen address; overrides `server.listen` from the config.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Chat in the terminal, one line per turn. `/quit` or end of input exits.
    Chat(ChatArgs),
    /// Run or score benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Exercise the profile-text parser.
    Profile {
        #[command(subcommand)]
        command: ProfileCommand,
    },
}

#[derive(Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Face image sent with the first turn.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Grant consent for facial image analysis in this session.
    #[arg(long)]
    pub consent: bool,
    /// Print reasoning steps and profile updates before each reply.
    #[arg(long)]
    pub show_trace: bool,
    /// Resume or name the session; a new id is generated when omitted.
    #[arg(long)]
    pub session: Option<String>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Answer every dataset question through the pipeline, then score.
    Run(BenchRunArgs),
    /// Score an answers file against the dataset, offline.
    Score(BenchScoreArgs),
    /// Print the reasoning-request digest of each item, for writing chat mock scripts.
    Digests {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
pub struct BenchRunArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Per-item scores, one JSON object per line.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the generated answers as JSONL.
    #[arg(long)]
    pub answers_out: Option<PathBuf>,
    /// Also write the report table to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Items processed in parallel.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,
    /// Row label in the report table.
    #[arg(long, default_value = "User-LLM R1")]
    pub label: String,
}

#[derive(Args)]
pub struct BenchScoreArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub answers: PathBuf,
    /// Per-item scores, one JSON object per line.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value = "User-LLM R1")]
    pub label: String,
}

#[derive(Subcommand)]
enum ProfileCommand {
    /// Print the structured fields parsed from a profile sentence as JSON.
    Parse {
        #[arg(long)]
        text: String,
    },
}

fn init_logging(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    init_logging(if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" });
    let result = match cli.command {
        Command::Serve { config, listen } => commands::serve(&config, listen),
        Command::Chat(args) => commands::chat(&args),
        Command::Bench { command: BenchCommand::Run(args) } => commands::bench_run(&args),
        Command::Bench { command: BenchCommand::Score(args) } => commands::bench_score(&args),
        Command::Bench { command: BenchCommand::Digests { dataset, config } } => {
            commands::bench_digests(&dataset, &config)
        }
        Command::Profile { command: ProfileCommand::Parse { text } } => commands::profile_parse(&text),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.class as u8)
        }
    }
}
