mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use cellwise_core::config::Overrides;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cellwise", version, about = "Notebook-centric data-science agent")]
struct Cli {
    /// TOML config file. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one instruction in a fresh session.
    Run {
        /// Instruction file, or `-` for stdin.
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        workdir: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Continue a finished session with a follow-up instruction.
    Resume {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        followup: String,
        /// Session workdir. Inferred when the transcript sits in `<workdir>/.cellwise/`.
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Re-execute a transcript against its recorded model replies in a scratch directory.
    Replay {
        #[arg(long)]
        transcript: PathBuf,
        /// Prompt template directory; the configured catalog otherwise.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Files copied into the scratch directory before replaying.
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Executor backend to replay on instead of the recorded one.
        #[arg(long, value_parser = ["local", "sim", "gateway"])]
        backend: Option<String>,
        /// Where to write the replayed transcript.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every task manifest in a directory.
    Bench {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        limit_seconds: f64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Average transition counts over transcripts.
    Stats {
        /// Glob of transcript files, optionally `label=glob`. Repeat for more rows.
        #[arg(long, required = true, num_args = 1..)]
        transcripts: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Write the notebook of a transcript.
    ExportNotebook {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where output payloads are read from.
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Serve the session API.
    Serve {
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        sessions_dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

#[derive(Args, Default)]
struct OverrideArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_planning_number: Option<u32>,
    #[arg(long)]
    max_execution_number: Option<u32>,
    #[arg(long)]
    max_debug_number: Option<u32>,
    #[arg(long)]
    max_planning_execution_number: Option<u32>,
    #[arg(long, value_parser = ["local", "sim", "gateway"])]
    backend: Option<String>,
    /// Task timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    disable_planning: bool,
    #[arg(long)]
    disable_repair: bool,
    /// JSON list of model replies; selects the scripted provider.
    #[arg(long)]
    script: Option<PathBuf>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            model: a.model,
            temperature: a.temperature,
            max_planning_number: a.max_planning_number,
            max_execution_number: a.max_execution_number,
            max_debug_number: a.max_debug_number,
            max_planning_execution_number: a.max_planning_execution_number,
            backend: a.backend,
            task_timeout_secs: a.timeout,
            disable_planning: a.disable_planning,
            disable_repair: a.disable_repair,
            script: a.script,
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(commands::EXIT_FAILURE);
        }
    };
    match runtime.block_on(commands::dispatch(cli.config, cli.command)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
