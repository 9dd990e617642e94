//! `dsr`: command-line front end and trigger daemon for a dataset repository.

mod commands;
mod render;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dsr", version, about = "Versioned, content-addressed dataset repository")]
pub struct Cli {
    /// Acting principal
    #[arg(long, global = true, env = "DSR_PRINCIPAL")]
    principal: Option<String>,
    /// Repository to use instead of searching upwards from the current directory
    #[arg(long, global = true, value_name = "DIR")]
    repo: Option<PathBuf>,
    /// Print line-delimited JSON
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Create a repository (in DIR, --repo, or the current directory)
    Init {
        dir: Option<PathBuf>,
        #[arg(long, value_name = "BYTES")]
        chunk_min: Option<usize>,
        #[arg(long, value_name = "BYTES")]
        chunk_avg: Option<usize>,
        #[arg(long, value_name = "BYTES")]
        chunk_max: Option<usize>,
    },
    /// Record a directory as the next version of a dataset
    Checkin {
        dir: PathBuf,
        #[arg(short, long)]
        dataset: String,
        #[arg(short, long)]
        message: String,
        #[arg(long = "tag", value_name = "TAG")]
        tags: Vec<String>,
        #[arg(long = "attr", value_name = "K=V", value_parser = parse_attr)]
        attrs: Vec<(String, String)>,
        #[arg(long)]
        allow_empty: bool,
    },
    /// Materialise a version into a directory
    Checkout {
        #[command(flatten)]
        select: Select,
        dest: PathBuf,
        /// Check out every match of --query into DEST/<dataset>@<id>
        #[arg(long)]
        all: bool,
    },
    /// List a dataset's versions, newest first
    Log {
        #[arg(short, long)]
        dataset: String,
    },
    /// Compare two versions file by file
    Diff { a: String, b: String },
    /// Point a tag at a commit
    Tag { name: String, commit: String },
    /// List commits matching key=value filters (dataset, tag, attr.K, after, before, head, revoked)
    Query { expr: Vec<String> },
    /// Remove a dataset's head and tags
    DeleteDataset { name: String },
    /// Give a principal a role on a dataset or on `*`
    Grant {
        #[arg(value_name = "PRINCIPAL")]
        target: String,
        dataset: String,
        role: String,
    },
    /// Remove a principal's grant on a dataset or on `*`
    RevokeGrant {
        #[arg(value_name = "PRINCIPAL")]
        target: String,
        dataset: String,
    },
    #[command(subcommand)]
    Workflow(WorkflowCommand),
    /// Evaluate triggers and drive runs
    Daemon {
        /// Worker slots (default: CPU count)
        #[arg(long)]
        pool: Option<usize>,
        /// Evaluate once, drive the resulting runs and exit
        #[arg(long)]
        once: bool,
        #[arg(long, default_value_t = 1000, value_name = "MS")]
        interval_ms: u64,
    },
    /// Print the lineage tree of a commit
    Lineage {
        commit: String,
        /// Towards sources (default)
        #[arg(long, conflicts_with = "down")]
        up: bool,
        /// Towards derived commits
        #[arg(long)]
        down: bool,
    },
    /// Mark a commit, and by default everything derived from it, unusable
    Revoke {
        commit: String,
        #[arg(long)]
        no_cascade: bool,
        #[arg(short, long)]
        message: String,
    },
    /// Delete chunks no live version references
    Gc,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
pub struct Select {
    #[arg(long)]
    commit: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    query: Option<String>,
}

#[derive(Subcommand)]
pub enum WorkflowCommand {
    /// Register a workflow definition file
    Register { file: PathBuf },
    /// Start a run and drive it until it finishes or waits for a human
    Run {
        name: String,
        #[arg(long)]
        pool: Option<usize>,
    },
    /// Show a run's steps and output
    Report { run_id: String },
    /// List runs
    Runs {
        #[arg(long)]
        state: Option<String>,
        #[arg(long)]
        workflow: Option<String>,
    },
    /// Decide a human step
    Approve {
        run_id: String,
        step_id: String,
        #[arg(long)]
        reject: bool,
        /// Use this directory as the step's output
        #[arg(long, conflicts_with = "reject", value_name = "DIR")]
        attach: Option<PathBuf>,
        #[arg(long)]
        pool: Option<usize>,
    },
    /// Run an earlier run's definition again on its pinned inputs
    Rerun {
        run_id: String,
        #[arg(long)]
        pool: Option<usize>,
    },
}

fn parse_attr(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.into(), v.into())),
        _ => Err(format!("expected K=V, got {s:?}")),
    }
}

pub enum Failure {
    Usage(String),
    Domain(dsr_core::Error),
}

impl From<dsr_core::Error> for Failure {
    fn from(e: dsr_core::Error) -> Self {
        Failure::Domain(e)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: USAGE: {}", one_line(msg));
    ExitCode::from(2)
}

/// First paragraph of a clap error, without its own `error:` prefix.
fn clap_message(e: &clap::Error) -> String {
    let text = e.render().to_string();
    let head: Vec<&str> = text.lines().take_while(|l| !l.trim().is_empty()).collect();
    let joined = one_line(&head.join(" "));
    joined.strip_prefix("error: ").unwrap_or(&joined).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DSR_LOG", "warn"))
        .format(|buf, rec| {
            writeln!(buf, "{}: {}", rec.level().as_str().to_lowercase(), rec.args())
        })
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    ExitCode::from(2)
                }
                _ => usage_error(&clap_message(&e)),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => usage_error(&msg),
        Err(Failure::Domain(e)) => {
            eprintln!("error: {}: {}", e.code(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
