//! `spirit`: refine chain-of-thought reasoning data by removing or merging
//! the steps whose removal least increases perplexity.
//!
//! Exit codes: 0 success, 2 usage error, 3 backend error (unreachable,
//! unloadable, or inconsistent), 4 data/config error.

mod backends;
mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spirit_core::scoring::ScoreError;

use config::ConfigFile;

#[derive(Debug, Parser)]
#[command(
    name = "spirit",
    version,
    about = "Perplexity-guided refinement of chain-of-thought reasoning data"
)]
struct Cli {
    /// TOML config file; flags override environment variables, which
    /// override the file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Refine a fine-tuning corpus sample by sample
    RefineFt(commands::refine_ft::RefineFtArgs),
    /// Refine a shared demonstration step schema
    RefineFs(commands::refine_fs::RefineFsArgs),
    /// Score every single-step deletion per sample
    Scan(commands::scan::ScanArgs),
    /// Correlate mean generation perplexity with accuracy across removal subsets
    Correlate(commands::correlate::CorrelateArgs),
    /// Measure accuracy and mean generated tokens for one configuration
    Eval(commands::eval::EvalArgs),
    /// Merge evaluation rows into a sorted trade-off table
    Report(commands::report::ReportArgs),
    /// Inspect or clear the persistent score cache
    Cache(commands::cache::CacheArgs),
}

const EXIT_BACKEND: u8 = 3;
const EXIT_DATA: u8 = 4;

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(score) = cause.downcast_ref::<ScoreError>() {
            return match score {
                ScoreError::Backend(_)
                | ScoreError::BackendInconsistency(_)
                | ScoreError::ScriptMiss(_)
                | ScoreError::Cache(_)
                | ScoreError::Unsupported(_) => EXIT_BACKEND,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    match &cli.command {
        Command::RefineFt(args) => commands::refine_ft::run(args, &file),
        Command::RefineFs(args) => commands::refine_fs::run(args, &file),
        Command::Scan(args) => commands::scan::run(args, &file),
        Command::Correlate(args) => commands::correlate::run(args, &file),
        Command::Eval(args) => commands::eval::run(args, &file),
        Command::Report(args) => commands::report::run(args),
        Command::Cache(args) => commands::cache::run(args, &file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code_for(&err);
            let kind = if code == EXIT_BACKEND { "backend" } else { "data" };
            eprintln!("error ({kind}): {err:#}");
            ExitCode::from(code)
        }
    }
}
