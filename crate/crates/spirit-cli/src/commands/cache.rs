//! `spirit cache`: inspect or clear the persistent score cache.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Subcommand};

use spirit_core::scoring::ScoreCache;

use crate::config::{self, ConfigFile};

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[command(subcommand)]
    pub action: CacheAction,
    /// Cache directory (else SPIRIT_CACHE_DIR or the config file).
    #[arg(long, global = true, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CacheAction {
    /// Print entry counts.
    Stats,
    /// Drop every cached score.
    Clear,
}

pub fn run(args: &CacheArgs, file: &ConfigFile) -> Result<()> {
    let dir = config::resolve_cache_dir(args.cache_dir.as_deref(), &file.scoring)
        .context("no cache directory configured (--cache-dir, SPIRIT_CACHE_DIR, or the config file)")?;
    let cache = ScoreCache::persistent(&dir)?;
    match args.action {
        CacheAction::Stats => {
            let stats = cache.stats()?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        CacheAction::Clear => {
            let removed = cache.clear()?;
            println!("cleared {removed} cached scores from {}", dir.display());
        }
    }
    Ok(())
}
