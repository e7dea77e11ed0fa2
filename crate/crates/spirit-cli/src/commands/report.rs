//! `spirit report`: merge evaluation rows into one trade-off table sorted by
//! mean generated tokens.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use spirit_core::analysis::{parse_report, render_report};

use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Input CSVs in the report schema (repeatable).
    #[arg(long = "points", value_name = "PATH", required = true, num_args = 1..)]
    pub points: Vec<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct ResolvedReport {
    inputs: Vec<String>,
}

pub fn run(args: &ReportArgs) -> Result<()> {
    let mut all = Vec::new();
    for path in &args.points {
        let data = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        all.extend(parse_report(&data).with_context(|| format!("parsing {}", path.display()))?);
    }
    std::fs::write(&args.out, render_report(&all)?)?;

    let resolved = ResolvedReport {
        inputs: args.points.iter().map(|p| p.display().to_string()).collect(),
    };
    let mut manifest = RunManifest::new(
        "report",
        serde_json::to_value(&resolved).context("serializing resolved config")?,
    );
    for (i, path) in args.points.iter().enumerate() {
        manifest.add_input(&format!("points[{i}]"), path)?;
    }
    manifest.add_output(&args.out);
    manifest.write(&args.out)?;
    eprintln!("{} rows -> {}", all.len(), args.out.display());
    Ok(())
}
