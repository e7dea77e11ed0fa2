//! `spirit scan`: score every single-step deletion of every sample, emitting
//! the perplexity-change ratios without refining anything.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use spirit_core::corpus::{self, SegmentMode};
use spirit_core::refine_ft::{original_ppl, FtConfig, ScanEntry};
use spirit_core::scoring::PplConfig;

use crate::backends;
use crate::config::{self, ConfigFile};
use crate::manifest::RunManifest;

use super::write_jsonl;

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Input dataset (JSONL records).
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Scan output path (JSONL, one record per sample).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Scoring backend spec.
    #[arg(long, value_name = "SPEC")]
    pub backend: Option<String>,
    /// Include the first continuation token in perplexity averages.
    #[arg(long)]
    pub include_first_token: bool,
    /// Score the steps without the answer line.
    #[arg(long)]
    pub no_score_answer_line: bool,
    #[arg(long)]
    pub segment_mode: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ScanRecord {
    sample_id: String,
    ppl_orig: f64,
    scan: Vec<ScanEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct ResolvedScan {
    ppl_cfg: PplConfig,
    score_answer_line: bool,
    segment_mode: SegmentMode,
    backend: String,
    cache_dir: Option<String>,
}

pub fn run(args: &ScanArgs, file: &ConfigFile) -> Result<()> {
    let resolved = ResolvedScan {
        ppl_cfg: PplConfig {
            skip_first_token: if args.include_first_token {
                false
            } else {
                file.scoring.skip_first_token.unwrap_or(true)
            },
        },
        score_answer_line: !args.no_score_answer_line,
        segment_mode: config::parse_segment_mode(&config::resolve(
            args.segment_mode.clone(),
            None,
            file.scoring.segment_mode.clone(),
            "newline".into(),
        ))?,
        backend: args
            .backend
            .clone()
            .or_else(|| file.scoring.score_backend.clone())
            .context("a scoring backend is required (--backend)")?,
        cache_dir: config::resolve_cache_dir(args.cache_dir.as_deref(), &file.scoring)
            .map(|p| p.display().to_string()),
    };
    let samples = corpus::load_samples(&args.input, resolved.segment_mode)
        .with_context(|| format!("loading dataset {}", args.input.display()))?;
    let cache_dir = resolved.cache_dir.as_ref().map(PathBuf::from);
    let scorer = backends::build_scorer(&resolved.backend, &file.scoring, cache_dir.as_ref())?;

    let cfg = FtConfig {
        ppl_cfg: resolved.ppl_cfg,
        score_answer_line: resolved.score_answer_line,
        ..FtConfig::default()
    };
    let records: Vec<ScanRecord> = samples
        .iter()
        .map(|sample| {
            let outcome = original_ppl(sample, scorer.as_ref(), &cfg).and_then(|ppl_orig| {
                spirit_core::refine_ft::scan_removals(sample, scorer.as_ref(), &cfg)
                    .map(|scan| (ppl_orig, scan))
                    .map_err(|e| match e {
                        spirit_core::refine_ft::RefineError::Score(s) => s,
                        spirit_core::refine_ft::RefineError::Config(msg) => {
                            spirit_core::scoring::ScoreError::Backend(msg)
                        }
                    })
            });
            match outcome {
                Ok((ppl_orig, scan)) => ScanRecord {
                    sample_id: sample.id.clone(),
                    ppl_orig,
                    scan,
                    error: None,
                },
                Err(e) => ScanRecord {
                    sample_id: sample.id.clone(),
                    ppl_orig: 0.0,
                    scan: vec![],
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    write_jsonl(&records, &args.out)?;
    let mut manifest = RunManifest::new(
        "scan",
        serde_json::to_value(&resolved).context("serializing resolved config")?,
    );
    manifest.add_input("in", &args.input)?;
    manifest.add_backend("scorer", scorer.backend_id());
    manifest.add_output(&args.out);
    manifest.write(&args.out)?;
    eprintln!("scanned {} samples -> {}", records.len(), args.out.display());
    Ok(())
}
