//! `spirit eval`: accuracy and mean generated tokens for one configuration,
//! emitted as a one-row trade-off table plus per-question records.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use spirit_core::analysis::{evaluate, render_report, EvalConfig};
use spirit_core::corpus::{self, SegmentMode};
use spirit_core::scoring::GenParams;

use crate::backends;
use crate::config::{self, ConfigFile};
use crate::manifest::RunManifest;

use super::{sibling, write_jsonl};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Test set with gold answers (dataset schema).
    #[arg(long = "test", value_name = "PATH")]
    pub test_set: PathBuf,
    /// Few-shot demos; omit for zero-shot.
    #[arg(long, value_name = "PATH", conflicts_with = "zero_shot")]
    pub demos: Option<PathBuf>,
    /// Zero-shot prompting (think step by step preamble).
    #[arg(long)]
    pub zero_shot: bool,
    #[arg(long, value_name = "SPEC")]
    pub gen_backend: Option<String>,
    /// Scoring backend used only for token counting (else whitespace, flagged).
    #[arg(long, value_name = "SPEC")]
    pub score_backend: Option<String>,
    /// Configuration label for the report row.
    #[arg(long)]
    pub label: String,
    /// Output CSV (report schema, one data row).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long, value_name = "SEQ")]
    pub stop: Vec<String>,
    #[arg(long)]
    pub segment_mode: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ResolvedEval {
    label: String,
    zero_shot: bool,
    strict: bool,
    segment_mode: SegmentMode,
    gen_backend: String,
    score_backend: Option<String>,
    parallelism: usize,
    cache_dir: Option<String>,
}

pub fn run(args: &EvalArgs, file: &ConfigFile) -> Result<()> {
    if args.demos.is_none() && !args.zero_shot {
        bail!("provide --demos or --zero-shot");
    }
    let resolved = ResolvedEval {
        label: args.label.clone(),
        zero_shot: args.zero_shot,
        strict: args.strict,
        segment_mode: config::parse_segment_mode(&config::resolve(
            args.segment_mode.clone(),
            None,
            file.scoring.segment_mode.clone(),
            "newline".into(),
        ))?,
        gen_backend: args
            .gen_backend
            .clone()
            .or_else(|| file.scoring.gen_backend.clone())
            .context("a generation backend is required (--gen-backend)")?,
        score_backend: args
            .score_backend
            .clone()
            .or_else(|| file.scoring.score_backend.clone()),
        parallelism: config::resolve(args.parallelism, None, file.scoring.parallelism, 1),
        cache_dir: config::resolve_cache_dir(args.cache_dir.as_deref(), &file.scoring)
            .map(|p| p.display().to_string()),
    };
    let test_set = corpus::load_samples(&args.test_set, resolved.segment_mode)?;
    let demos = args
        .demos
        .as_ref()
        .map(|p| corpus::load_demo_set(p, resolved.segment_mode))
        .transpose()?;
    let generator = backends::build_generator(&resolved.gen_backend, &file.scoring)?;
    let cache_dir = resolved.cache_dir.as_ref().map(PathBuf::from);
    let token_scorer = resolved
        .score_backend
        .as_ref()
        .map(|spec| backends::build_scorer(spec, &file.scoring, cache_dir.as_ref()))
        .transpose()?;

    let cfg = EvalConfig {
        label: resolved.label.clone(),
        gen_params: GenParams {
            max_tokens: args.max_tokens.unwrap_or(512),
            temperature: 0.0,
            stop: if args.stop.is_empty() {
                vec!["Q:".into()]
            } else {
                args.stop.clone()
            },
        },
        strict: resolved.strict,
        parallelism: resolved.parallelism,
    };
    let (point, records) = evaluate(
        demos.as_ref(),
        &test_set,
        generator.as_ref(),
        token_scorer.as_deref(),
        &cfg,
    )?;
    std::fs::write(&args.out, render_report(&[point.clone()])?)?;
    let records_path = sibling(&args.out, "records", "jsonl");
    write_jsonl(&records, &records_path)?;

    let mut manifest = RunManifest::new(
        "eval",
        serde_json::to_value(&resolved).context("serializing resolved config")?,
    );
    manifest.add_input("test", &args.test_set)?;
    if let Some(path) = &args.demos {
        manifest.add_input("demos", path)?;
    }
    manifest.add_backend("generator", generator.backend_id());
    if let Some(scorer) = &token_scorer {
        manifest.add_backend("token_scorer", scorer.backend_id());
    }
    manifest.add_output(&args.out);
    manifest.add_output(&records_path);
    manifest.write(&args.out)?;

    eprintln!(
        "{}: accuracy {:.4}, mean tokens {:.2} over {} questions -> {}",
        point.label,
        point.accuracy,
        point.mean_generated_tokens,
        point.n_eval,
        args.out.display()
    );
    Ok(())
}
