//! `spirit refine-fs`: refinement of a shared demonstration step schema.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use spirit_core::corpus::{self, SegmentMode};
use spirit_core::merge::{Merger, PromptedMerger, RuleMerger};
use spirit_core::refine_fs::{refine_demos, FsConfig, FsMergePolicy, FsStop, FsStrategy};
use spirit_core::scoring::{GenParams, PplConfig};

use crate::backends;
use crate::config::{self, ConfigFile};
use crate::manifest::RunManifest;

use super::{sibling, write_pretty_json};

#[derive(Debug, Args)]
pub struct RefineFsArgs {
    /// Demonstration-set file (JSON with a `demos` array).
    #[arg(long, value_name = "PATH")]
    pub demos: PathBuf,
    /// Calibration questions, one per line.
    #[arg(long, value_name = "PATH")]
    pub calib: PathBuf,
    /// Refined demonstration-set output path.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Scoring backend spec.
    #[arg(long, value_name = "SPEC")]
    pub score_backend: Option<String>,
    /// Generation backend spec.
    #[arg(long, value_name = "SPEC")]
    pub gen_backend: Option<String>,
    /// Stop when the schema reaches this many steps.
    #[arg(long, conflicts_with_all = ["max_removals", "ppl_stop_ratio"])]
    pub target_steps: Option<usize>,
    /// Stop after this many removals.
    #[arg(long, conflicts_with = "ppl_stop_ratio")]
    pub max_removals: Option<usize>,
    /// Stop when the best mean perplexity exceeds this ratio of the initial.
    #[arg(long)]
    pub ppl_stop_ratio: Option<f64>,
    /// Merge removed steps into neighbors (default; --no-merge for removal only).
    #[arg(long, overrides_with = "no_merge")]
    pub merge: bool,
    #[arg(long = "no-merge", overrides_with = "merge")]
    pub no_merge: bool,
    /// rule (default) or prompted (uses the generation backend).
    #[arg(long)]
    pub merger: Option<String>,
    /// min_ppl (default) or random.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Abort on any generation/scoring failure.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Generation stop sequence (repeatable).
    #[arg(long, value_name = "SEQ")]
    pub stop: Vec<String>,
    /// Keep at most this many calibration questions (default 32).
    #[arg(long)]
    pub calib_size: Option<usize>,
    /// Include the first continuation token in perplexity averages.
    #[arg(long)]
    pub include_first_token: bool,
    #[arg(long)]
    pub segment_mode: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ResolvedFs {
    #[serde(flatten)]
    fs: FsConfig,
    merger: String,
    segment_mode: SegmentMode,
    calib_size: usize,
    score_backend: String,
    gen_backend: String,
    cache_dir: Option<String>,
}

fn resolve_stop(args: &RefineFsArgs, file: &ConfigFile) -> Result<FsStop> {
    let target = args.target_steps.or(file.fs.target_steps);
    let max_removals = args.max_removals.or(file.fs.max_removals);
    let ratio = args.ppl_stop_ratio.or(file.fs.ppl_stop_ratio);
    // Flags conflict via clap; file-sourced combinations are checked here.
    match (target, max_removals, ratio) {
        (Some(t), None, None) => Ok(FsStop::TargetSteps(t)),
        (None, Some(m), None) => Ok(FsStop::MaxRemovals(m)),
        (None, None, Some(r)) => Ok(FsStop::PplStopRatio(r)),
        (None, None, None) => bail!(
            "one stop criterion is required (--target-steps, --max-removals, or --ppl-stop-ratio)"
        ),
        _ => bail!("conflicting stop criteria: set exactly one of target_steps, max_removals, ppl_stop_ratio"),
    }
}

fn resolve_config(args: &RefineFsArgs, file: &ConfigFile) -> Result<ResolvedFs> {
    let merge_flag = if args.no_merge {
        false
    } else if args.merge {
        true
    } else {
        file.fs.merge.unwrap_or(true)
    };
    let strategy = match config::resolve(
        args.strategy.clone(),
        None,
        file.fs.strategy.clone(),
        "min_ppl".into(),
    )
    .as_str()
    {
        "min_ppl" => FsStrategy::MinPpl,
        "random" => FsStrategy::Random,
        other => bail!("unknown strategy {other:?} (min_ppl, random)"),
    };
    let stop_seqs = if !args.stop.is_empty() {
        args.stop.clone()
    } else {
        file.fs.stop.clone().unwrap_or_else(|| vec!["Q:".into()])
    };
    let fs = FsConfig {
        stop: resolve_stop(args, file)?,
        merge_policy: if merge_flag {
            FsMergePolicy::Merge
        } else {
            FsMergePolicy::RemoveOnly
        },
        strategy,
        gen_params: GenParams {
            max_tokens: config::resolve(args.max_tokens, None, file.fs.max_tokens, 512),
            temperature: 0.0,
            stop: stop_seqs,
        },
        ppl_cfg: PplConfig {
            skip_first_token: if args.include_first_token {
                false
            } else {
                file.scoring.skip_first_token.unwrap_or(true)
            },
        },
        seed: config::resolve(args.seed, None, file.fs.seed, 0),
        strict: args.strict || file.fs.strict.unwrap_or(false),
        parallelism: config::resolve(args.parallelism, None, file.scoring.parallelism, 1),
    };
    let merger = config::resolve(
        args.merger.clone(),
        None,
        file.fs.merger.clone(),
        "rule".into(),
    );
    if !matches!(merger.as_str(), "rule" | "prompted") {
        bail!("unknown merger {merger:?} (rule, prompted)");
    }
    Ok(ResolvedFs {
        fs,
        merger,
        segment_mode: config::parse_segment_mode(&config::resolve(
            args.segment_mode.clone(),
            None,
            file.scoring.segment_mode.clone(),
            "newline".into(),
        ))?,
        calib_size: config::resolve(args.calib_size, None, file.fs.calib_size, 32),
        score_backend: args
            .score_backend
            .clone()
            .or_else(|| file.scoring.score_backend.clone())
            .context("a scoring backend is required (--score-backend)")?,
        gen_backend: args
            .gen_backend
            .clone()
            .or_else(|| file.scoring.gen_backend.clone())
            .context("a generation backend is required (--gen-backend)")?,
        cache_dir: config::resolve_cache_dir(args.cache_dir.as_deref(), &file.scoring)
            .map(|p| p.display().to_string()),
    })
}

pub fn run(args: &RefineFsArgs, file: &ConfigFile) -> Result<()> {
    let resolved = resolve_config(args, file)?;
    resolved.fs.validate()?;
    let demos = corpus::load_demo_set(&args.demos, resolved.segment_mode)
        .with_context(|| format!("loading demos {}", args.demos.display()))?;
    let calib = corpus::load_calibration(&args.calib, Some(resolved.calib_size))
        .with_context(|| format!("loading calibration set {}", args.calib.display()))?;
    let cache_dir = resolved.cache_dir.as_ref().map(PathBuf::from);
    let scorer =
        backends::build_scorer(&resolved.score_backend, &file.scoring, cache_dir.as_ref())?;
    let generator = backends::build_generator(&resolved.gen_backend, &file.scoring)?;
    let merger: Option<Box<dyn Merger>> = match resolved.merger.as_str() {
        "prompted" => Some(Box::new(PromptedMerger::new(generator.clone()))),
        _ => Some(Box::new(RuleMerger)),
    };

    let (refined, trace) = refine_demos(
        &demos,
        &calib,
        generator.as_ref(),
        scorer.as_ref(),
        merger.as_deref(),
        &resolved.fs,
    )?;

    let trace_path = sibling(&args.out, "trace", "json");
    corpus::save_demo_set(&refined, &args.out)?;
    write_pretty_json(&trace, &trace_path)?;

    let mut manifest = RunManifest::new(
        "refine-fs",
        serde_json::to_value(&resolved).context("serializing resolved config")?,
    );
    manifest.add_input("demos", &args.demos)?;
    manifest.add_input("calib", &args.calib)?;
    manifest.add_backend("scorer", scorer.backend_id());
    manifest.add_backend("generator", generator.backend_id());
    manifest.add_seed("seed", resolved.fs.seed);
    manifest.add_output(&args.out);
    manifest.add_output(&trace_path);
    manifest.write(&args.out)?;

    eprintln!(
        "refined schema {} -> {} steps over {} iterations -> {}",
        trace.initial_schema_len,
        trace.final_schema_len,
        trace.iterations.len(),
        args.out.display()
    );
    Ok(())
}
