//! `spirit correlate`: measure (mean generation perplexity, accuracy) per
//! removal subset and correlate the two across subsets.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::Rng;
use rand::SeedableRng;
use serde::Serialize;

use spirit_core::analysis::{correlation_study, CorrelationResult, Sided, StudyConfig, StudyPoint};
use spirit_core::corpus::{self, SegmentMode};
use spirit_core::scoring::GenParams;

use crate::backends;
use crate::config::{self, ConfigFile};
use crate::manifest::RunManifest;

use super::write_pretty_json;

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Demonstration-set file.
    #[arg(long, value_name = "PATH")]
    pub demos: PathBuf,
    /// Evaluation records with gold answers (dataset schema).
    #[arg(long = "eval", value_name = "PATH")]
    pub eval_set: PathBuf,
    /// Removal plan: JSON array of step-index arrays, e.g. [[0],[1,2]].
    #[arg(long, value_name = "PATH", conflicts_with = "random_subsets")]
    pub plan: Option<PathBuf>,
    /// Draw this many random removal subsets instead of reading a plan.
    #[arg(long)]
    pub random_subsets: Option<usize>,
    #[arg(long, value_name = "SPEC")]
    pub gen_backend: Option<String>,
    #[arg(long, value_name = "SPEC")]
    pub score_backend: Option<String>,
    /// Output JSON with the per-subset points and the correlation.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// one or two (default two).
    #[arg(long)]
    pub sided: Option<String>,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub max_tokens: Option<usize>,
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
struct StudyOutput {
    points: Vec<StudyPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    correlation: Option<CorrelationResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    correlation_error: Option<String>,
}

#[derive(Debug, Serialize)]
struct ResolvedCorrelate {
    sided: Sided,
    seed: u64,
    random_subsets: Option<usize>,
    strict: bool,
    segment_mode: SegmentMode,
    gen_backend: String,
    score_backend: String,
    parallelism: usize,
    cache_dir: Option<String>,
}

fn load_plan(path: &PathBuf) -> Result<Vec<Vec<usize>>> {
    let data = std::fs::read_to_string(path)
        .with_context(|| format!("reading removal plan {}", path.display()))?;
    serde_json::from_str(&data)
        .with_context(|| format!("parsing removal plan {}", path.display()))
}

/// Random distinct subsets of the schema positions, sizes uniform in
/// `1..schema_len` (at least one step always survives).
fn random_plan(n: usize, schema_len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if schema_len < 2 {
        bail!("random subsets need a schema of at least 2 steps");
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::with_capacity(n);
    for _ in 0..n {
        let size = rng.random_range(1..schema_len);
        let mut positions: Vec<usize> = (0..schema_len).collect();
        for k in 0..size {
            let pick = rng.random_range(k..positions.len());
            positions.swap(k, pick);
        }
        let mut subset = positions[..size].to_vec();
        subset.sort_unstable();
        plan.push(subset);
    }
    Ok(plan)
}

pub fn run(args: &CorrelateArgs, file: &ConfigFile) -> Result<()> {
    let sided = match args.sided.as_deref().unwrap_or("two") {
        "one" => Sided::One,
        "two" => Sided::Two,
        other => bail!("unknown sidedness {other:?} (one or two)"),
    };
    let resolved = ResolvedCorrelate {
        sided,
        seed: args.seed.unwrap_or(0),
        random_subsets: args.random_subsets,
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
            .or_else(|| file.scoring.score_backend.clone())
            .context("a scoring backend is required (--score-backend)")?,
        parallelism: config::resolve(args.parallelism, None, file.scoring.parallelism, 1),
        cache_dir: config::resolve_cache_dir(args.cache_dir.as_deref(), &file.scoring)
            .map(|p| p.display().to_string()),
    };
    let demos = corpus::load_demo_set(&args.demos, resolved.segment_mode)?;
    let eval_set = corpus::load_samples(&args.eval_set, resolved.segment_mode)?;
    let plan = match (&args.plan, args.random_subsets) {
        (Some(path), None) => load_plan(path)?,
        (None, Some(n)) => random_plan(n, demos.schema_len(), resolved.seed)?,
        (None, None) => bail!("provide --plan or --random-subsets"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };

    let cache_dir = resolved.cache_dir.as_ref().map(PathBuf::from);
    let scorer =
        backends::build_scorer(&resolved.score_backend, &file.scoring, cache_dir.as_ref())?;
    let generator = backends::build_generator(&resolved.gen_backend, &file.scoring)?;

    let cfg = StudyConfig {
        gen_params: GenParams {
            max_tokens: args.max_tokens.unwrap_or(512),
            ..GenParams::default()
        },
        ppl_cfg: spirit_core::scoring::PplConfig {
            skip_first_token: !args.include_first_token
                && file.scoring.skip_first_token.unwrap_or(true),
        },
        sided,
        strict: resolved.strict,
        parallelism: resolved.parallelism,
    };
    let (points, correlation) = correlation_study(
        &demos,
        &eval_set,
        &plan,
        generator.as_ref(),
        scorer.as_ref(),
        &cfg,
    )?;
    let (correlation, correlation_error) = match correlation {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    if let Some(c) = &correlation {
        eprintln!("r = {:.4}, p = {:.6} (n = {})", c.r, c.p_value, c.n);
    } else {
        eprintln!(
            "correlation unavailable: {}",
            correlation_error.as_deref().unwrap_or("unknown")
        );
    }
    let output = StudyOutput {
        points,
        correlation,
        correlation_error,
    };
    write_pretty_json(&output, &args.out)?;

    let mut manifest = RunManifest::new(
        "correlate",
        serde_json::to_value(&resolved).context("serializing resolved config")?,
    );
    manifest.add_input("demos", &args.demos)?;
    manifest.add_input("eval", &args.eval_set)?;
    if let Some(path) = &args.plan {
        manifest.add_input("plan", path)?;
    }
    manifest.add_backend("scorer", scorer.backend_id());
    manifest.add_backend("generator", generator.backend_id());
    manifest.add_seed("seed", resolved.seed);
    manifest.add_output(&args.out);
    manifest.write(&args.out)?;
    Ok(())
}
