//! `spirit refine-ft`: per-sample refinement of a fine-tuning corpus.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use spirit_core::corpus::{self, ReasoningSample, SegmentMode};
use spirit_core::merge::{Merger, PromptedMerger, RuleMerger};
use spirit_core::refine_ft::{refine_dataset, FtConfig};
use spirit_core::scoring::PplConfig;

use crate::backends;
use crate::config::{self, ConfigFile};
use crate::manifest::RunManifest;

use super::{parse_merge_policy, parse_strategy, sibling, write_jsonl, write_pretty_json};

#[derive(Debug, Args)]
pub struct RefineFtArgs {
    /// Input dataset (JSONL records).
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Refined dataset output path; trace/summary/manifest land next to it.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Scoring backend spec (ngram:<path>, scripted:<path>, remote[:<url>]).
    #[arg(long, value_name = "SPEC")]
    pub backend: Option<String>,
    /// Removal threshold: below t1 times the original perplexity, remove.
    #[arg(long)]
    pub t1: Option<f64>,
    /// Stop threshold: above t2 times the original perplexity, stop.
    #[arg(long)]
    pub t2: Option<f64>,
    /// Run once per t2 value, emitting one trade-off input row per value.
    #[arg(long, value_name = "A,B,C", value_delimiter = ',')]
    pub t2_sweep: Vec<f64>,
    /// min_ppl (default), max_ppl, or random.
    #[arg(long)]
    pub strategy: Option<String>,
    /// standard (default), remove_only, or always_merge.
    #[arg(long)]
    pub merge_policy: Option<String>,
    /// rule (default), prompted, or none.
    #[arg(long)]
    pub merger: Option<String>,
    /// Generation backend for the prompted merger.
    #[arg(long, value_name = "SPEC")]
    pub gen_backend: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_steps: Option<usize>,
    /// Ablation: skip the t1 check; always arbitrate merge vs removal.
    #[arg(long)]
    pub disable_t1: bool,
    /// Include the first continuation token in perplexity averages.
    #[arg(long)]
    pub include_first_token: bool,
    /// Score the steps without the answer line.
    #[arg(long)]
    pub no_score_answer_line: bool,
    /// Rebase thresholds on the current state after each accepted edit.
    #[arg(long)]
    pub recompute_ppl_orig: bool,
    /// Append "Answer should end with 'The answer is'" to output questions.
    #[arg(long)]
    pub append_answer_hint: bool,
    /// newline (default) or sentence.
    #[arg(long)]
    pub segment_mode: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ResolvedFt {
    #[serde(flatten)]
    ft: FtConfig,
    merger: String,
    append_answer_hint: bool,
    segment_mode: SegmentMode,
    parallelism: usize,
    backend: String,
    gen_backend: Option<String>,
    cache_dir: Option<String>,
    t2_sweep: Vec<f64>,
}

fn resolve_config(args: &RefineFtArgs, file: &ConfigFile) -> Result<ResolvedFt> {
    let ft = FtConfig {
        t1: config::resolve(args.t1, None, file.ft.t1, 1.0),
        t2: config::resolve(args.t2, None, file.ft.t2, 1.2),
        strategy: parse_strategy(&config::resolve(
            args.strategy.clone(),
            None,
            file.ft.strategy.clone(),
            "min_ppl".into(),
        ))?,
        merge_policy: parse_merge_policy(&config::resolve(
            args.merge_policy.clone(),
            None,
            file.ft.merge_policy.clone(),
            "standard".into(),
        ))?,
        disable_t1: args.disable_t1 || file.ft.disable_t1.unwrap_or(false),
        min_steps: config::resolve(args.min_steps, None, file.ft.min_steps, 1),
        seed: config::resolve(args.seed, None, file.ft.seed, 0),
        ppl_cfg: PplConfig {
            skip_first_token: if args.include_first_token {
                false
            } else {
                file.scoring.skip_first_token.unwrap_or(true)
            },
        },
        score_answer_line: if args.no_score_answer_line {
            false
        } else {
            file.ft.score_answer_line.unwrap_or(true)
        },
        recompute_ppl_orig: args.recompute_ppl_orig
            || file.ft.recompute_ppl_orig.unwrap_or(false),
    };
    let merger = config::resolve(
        args.merger.clone(),
        None,
        file.ft.merger.clone(),
        "rule".into(),
    );
    if !matches!(merger.as_str(), "rule" | "prompted" | "none") {
        bail!("unknown merger {merger:?} (rule, prompted, none)");
    }
    let backend = args
        .backend
        .clone()
        .or_else(|| file.scoring.score_backend.clone())
        .context("a scoring backend is required (--backend or [scoring].score_backend)")?;
    Ok(ResolvedFt {
        ft,
        merger,
        append_answer_hint: args.append_answer_hint
            || file.ft.append_answer_hint.unwrap_or(false),
        segment_mode: config::parse_segment_mode(&config::resolve(
            args.segment_mode.clone(),
            None,
            file.scoring.segment_mode.clone(),
            "newline".into(),
        ))?,
        parallelism: config::resolve(args.parallelism, None, file.scoring.parallelism, 1),
        backend,
        gen_backend: args.gen_backend.clone().or_else(|| file.scoring.gen_backend.clone()),
        cache_dir: config::resolve_cache_dir(args.cache_dir.as_deref(), &file.scoring)
            .map(|p| p.display().to_string()),
        t2_sweep: args.t2_sweep.clone(),
    })
}

fn build_merger(
    resolved: &ResolvedFt,
    file: &ConfigFile,
) -> Result<Option<Box<dyn Merger>>> {
    Ok(match resolved.merger.as_str() {
        "none" => None,
        "rule" => Some(Box::new(RuleMerger)),
        "prompted" => {
            let spec = resolved
                .gen_backend
                .as_ref()
                .context("--merger prompted needs --gen-backend")?;
            let gen = backends::build_generator(spec, &file.scoring)?;
            Some(Box::new(PromptedMerger::new(gen)))
        }
        _ => unreachable!("validated in resolve_config"),
    })
}

fn apply_answer_hint(samples: &mut [ReasoningSample]) {
    for sample in samples {
        sample.question = format!("{} Answer should end with 'The answer is'", sample.question);
    }
}

pub fn run(args: &RefineFtArgs, file: &ConfigFile) -> Result<()> {
    let resolved = resolve_config(args, file)?;
    resolved.ft.validate()?;
    let samples = corpus::load_samples(&args.input, resolved.segment_mode)
        .with_context(|| format!("loading dataset {}", args.input.display()))?;
    let cache_dir = resolved.cache_dir.as_ref().map(PathBuf::from);
    let scorer = backends::build_scorer(&resolved.backend, &file.scoring, cache_dir.as_ref())?;
    let merger = build_merger(&resolved, file)?;
    let merger_ref = merger.as_deref();

    let mut manifest = RunManifest::new(
        "refine-ft",
        serde_json::to_value(&resolved).context("serializing resolved config")?,
    );
    manifest.add_input("in", &args.input)?;
    manifest.add_backend("scorer", scorer.backend_id());
    manifest.add_seed("seed", resolved.ft.seed);

    let t2_values: Vec<Option<f64>> = if resolved.t2_sweep.is_empty() {
        vec![None]
    } else {
        resolved.t2_sweep.iter().copied().map(Some).collect()
    };

    let mut sweep_rows = Vec::new();
    for t2 in &t2_values {
        let mut cfg = resolved.ft.clone();
        if let Some(t2) = t2 {
            cfg.t2 = *t2;
            cfg.validate()?;
        }
        let (mut refined, traces, summary) =
            refine_dataset(&samples, scorer.as_ref(), merger_ref, &cfg, resolved.parallelism)?;
        if resolved.append_answer_hint {
            apply_answer_hint(&mut refined);
        }
        let (out_path, trace_path, summary_path) = match t2 {
            None => (
                args.out.clone(),
                sibling(&args.out, "trace", "jsonl"),
                sibling(&args.out, "summary", "json"),
            ),
            Some(t2) => {
                let tag = format!("t2-{t2}");
                (
                    sibling(&args.out, &tag, "jsonl"),
                    sibling(&args.out, &format!("{tag}.trace"), "jsonl"),
                    sibling(&args.out, &format!("{tag}.summary"), "json"),
                )
            }
        };
        let trace_refs: Vec<String> = traces.iter().map(|t| t.sample_id.clone()).collect();
        corpus::save_samples_with_trace_refs(&refined, Some(&trace_refs), &out_path)?;
        write_jsonl(&traces, &trace_path)?;
        write_pretty_json(&summary, &summary_path)?;
        manifest.add_output(&out_path);
        manifest.add_output(&trace_path);
        manifest.add_output(&summary_path);
        if let Some(t2) = t2 {
            sweep_rows.push((
                format!("t2={t2}"),
                *t2,
                summary.clone(),
            ));
        }
        eprintln!(
            "refined {} samples: {} removed, {} merged, {} failed -> {}",
            summary.samples,
            summary.steps_removed,
            summary.steps_merged,
            summary.failed,
            out_path.display()
        );
    }

    if !sweep_rows.is_empty() {
        let sweep_path = sibling(&args.out, "sweep", "csv");
        let mut csv = String::from(
            "label,t2,samples,failed,steps_removed,steps_merged,tokens_before,tokens_after,mean_tokens_after\n",
        );
        for (label, t2, s) in &sweep_rows {
            let mean_after = if s.samples == 0 {
                0.0
            } else {
                s.tokens_after as f64 / s.samples as f64
            };
            csv.push_str(&format!(
                "{label},{t2},{},{},{},{},{},{},{mean_after}\n",
                s.samples, s.failed, s.steps_removed, s.steps_merged, s.tokens_before,
                s.tokens_after,
            ));
        }
        std::fs::write(&sweep_path, csv)?;
        manifest.add_output(&sweep_path);
    }

    manifest.write(&args.out)?;
    Ok(())
}
