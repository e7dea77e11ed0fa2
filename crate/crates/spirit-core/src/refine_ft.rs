//! Per-sample greedy refinement of fine-tuning reasoning.
//!
//! Each iteration scores the reasoning with every single step deleted, picks
//! a candidate by strategy, and arbitrates against two ratio thresholds on
//! the original perplexity: below `t1` the step is removed outright, above
//! `t2` refinement stops, and in between a merged rewrite competes with
//! plain removal on perplexity.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::run_bounded;
use crate::corpus::{render_steps, ReasoningSample};
use crate::merge::{MergeRequest, Merger};
use crate::prompt::scoring_prompt;
use crate::scoring::{count_tokens, score_ppl, PplConfig, ScoreBackend, ScoreError, TokenSource};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Remove the step whose deletion minimizes perplexity.
    MinPpl,
    /// Adversarial baseline: remove the step whose deletion maximizes it.
    MaxPpl,
    /// Baseline: pick a step uniformly with the seeded generator.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    /// Remove below `t1`, merge-vs-remove in the band, stop above `t2`.
    Standard,
    /// Never merge; any accepted step is removed.
    RemoveOnly,
    /// Ablation: merge every selected step, without the removal comparison.
    AlwaysMerge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtConfig {
    pub t1: f64,
    pub t2: f64,
    pub strategy: Strategy,
    pub merge_policy: MergePolicy,
    /// Ablation: skip the `t1` check and always arbitrate merge vs removal.
    pub disable_t1: bool,
    pub min_steps: usize,
    pub seed: u64,
    pub ppl_cfg: PplConfig,
    /// Score the answer line together with the steps (the fine-tuning target
    /// includes it).
    pub score_answer_line: bool,
    /// Sensitivity option: rebase the thresholds on the perplexity of the
    /// current state after each accepted edit instead of the original.
    pub recompute_ppl_orig: bool,
}

impl Default for FtConfig {
    fn default() -> Self {
        Self {
            t1: 1.0,
            t2: 1.2,
            strategy: Strategy::MinPpl,
            merge_policy: MergePolicy::Standard,
            disable_t1: false,
            min_steps: 1,
            seed: 0,
            ppl_cfg: PplConfig::default(),
            score_answer_line: true,
            recompute_ppl_orig: false,
        }
    }
}

impl FtConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.t1 > 0.0) {
            return Err(RefineError::Config(format!("t1 must be > 0, got {}", self.t1)));
        }
        if self.t2 < self.t1 {
            return Err(RefineError::Config(format!(
                "t1 <= t2 required, got t1={} t2={}",
                self.t1, self.t2
            )));
        }
        if self.min_steps < 1 {
            return Err(RefineError::Config("min_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One deletion candidate: the perplexity of the reasoning with that step
/// removed, and its ratio against the original perplexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub step_index: usize,
    pub ppl_without: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Removed,
    Merged,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Best deletion's perplexity exceeded `t2` times the original.
    ThresholdExceeded,
    /// Another removal would drop the step count below `min_steps`.
    MinSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub scan: Vec<ScanEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_rem: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_merge: Option<f64>,
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    /// Why an attempted merge fell back to removal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge_fallback: Option<String>,
    pub steps_after: usize,
}

/// Full audit log of one sample's refinement; every decision is re-checkable
/// from the recorded perplexities and the config gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub version: u32,
    pub sample_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_orig: Option<f64>,
    pub iterations: Vec<IterationRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

pub const TRACE_VERSION: u32 = 1;

/// Deterministic per-sample generator: mixing the sample id into the seed
/// makes batches order-independent.
pub fn sample_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(sample_id.as_bytes());
    let digest = hasher.finalize();
    let id_bits = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    ChaCha8Rng::seed_from_u64(seed ^ id_bits)
}

fn continuation_for(steps: &[String], sample: &ReasoningSample, cfg: &FtConfig) -> String {
    render_steps(
        steps,
        cfg.score_answer_line.then_some(sample.answer_line.as_str()),
    )
}

fn scan_current(
    sample: &ReasoningSample,
    steps: &[String],
    scorer: &dyn ScoreBackend,
    cfg: &FtConfig,
    ppl_orig: f64,
) -> Result<Vec<ScanEntry>, ScoreError> {
    let prompt = scoring_prompt(sample);
    (0..steps.len())
        .map(|j| {
            let mut reduced = steps.to_vec();
            reduced.remove(j);
            let continuation = continuation_for(&reduced, sample, cfg);
            let ppl_without = score_ppl(scorer, &prompt, &continuation, &cfg.ppl_cfg)?;
            Ok(ScanEntry {
                step_index: j,
                ppl_without,
                ratio: ppl_without / ppl_orig,
            })
        })
        .collect()
}

/// Scores every single-step deletion of the sample's current reasoning.
/// Ratios are relative to the unmodified sample's perplexity.
pub fn scan_removals(
    sample: &ReasoningSample,
    scorer: &dyn ScoreBackend,
    cfg: &FtConfig,
) -> Result<Vec<ScanEntry>, RefineError> {
    cfg.validate()?;
    let ppl_orig = original_ppl(sample, scorer, cfg)?;
    Ok(scan_current(
        sample,
        &sample.step_texts(),
        scorer,
        cfg,
        ppl_orig,
    )?)
}

/// Perplexity of the sample's reasoning as loaded.
pub fn original_ppl(
    sample: &ReasoningSample,
    scorer: &dyn ScoreBackend,
    cfg: &FtConfig,
) -> Result<f64, ScoreError> {
    let prompt = scoring_prompt(sample);
    let continuation = continuation_for(&sample.step_texts(), sample, cfg);
    score_ppl(scorer, &prompt, &continuation, &cfg.ppl_cfg)
}

fn argmin(scan: &[ScanEntry]) -> usize {
    let mut best = 0;
    for (i, entry) in scan.iter().enumerate().skip(1) {
        if entry.ppl_without < scan[best].ppl_without {
            best = i;
        }
    }
    best
}

fn argmax(scan: &[ScanEntry]) -> usize {
    let mut best = 0;
    for (i, entry) in scan.iter().enumerate().skip(1) {
        if entry.ppl_without > scan[best].ppl_without {
            best = i;
        }
    }
    best
}

/// Runs the refinement loop on one sample, returning the refined sample and
/// its trace. The thresholds stay anchored to the perplexity computed once at
/// initialization (unless `recompute_ppl_orig` is set).
pub fn refine_sample(
    sample: &ReasoningSample,
    scorer: &dyn ScoreBackend,
    merger: Option<&dyn Merger>,
    cfg: &FtConfig,
) -> Result<(ReasoningSample, RefinementTrace), RefineError> {
    cfg.validate()?;
    let prompt = scoring_prompt(sample);
    let mut ppl_orig = original_ppl(sample, scorer, cfg)?;
    let initial_ppl = ppl_orig;
    let mut steps = sample.step_texts();
    let mut answer_line = sample.answer_line.clone();
    let mut rng = sample_rng(cfg.seed, &sample.id);
    let mut iterations = Vec::new();

    loop {
        if steps.len() <= cfg.min_steps {
            iterations.push(IterationRecord {
                scan: vec![],
                chosen_index: None,
                ppl_rem: None,
                ppl_merge: None,
                decision: Decision::Stopped,
                stop_reason: Some(StopReason::MinSteps),
                merge_fallback: None,
                steps_after: steps.len(),
            });
            break;
        }

        let current = sample.with_steps_and_answer_line(steps.clone(), answer_line.clone());
        let scan = scan_current(&current, &steps, scorer, cfg, ppl_orig)?;
        let chosen = match cfg.strategy {
            Strategy::MinPpl => argmin(&scan),
            Strategy::MaxPpl => argmax(&scan),
            Strategy::Random => rng.random_range(0..steps.len()),
        };
        let ppl_rem = scan[chosen].ppl_without;

        if ppl_rem > cfg.t2 * ppl_orig {
            iterations.push(IterationRecord {
                scan,
                chosen_index: Some(chosen),
                ppl_rem: Some(ppl_rem),
                ppl_merge: None,
                decision: Decision::Stopped,
                stop_reason: Some(StopReason::ThresholdExceeded),
                merge_fallback: None,
                steps_after: steps.len(),
            });
            break;
        }

        let plain_removal = {
            let mut reduced = steps.clone();
            reduced.remove(chosen);
            reduced
        };
        let t1_removal = cfg.merge_policy == MergePolicy::Standard
            && !cfg.disable_t1
            && ppl_rem < cfg.t1 * ppl_orig;

        let mut ppl_merge = None;
        let mut merge_fallback = None;
        let mut decision = Decision::Removed;
        if cfg.merge_policy != MergePolicy::RemoveOnly && !t1_removal {
            let merge_attempt = match merger {
                Some(m) => m.merge(&MergeRequest {
                    sample: &current,
                    removed_index: chosen,
                }),
                None => Err(crate::merge::MergeError::Rejected(
                    crate::merge::MergeRejection::NoRule,
                )),
            };
            match merge_attempt {
                Ok(result) => {
                    let merged_cont =
                        render_steps(
                            &result.merged_steps,
                            cfg.score_answer_line.then_some(result.answer_line.as_str()),
                        );
                    let merged_ppl = score_ppl(scorer, &prompt, &merged_cont, &cfg.ppl_cfg)?;
                    ppl_merge = Some(merged_ppl);
                    let accept = cfg.merge_policy == MergePolicy::AlwaysMerge
                        || merged_ppl < ppl_rem;
                    if accept {
                        steps = result.merged_steps;
                        answer_line = result.answer_line;
                        decision = Decision::Merged;
                    }
                }
                Err(e) => {
                    merge_fallback = Some(e.to_string());
                }
            }
        }
        if decision == Decision::Removed {
            steps = plain_removal;
        }

        if cfg.recompute_ppl_orig {
            ppl_orig = match decision {
                Decision::Merged => ppl_merge.expect("merged implies scored"),
                _ => ppl_rem,
            };
        }

        iterations.push(IterationRecord {
            scan,
            chosen_index: Some(chosen),
            ppl_rem: Some(ppl_rem),
            ppl_merge,
            decision,
            stop_reason: None,
            merge_fallback,
            steps_after: steps.len(),
        });
    }

    let refined = sample.with_steps_and_answer_line(steps, answer_line);
    let trace = RefinementTrace {
        version: TRACE_VERSION,
        sample_id: sample.id.clone(),
        ppl_orig: Some(initial_ppl),
        iterations,
        failed: None,
    };
    Ok((refined, trace))
}

/// Aggregates over one dataset refinement run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub version: u32,
    pub samples: usize,
    pub failed: usize,
    pub steps_removed: usize,
    pub steps_merged: usize,
    pub stopped_threshold: usize,
    pub stopped_min_steps: usize,
    pub tokens_before: usize,
    pub tokens_after: usize,
    pub token_source: Option<TokenSource>,
}

/// Refines every sample independently. Per-sample failures never abort the
/// batch: the sample is emitted unrefined and flagged in its trace. Output
/// order matches input order at any parallelism.
pub fn refine_dataset(
    samples: &[ReasoningSample],
    scorer: &dyn ScoreBackend,
    merger: Option<&dyn Merger>,
    cfg: &FtConfig,
    parallelism: usize,
) -> Result<(Vec<ReasoningSample>, Vec<RefinementTrace>, DatasetSummary), RefineError> {
    cfg.validate()?;
    let results: Vec<(ReasoningSample, RefinementTrace)> =
        run_bounded(parallelism, samples, |sample| {
            match refine_sample(sample, scorer, merger, cfg) {
                Ok(pair) => Ok(pair),
                Err(RefineError::Config(msg)) => Err(ScoreError::Backend(msg)),
                Err(RefineError::Score(e)) => Ok((
                    sample.clone(),
                    RefinementTrace {
                        version: TRACE_VERSION,
                        sample_id: sample.id.clone(),
                        ppl_orig: None,
                        iterations: vec![],
                        failed: Some(e.to_string()),
                    },
                )),
            }
        })?;

    let mut refined = Vec::with_capacity(results.len());
    let mut traces = Vec::with_capacity(results.len());
    let mut summary = DatasetSummary {
        version: TRACE_VERSION,
        samples: samples.len(),
        ..DatasetSummary::default()
    };
    for ((sample, trace), original) in results.into_iter().zip(samples) {
        if trace.failed.is_some() {
            summary.failed += 1;
        }
        for it in &trace.iterations {
            match (it.decision, it.stop_reason) {
                (Decision::Removed, _) => summary.steps_removed += 1,
                (Decision::Merged, _) => summary.steps_merged += 1,
                (Decision::Stopped, Some(StopReason::ThresholdExceeded)) => {
                    summary.stopped_threshold += 1
                }
                (Decision::Stopped, _) => summary.stopped_min_steps += 1,
            }
        }
        let (before, source) =
            count_tokens(&crate::corpus::render_reasoning(original), Some(scorer));
        let (after, _) = count_tokens(&crate::corpus::render_reasoning(&sample), Some(scorer));
        summary.tokens_before += before;
        summary.tokens_after += after;
        summary.token_source.get_or_insert(source);
        refined.push(sample);
        traces.push(trace);
    }
    Ok((refined, traces, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::RuleMerger;
    use crate::scoring::ScriptedScorer;
    use approx::assert_relative_eq;

    fn sample(steps: Vec<&str>) -> ReasoningSample {
        ReasoningSample::new(
            "s1",
            "q",
            steps.into_iter().map(str::to_string).collect(),
            "The answer is 1",
            "1",
        )
        .unwrap()
    }

    /// Scripts the sample's own rendering plus each single-step deletion.
    fn scripted(sample: &ReasoningSample, ppl_orig: f64, ppl_without: &[f64]) -> ScriptedScorer {
        let cfg = FtConfig::default();
        let prompt = scoring_prompt(sample);
        let steps = sample.step_texts();
        let mut scorer = ScriptedScorer::new("script").with_ppl(
            prompt.clone(),
            continuation_for(&steps, sample, &cfg),
            ppl_orig,
        );
        for (j, &ppl) in ppl_without.iter().enumerate() {
            let mut reduced = steps.clone();
            reduced.remove(j);
            scorer = scorer.with_ppl(
                prompt.clone(),
                continuation_for(&reduced, sample, &cfg),
                ppl,
            );
        }
        scorer
    }

    #[test]
    fn single_step_sample_scans_one_entry() {
        let s = sample(vec!["only step"]);
        let scorer = scripted(&s, 2.0, &[2.0]);
        let scan = scan_removals(&s, &scorer, &FtConfig::default()).unwrap();
        assert_eq!(scan.len(), 1);
        assert_relative_eq!(scan[0].ratio, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn all_zero_logprob_deletion_scans_ppl_one() {
        let s = sample(vec!["a a", "b b"]);
        // Deleting step 1 leaves a rendering scored with probability 1.
        let scorer = scripted(&s, 4.0, &[8.0, 1.0]);
        let scan = scan_removals(&s, &scorer, &FtConfig::default()).unwrap();
        assert_eq!(scan[1].ppl_without, 1.0);
    }

    #[test]
    fn t2_gate_stops_and_keeps_the_sample() {
        let s = sample(vec!["a a", "b b"]);
        let scorer = scripted(&s, 2.0, &[3.0, 3.5]);
        let (refined, trace) =
            refine_sample(&s, &scorer, None, &FtConfig::default()).unwrap();
        assert_eq!(refined, s);
        assert_eq!(trace.iterations.len(), 1);
        let it = &trace.iterations[0];
        assert_eq!(it.decision, Decision::Stopped);
        assert_eq!(it.stop_reason, Some(StopReason::ThresholdExceeded));
        assert_eq!(it.chosen_index, Some(0));
    }

    #[test]
    fn min_steps_stops_without_scanning() {
        // Only the original rendering is scripted. No deletion entries exist,
        // so a scan attempt would miss; the gate must fire first.
        let s = sample(vec!["a a"]);
        let cfg = FtConfig::default();
        let scorer = ScriptedScorer::new("script").with_ppl(
            scoring_prompt(&s),
            continuation_for(&s.step_texts(), &s, &cfg),
            2.0,
        );
        let (refined, trace) = refine_sample(&s, &scorer, None, &cfg).unwrap();
        assert_eq!(refined.steps.len(), 1);
        assert_eq!(trace.iterations.len(), 1);
        assert_eq!(trace.iterations[0].stop_reason, Some(StopReason::MinSteps));
        assert!(trace.iterations[0].scan.is_empty());
    }

    #[test]
    fn t1_removal_then_stop() {
        // Removing step B gives ratio 0.95 (removed); then the best deletion
        // of the remaining pair gives ratio 1.5 (stop).
        let s = sample(vec!["a a", "b b", "c c"]);
        let cfg = FtConfig::default(); // t1 = 1.0, t2 = 1.2
        let prompt = scoring_prompt(&s);
        let full = continuation_for(&s.step_texts(), &s, &cfg);
        let without = |j: usize| {
            let mut reduced = s.step_texts();
            reduced.remove(j);
            continuation_for(&reduced, &s, &cfg)
        };
        let after_b = vec!["a a".to_string(), "c c".to_string()];
        let without_after = |j: usize| {
            let mut reduced = after_b.clone();
            reduced.remove(j);
            continuation_for(&reduced, &s, &cfg)
        };
        let scorer = ScriptedScorer::new("script")
            .with_ppl(prompt.clone(), full, 2.0)
            .with_ppl(prompt.clone(), without(0), 2.0 * 1.3)
            .with_ppl(prompt.clone(), without(1), 2.0 * 0.95)
            .with_ppl(prompt.clone(), without(2), 2.0 * 1.4)
            .with_ppl(prompt.clone(), without_after(0), 2.0 * 1.5)
            .with_ppl(prompt.clone(), without_after(1), 2.0 * 1.6);
        let (refined, trace) = refine_sample(&s, &scorer, None, &cfg).unwrap();
        assert_eq!(refined.step_texts(), after_b);
        assert_eq!(trace.iterations.len(), 2);
        assert_eq!(trace.iterations[0].decision, Decision::Removed);
        assert_eq!(trace.iterations[0].chosen_index, Some(1));
        assert_eq!(trace.iterations[1].decision, Decision::Stopped);
    }

    #[test]
    fn band_merge_accepted_when_it_beats_removal() {
        // Ratio 1.1 sits in [t1, t2]; the rule merge scores below removal.
        let s = ReasoningSample::new(
            "m",
            "q",
            vec!["x = 40 - 4 = 36.".into(), "36 * 3/4 = 27.".into()],
            "The answer is 27",
            "27",
        )
        .unwrap();
        let cfg = FtConfig {
            min_steps: 1,
            ..FtConfig::default()
        };
        let prompt = scoring_prompt(&s);
        let full = continuation_for(&s.step_texts(), &s, &cfg);
        let merged = continuation_for(&["(40 - 4) * 3/4 = 27.".to_string()], &s, &cfg);
        let rem0 = continuation_for(&["36 * 3/4 = 27.".to_string()], &s, &cfg);
        let rem1 = continuation_for(&["x = 40 - 4 = 36.".to_string()], &s, &cfg);
        let base = ScriptedScorer::new("script")
            .with_ppl(prompt.clone(), full.clone(), 2.0)
            .with_ppl(prompt.clone(), rem0.clone(), 2.2)
            .with_ppl(prompt.clone(), rem1.clone(), 2.3);

        let accept = base.clone().with_ppl(prompt.clone(), merged.clone(), 2.1);
        let (refined, trace) = refine_sample(&s, &accept, Some(&RuleMerger), &cfg).unwrap();
        assert_eq!(trace.iterations[0].decision, Decision::Merged);
        assert_eq!(refined.step_texts(), vec!["(40 - 4) * 3/4 = 27.".to_string()]);

        // Same scenario, but the merged text scores no better: removal wins.
        let reject = base.with_ppl(prompt.clone(), merged, 2.2);
        let (refined, trace) = refine_sample(&s, &reject, Some(&RuleMerger), &cfg).unwrap();
        assert_eq!(trace.iterations[0].decision, Decision::Removed);
        assert_eq!(refined.step_texts(), vec!["36 * 3/4 = 27.".to_string()]);
    }

    #[test]
    fn merge_failure_falls_back_to_removal() {
        let s = sample(vec!["no equation", "b b", "c c"]);
        let scorer = scripted(&s, 2.0, &[2.2, 2.3, 2.35]);
        // The chosen step has no equation: the rule merger rejects, and the
        // iteration degrades to removal with the reason recorded.
        let cfg = FtConfig {
            min_steps: 2,
            ..FtConfig::default()
        };
        let (refined, trace) =
            refine_sample(&s, &scorer, Some(&RuleMerger), &cfg).unwrap();
        assert_eq!(trace.iterations[0].decision, Decision::Removed);
        assert!(trace.iterations[0]
            .merge_fallback
            .as_deref()
            .unwrap()
            .contains("no_rule"));
        assert_eq!(refined.steps.len(), 2);
    }

    #[test]
    fn random_strategy_follows_the_seeded_sequence() {
        let s = sample(vec!["a a", "b b", "c c"]);
        let scorer = ScriptedScorer::uniform("u", -(2.0f64.ln()));
        let cfg = FtConfig {
            strategy: Strategy::Random,
            seed: 42,
            min_steps: 1,
            t2: 10.0,
            ..FtConfig::default()
        };
        let (_, trace) = refine_sample(&s, &scorer, None, &cfg).unwrap();
        let mut rng = sample_rng(42, "s1");
        let mut n = 3usize;
        for it in &trace.iterations {
            if it.decision == Decision::Stopped {
                break;
            }
            assert_eq!(it.chosen_index, Some(rng.random_range(0..n)));
            n -= 1;
        }
    }

    #[test]
    fn dataset_refinement_is_parallelism_invariant() {
        let samples: Vec<ReasoningSample> = (0..16)
            .map(|i| {
                ReasoningSample::new(
                    format!("s{i}"),
                    format!("q{i}"),
                    vec!["a a".into(), "b b".into()],
                    "The answer is 1",
                    "1",
                )
                .unwrap()
            })
            .collect();
        let scorer = ScriptedScorer::uniform("u", -(1.5f64.ln()));
        let cfg = FtConfig::default();
        let (r1, t1, s1) = refine_dataset(&samples, &scorer, None, &cfg, 1).unwrap();
        let (r8, t8, s8) = refine_dataset(&samples, &scorer, None, &cfg, 8).unwrap();
        assert_eq!(r1, r8);
        assert_eq!(t1, t8);
        assert_eq!(s1, s8);
    }

    #[test]
    fn identical_samples_get_identical_traces() {
        let mk = |id: &str| {
            ReasoningSample::new(id, "q", vec!["a a".into(), "b b".into()], "The answer is 1", "1")
                .unwrap()
        };
        let samples = vec![mk("x"), mk("y")];
        let scorer = ScriptedScorer::uniform("u", -(1.5f64.ln()));
        let (_, traces, _) =
            refine_dataset(&samples, &scorer, None, &FtConfig::default(), 1).unwrap();
        assert_eq!(traces[0].iterations, traces[1].iterations);
    }

    #[test]
    fn empty_dataset_gives_zeroed_summary() {
        let scorer = ScriptedScorer::uniform("u", 0.0);
        let (refined, traces, summary) =
            refine_dataset(&[], &scorer, None, &FtConfig::default(), 1).unwrap();
        assert!(refined.is_empty());
        assert!(traces.is_empty());
        assert_eq!(summary.samples, 0);
        assert_eq!(summary.steps_removed, 0);
    }

    #[test]
    fn failed_sample_is_emitted_unrefined_and_flagged() {
        let good = sample(vec!["a a", "b b"]);
        let bad = ReasoningSample::new(
            "bad",
            "other question",
            vec!["x x".into(), "y y".into()],
            "The answer is 1",
            "1",
        )
        .unwrap();
        // Entries exist only for the good sample's renderings.
        let scorer = scripted(&good, 2.0, &[1.9, 2.5]);
        let samples = vec![good.clone(), bad.clone()];
        let (refined, traces, summary) =
            refine_dataset(&samples, &scorer, None, &FtConfig::default(), 1).unwrap();
        assert_eq!(summary.failed, 1);
        assert_eq!(refined[1], bad);
        assert!(traces[1].failed.is_some());
        assert!(traces[0].failed.is_none());
        assert!(refined[0].steps.len() < good.steps.len());
    }

    #[test]
    fn config_invariants_are_enforced() {
        let bad = FtConfig {
            t1: 1.5,
            t2: 1.0,
            ..FtConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FtConfig {
            min_steps: 0,
            ..FtConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
