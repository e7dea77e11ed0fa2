//! Refinement of a shared demonstration step schema.
//!
//! Each iteration deletes one schema position from every demo, generates a
//! completion for every calibration question under the reduced few-shot
//! prompt, teacher-force-scores those completions, and commits the position
//! whose mean perplexity is lowest. Deleted steps are merged into neighbors
//! unless removal-only mode is selected.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::run_bounded;
use crate::corpus::{CalibrationSet, DemonstrationSet};
use crate::merge::{MergeRequest, Merger};
use crate::prompt::build_fewshot_prompt;
use crate::refine_ft::RefineError;
use crate::scoring::{score_ppl, GenBackend, GenParams, PplConfig, ScoreBackend, ScoreError};

/// Stop criterion; exactly one is active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsStop {
    /// Refine until the schema has this many steps.
    TargetSteps(usize),
    /// Perform at most this many removals.
    MaxRemovals(usize),
    /// Stop when the best candidate's mean perplexity exceeds this ratio of
    /// the initial demo set's mean perplexity.
    PplStopRatio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsMergePolicy {
    Merge,
    RemoveOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsStrategy {
    MinPpl,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsConfig {
    pub stop: FsStop,
    pub merge_policy: FsMergePolicy,
    pub strategy: FsStrategy,
    pub gen_params: GenParams,
    pub ppl_cfg: PplConfig,
    pub seed: u64,
    /// Abort on any generation/scoring failure instead of excluding the
    /// question from the mean.
    pub strict: bool,
    pub parallelism: usize,
}

impl Default for FsConfig {
    fn default() -> Self {
        Self {
            stop: FsStop::TargetSteps(1),
            merge_policy: FsMergePolicy::Merge,
            strategy: FsStrategy::MinPpl,
            gen_params: GenParams::default(),
            ppl_cfg: PplConfig::default(),
            seed: 0,
            strict: false,
            parallelism: 1,
        }
    }
}

impl FsConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        match self.stop {
            FsStop::TargetSteps(t) if t < 1 => {
                Err(RefineError::Config("target_steps must be >= 1".into()))
            }
            FsStop::PplStopRatio(r) if !(r > 0.0) => {
                Err(RefineError::Config("ppl_stop_ratio must be > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One calibration question's contribution to a candidate evaluation.
/// Generations are kept by content hash; the full texts live in the score
/// cache keyed by the same content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionEval {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    pub gen_ref: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub mean_ppl: f64,
    pub per_question: Vec<QuestionEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsCandidate {
    pub index: usize,
    pub mean_ppl: f64,
    pub per_question: Vec<QuestionEval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsDecision {
    Removed,
    Merged,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsIteration {
    pub candidates: Vec<FsCandidate>,
    pub chosen_index: usize,
    pub ppl_best: f64,
    pub decision: FsDecision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge_fallback: Option<String>,
    pub schema_len_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsTrace {
    pub version: u32,
    pub initial_schema_len: usize,
    pub final_schema_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ppl_initial: Option<f64>,
    pub iterations: Vec<FsIteration>,
}

pub fn gen_ref(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex::encode(&hasher.finalize()[..8])
}

/// Mean generation perplexity of a demo set over the calibration questions:
/// per question, a completion is generated under the few-shot prompt and
/// teacher-force-scored. Only the completion is scored, not the prompt.
/// Generator and scorer may be different backends.
pub fn eval_demo_set(
    demos: &DemonstrationSet,
    calib: &CalibrationSet,
    generator: &dyn GenBackend,
    scorer: &dyn ScoreBackend,
    cfg: &FsConfig,
) -> Result<EvalOutcome, RefineError> {
    if calib.is_empty() {
        return Err(RefineError::Config("empty calibration set".into()));
    }
    let evals: Vec<QuestionEval> = run_bounded(cfg.parallelism, &calib.questions, |question| {
        let prompt = build_fewshot_prompt(demos, question);
        let outcome = generator.generate(&prompt, &cfg.gen_params).and_then(|g| {
            score_ppl(scorer, &prompt, &g, &cfg.ppl_cfg).map(|ppl| (g, ppl))
        });
        match outcome {
            Ok((generation, ppl)) => Ok(QuestionEval {
                ppl: Some(ppl),
                gen_ref: gen_ref(&generation),
                error: None,
            }),
            Err(e) if !cfg.strict => Ok(QuestionEval {
                ppl: None,
                gen_ref: String::new(),
                error: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    })?;
    let ppls: Vec<f64> = evals.iter().filter_map(|e| e.ppl).collect();
    if ppls.is_empty() {
        return Err(RefineError::Score(ScoreError::Backend(
            "every calibration question failed".into(),
        )));
    }
    Ok(EvalOutcome {
        mean_ppl: ppls.iter().sum::<f64>() / ppls.len() as f64,
        per_question: evals,
    })
}

fn stop_reached(stop: &FsStop, schema_len: usize, removals: usize) -> bool {
    match stop {
        FsStop::TargetSteps(target) => schema_len <= *target,
        FsStop::MaxRemovals(max) => removals >= *max,
        FsStop::PplStopRatio(_) => false,
    }
}

/// Applies the merger to every demo for one schema removal. Any failure
/// degrades the whole iteration to plain removal so the demos keep a shared
/// schema.
fn merge_all_demos(
    demos: &DemonstrationSet,
    index: usize,
    merger: Option<&dyn Merger>,
) -> Result<DemonstrationSet, String> {
    let merger = merger.ok_or_else(|| "no merger configured".to_string())?;
    let mut merged = Vec::with_capacity(demos.demos().len());
    for demo in demos.demos() {
        let result = merger
            .merge(&MergeRequest {
                sample: demo,
                removed_index: index,
            })
            .map_err(|e| format!("demo {:?}: {e}", demo.id))?;
        merged.push(demo.with_steps_and_answer_line(result.merged_steps, result.answer_line));
    }
    demos.with_demos(merged).map_err(|e| e.to_string())
}

/// The schema refinement loop. Every iteration evaluates candidate removals,
/// commits the best (ties to the lowest index), and derives merged demos
/// unless removal-only; it ends when the stop criterion is reached.
pub fn refine_demos(
    demos: &DemonstrationSet,
    calib: &CalibrationSet,
    generator: &dyn GenBackend,
    scorer: &dyn ScoreBackend,
    merger: Option<&dyn Merger>,
    cfg: &FsConfig,
) -> Result<(DemonstrationSet, FsTrace), RefineError> {
    cfg.validate()?;
    let mut current = demos.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut removals = 0usize;
    let mut iterations: Vec<FsIteration> = Vec::new();
    let mean_ppl_initial = match cfg.stop {
        FsStop::PplStopRatio(_) => {
            Some(eval_demo_set(&current, calib, generator, scorer, cfg)?.mean_ppl)
        }
        _ => None,
    };

    loop {
        if current.schema_len() == 0 || stop_reached(&cfg.stop, current.schema_len(), removals) {
            break;
        }

        let candidate_indices: Vec<usize> = match cfg.strategy {
            FsStrategy::MinPpl => (0..current.schema_len()).collect(),
            FsStrategy::Random => vec![rng.random_range(0..current.schema_len())],
        };
        let demos_ref = &current;
        let outcomes: Vec<(usize, EvalOutcome)> =
            run_bounded(cfg.parallelism.max(1), &candidate_indices, |&j| {
                let reduced = demos_ref.remove_step(j);
                match eval_demo_set(&reduced, calib, generator, scorer, cfg) {
                    Ok(outcome) => Ok((j, outcome)),
                    Err(RefineError::Score(e)) => Err(e),
                    Err(RefineError::Config(msg)) => Err(ScoreError::Backend(msg)),
                }
            })
            .map_err(RefineError::Score)?;

        let mut best = 0usize;
        for (i, (_, outcome)) in outcomes.iter().enumerate().skip(1) {
            if outcome.mean_ppl < outcomes[best].1.mean_ppl {
                best = i;
            }
        }
        let (chosen_index, _) = outcomes[best];
        let ppl_best = outcomes[best].1.mean_ppl;
        let candidates: Vec<FsCandidate> = outcomes
            .iter()
            .map(|(j, o)| FsCandidate {
                index: *j,
                mean_ppl: o.mean_ppl,
                per_question: o.per_question.clone(),
            })
            .collect();

        if let FsStop::PplStopRatio(ratio) = cfg.stop {
            let baseline = mean_ppl_initial.expect("initial ppl computed");
            if ppl_best > ratio * baseline {
                iterations.push(FsIteration {
                    candidates,
                    chosen_index,
                    ppl_best,
                    decision: FsDecision::Stopped,
                    merge_fallback: None,
                    schema_len_after: current.schema_len(),
                });
                break;
            }
        }

        let (next, decision, merge_fallback) = match cfg.merge_policy {
            FsMergePolicy::RemoveOnly => {
                (current.remove_step(chosen_index), FsDecision::Removed, None)
            }
            FsMergePolicy::Merge => match merge_all_demos(&current, chosen_index, merger) {
                Ok(merged) => (merged, FsDecision::Merged, None),
                Err(reason) => (
                    current.remove_step(chosen_index),
                    FsDecision::Removed,
                    Some(reason),
                ),
            },
        };
        debug_assert_eq!(next.schema_len() + 1, current.schema_len());
        iterations.push(FsIteration {
            candidates,
            chosen_index,
            ppl_best,
            decision,
            merge_fallback,
            schema_len_after: next.schema_len(),
        });
        current = next;
        removals += 1;
    }

    let trace = FsTrace {
        version: crate::refine_ft::TRACE_VERSION,
        initial_schema_len: demos.schema_len(),
        final_schema_len: current.schema_len(),
        mean_ppl_initial,
        iterations,
    };
    Ok((current, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ReasoningSample;
    use crate::scoring::{ScriptedGenerator, ScriptedScorer};
    use approx::assert_relative_eq;

    fn demo(id: &str, steps: Vec<&str>) -> ReasoningSample {
        ReasoningSample::new(
            id,
            format!("question {id}"),
            steps.into_iter().map(str::to_string).collect(),
            "The answer is 1",
            "1",
        )
        .unwrap()
    }

    fn demo_set(n_steps: usize) -> DemonstrationSet {
        let steps: Vec<String> = (0..n_steps).map(|i| format!("step {i}")).collect();
        let demos = vec![
            demo("d1", steps.iter().map(String::as_str).collect()),
            demo("d2", steps.iter().map(String::as_str).collect()),
        ];
        DemonstrationSet::new(demos, None).unwrap()
    }

    #[test]
    fn mean_over_two_questions() {
        let demos = demo_set(2);
        let calib = CalibrationSet::new(vec!["q one".into(), "q two".into()]).unwrap();
        let gen = ScriptedGenerator::new("g")
            .with_reply(build_fewshot_prompt(&demos, "q one"), "gen one")
            .with_reply(build_fewshot_prompt(&demos, "q two"), "gen two");
        let scorer = ScriptedScorer::new("s")
            .with_ppl(build_fewshot_prompt(&demos, "q one"), "gen one", 2.0)
            .with_ppl(build_fewshot_prompt(&demos, "q two"), "gen two", 4.0);
        let outcome =
            eval_demo_set(&demos, &calib, &gen, &scorer, &FsConfig::default()).unwrap();
        assert_relative_eq!(outcome.mean_ppl, 3.0, max_relative = 1e-12);
        assert_eq!(outcome.per_question.len(), 2);
    }

    #[test]
    fn all_zero_logprobs_mean_ppl_one() {
        let demos = demo_set(2);
        let calib = CalibrationSet::new(vec!["q".into()]).unwrap();
        let gen = ScriptedGenerator::new("g").with_default_reply("some tokens here");
        let scorer = ScriptedScorer::uniform("s", 0.0);
        let outcome =
            eval_demo_set(&demos, &calib, &gen, &scorer, &FsConfig::default()).unwrap();
        assert_eq!(outcome.mean_ppl, 1.0);
    }

    #[test]
    fn failures_are_excluded_unless_strict() {
        let demos = demo_set(2);
        let calib = CalibrationSet::new(vec!["good".into(), "bad".into()]).unwrap();
        let gen = ScriptedGenerator::new("g")
            .with_reply(build_fewshot_prompt(&demos, "good"), "fine text");
        let scorer = ScriptedScorer::uniform("s", -(2.0f64.ln()));
        let cfg = FsConfig::default();
        let outcome = eval_demo_set(&demos, &calib, &gen, &scorer, &cfg).unwrap();
        assert_relative_eq!(outcome.mean_ppl, 2.0, max_relative = 1e-12);
        assert!(outcome.per_question[1].error.is_some());

        let strict = FsConfig {
            strict: true,
            ..cfg
        };
        assert!(eval_demo_set(&demos, &calib, &gen, &scorer, &strict).is_err());
    }

    #[test]
    fn zero_removals_returns_input_with_empty_trace() {
        let demos = demo_set(3);
        let calib = CalibrationSet::new(vec!["q".into()]).unwrap();
        let gen = ScriptedGenerator::new("g").with_default_reply("text here");
        let scorer = ScriptedScorer::uniform("s", -1.0);
        let cfg = FsConfig {
            stop: FsStop::MaxRemovals(0),
            ..FsConfig::default()
        };
        let (out, trace) = refine_demos(&demos, &calib, &gen, &scorer, None, &cfg).unwrap();
        assert_eq!(out, demos);
        assert!(trace.iterations.is_empty());
    }

    /// Scripts every candidate deletion of one iteration with chosen mean
    /// perplexities.
    fn script_iteration(
        demos: &DemonstrationSet,
        calib: &CalibrationSet,
        gen: ScriptedGenerator,
        scorer: ScriptedScorer,
        ppls: &[f64],
        tag: &str,
    ) -> (ScriptedGenerator, ScriptedScorer) {
        let mut gen = gen;
        let mut scorer = scorer;
        for (j, &ppl) in ppls.iter().enumerate() {
            let reduced = demos.remove_step(j);
            for (qi, q) in calib.questions.iter().enumerate() {
                let prompt = build_fewshot_prompt(&reduced, q);
                let reply = format!("reply {tag} {j} {qi}");
                gen = gen.with_reply(prompt.clone(), reply.clone());
                scorer = scorer.with_ppl(prompt, reply, ppl);
            }
        }
        (gen, scorer)
    }

    #[test]
    fn commits_the_minimum_mean_candidate() {
        let demos = demo_set(3);
        let calib = CalibrationSet::new(vec!["q1".into(), "q2".into()]).unwrap();
        // Deleting schema step 1 gives the lowest mean.
        let (gen, scorer) = script_iteration(
            &demos,
            &calib,
            ScriptedGenerator::new("g"),
            ScriptedScorer::new("s"),
            &[3.0, 1.5, 2.5],
            "it0",
        );
        let cfg = FsConfig {
            stop: FsStop::MaxRemovals(1),
            merge_policy: FsMergePolicy::RemoveOnly,
            ..FsConfig::default()
        };
        let (out, trace) = refine_demos(&demos, &calib, &gen, &scorer, None, &cfg).unwrap();
        assert_eq!(out.schema_len(), 2);
        assert_eq!(trace.iterations[0].chosen_index, 1);
        assert_relative_eq!(trace.iterations[0].ppl_best, 1.5, max_relative = 1e-12);
        for d in out.demos() {
            assert_eq!(
                d.step_texts(),
                vec!["step 0".to_string(), "step 2".to_string()]
            );
        }
    }

    #[test]
    fn tie_breaks_to_the_lowest_index() {
        let demos = demo_set(3);
        let calib = CalibrationSet::new(vec!["q1".into()]).unwrap();
        let (gen, scorer) = script_iteration(
            &demos,
            &calib,
            ScriptedGenerator::new("g"),
            ScriptedScorer::new("s"),
            &[2.0, 1.25, 1.25],
            "it0",
        );
        let cfg = FsConfig {
            stop: FsStop::MaxRemovals(1),
            merge_policy: FsMergePolicy::RemoveOnly,
            ..FsConfig::default()
        };
        let (_, trace) = refine_demos(&demos, &calib, &gen, &scorer, None, &cfg).unwrap();
        assert_eq!(trace.iterations[0].chosen_index, 1);
    }

    #[test]
    fn ppl_stop_ratio_halts_without_committing() {
        let demos = demo_set(2);
        let calib = CalibrationSet::new(vec!["q1".into()]).unwrap();
        // Initial evaluation of the full demos.
        let full_prompt = build_fewshot_prompt(&demos, "q1");
        let gen0 = ScriptedGenerator::new("g").with_reply(full_prompt.clone(), "base reply");
        let scorer0 = ScriptedScorer::new("s").with_ppl(full_prompt, "base reply", 2.0);
        let (gen, scorer) = script_iteration(&demos, &calib, gen0, scorer0, &[3.0, 3.5], "it0");
        let cfg = FsConfig {
            stop: FsStop::PplStopRatio(1.2),
            merge_policy: FsMergePolicy::RemoveOnly,
            ..FsConfig::default()
        };
        let (out, trace) = refine_demos(&demos, &calib, &gen, &scorer, None, &cfg).unwrap();
        assert_eq!(out, demos);
        assert_eq!(trace.iterations.len(), 1);
        assert_eq!(trace.iterations[0].decision, FsDecision::Stopped);
        assert_eq!(trace.mean_ppl_initial, Some(2.0));
    }

    #[test]
    fn schema_stays_consistent_across_iterations() {
        let demos = demo_set(4);
        let calib = CalibrationSet::new(vec!["q1".into()]).unwrap();
        let gen = ScriptedGenerator::new("g").with_default_reply("uniform reply text");
        let scorer = ScriptedScorer::uniform("s", -(1.5f64.ln()));
        let cfg = FsConfig {
            stop: FsStop::TargetSteps(2),
            merge_policy: FsMergePolicy::RemoveOnly,
            ..FsConfig::default()
        };
        let (out, trace) = refine_demos(&demos, &calib, &gen, &scorer, None, &cfg).unwrap();
        assert_eq!(out.schema_len(), 2);
        assert_eq!(trace.iterations.len(), 2);
        let mut expected = 4;
        for it in &trace.iterations {
            expected -= 1;
            assert_eq!(it.schema_len_after, expected);
        }
        for d in out.demos() {
            assert_eq!(d.steps.len(), 2);
        }
    }

    #[test]
    fn merge_failure_degrades_iteration_to_removal_for_all_demos() {
        let demos = demo_set(3); // "step N" texts carry no equations
        let calib = CalibrationSet::new(vec!["q1".into()]).unwrap();
        let gen = ScriptedGenerator::new("g").with_default_reply("uniform reply text");
        let scorer = ScriptedScorer::uniform("s", -(1.5f64.ln()));
        let cfg = FsConfig {
            stop: FsStop::MaxRemovals(1),
            merge_policy: FsMergePolicy::Merge,
            ..FsConfig::default()
        };
        let (out, trace) = refine_demos(
            &demos,
            &calib,
            &gen,
            &scorer,
            Some(&crate::merge::RuleMerger),
            &cfg,
        )
        .unwrap();
        assert_eq!(trace.iterations[0].decision, FsDecision::Removed);
        assert!(trace.iterations[0].merge_fallback.is_some());
        assert_eq!(out.schema_len(), 2);
        let lens: Vec<usize> = out.demos().iter().map(|d| d.steps.len()).collect();
        assert_eq!(lens, vec![2, 2]);
    }

    #[test]
    fn random_strategy_is_seed_deterministic() {
        let demos = demo_set(4);
        let calib = CalibrationSet::new(vec!["q1".into()]).unwrap();
        let gen = ScriptedGenerator::new("g").with_default_reply("uniform reply text");
        let scorer = ScriptedScorer::uniform("s", -(1.5f64.ln()));
        let cfg = FsConfig {
            stop: FsStop::TargetSteps(2),
            merge_policy: FsMergePolicy::RemoveOnly,
            strategy: FsStrategy::Random,
            seed: 9,
            ..FsConfig::default()
        };
        let run1 = refine_demos(&demos, &calib, &gen, &scorer, None, &cfg).unwrap();
        let run2 = refine_demos(&demos, &calib, &gen, &scorer, None, &cfg).unwrap();
        assert_eq!(run1, run2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            run1.1.iterations[0].chosen_index,
            rng.random_range(0..4usize)
        );
        assert_eq!(
            run1.1.iterations[1].chosen_index,
            rng.random_range(0..3usize)
        );
    }
}
