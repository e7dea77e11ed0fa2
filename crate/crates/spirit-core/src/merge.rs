//! Coherence-preserving step merging. When a selected step is not safely
//! removable, a neighbor step absorbs its content: either an LLM is prompted
//! with worked examples, or a deterministic arithmetic-inlining rule handles
//! the common `<prose> <expr> = <value>` shape for oracle-mode runs.

use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::analysis::{answers_match, extract_answer};
use crate::corpus::ReasoningSample;
use crate::scoring::{GenBackend, GenParams, ScoreError};

/// Few-shot instruction template with `{question}`, `{reasoning}` and
/// `{removed_step}` slots.
pub const MERGE_PROMPT_TEMPLATE: &str = include_str!("../assets/merge_prompt.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRejection {
    AnswerChanged,
    BadStepCount,
    EmptyReply,
    NoRule,
}

impl std::fmt::Display for MergeRejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MergeRejection::AnswerChanged => write!(f, "answer_changed"),
            MergeRejection::BadStepCount => write!(f, "bad_step_count"),
            MergeRejection::EmptyReply => write!(f, "empty_reply"),
            MergeRejection::NoRule => write!(f, "no_rule"),
        }
    }
}

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("merge rejected: {0}")]
    Rejected(MergeRejection),
    #[error(transparent)]
    Backend(#[from] ScoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeRequest<'a> {
    pub sample: &'a ReasoningSample,
    pub removed_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Prompted,
    Rule,
}

/// An accepted merge: one step fewer, same extracted answer. The answer line
/// may be rewritten (e.g. to inline the dropped arithmetic) as long as the
/// answer value is preserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeResult {
    pub merged_steps: Vec<String>,
    pub answer_line: String,
    pub method: MergeMethod,
    pub answer_preserved: bool,
}

pub trait Merger: Send + Sync {
    fn merge(&self, req: &MergeRequest) -> Result<MergeResult, MergeError>;
    fn name(&self) -> &str;
}

/// Fills the instruction template for one removal.
pub fn build_merge_prompt(sample: &ReasoningSample, removed_index: usize) -> String {
    MERGE_PROMPT_TEMPLATE
        .replace("{question}", &sample.question)
        .replace("{reasoning}", &crate::corpus::render_reasoning(sample))
        .replace("{removed_step}", &sample.steps[removed_index].text)
}

/// LLM-prompted merger: builds the worked-example prompt, generates at
/// temperature 0, re-segments the reply, and validates that the answer value
/// is unchanged and the step count dropped by exactly one.
pub struct PromptedMerger {
    gen: Arc<dyn GenBackend>,
    params: GenParams,
}

impl PromptedMerger {
    pub fn new(gen: Arc<dyn GenBackend>) -> Self {
        let params = GenParams {
            // Replies must stop before the model fabricates another example.
            stop: vec!["\n\nExample".into(), "\n\nQ:".into(), "\nQ:".into()],
            ..GenParams::default()
        };
        Self { gen, params }
    }

    pub fn with_params(mut self, params: GenParams) -> Self {
        self.params = params;
        self
    }
}

impl Merger for PromptedMerger {
    fn merge(&self, req: &MergeRequest) -> Result<MergeResult, MergeError> {
        let sample = req.sample;
        assert!(req.removed_index < sample.steps.len(), "removed_index in range");
        let prompt = build_merge_prompt(sample, req.removed_index);
        let reply = self.gen.generate(&prompt, &self.params)?;
        let (steps, answer_line) = parse_merge_reply(&reply)?;
        validate_merge(sample, &steps, &answer_line)?;
        Ok(MergeResult {
            merged_steps: steps,
            answer_line,
            method: MergeMethod::Prompted,
            answer_preserved: true,
        })
    }

    fn name(&self) -> &str {
        "prompted"
    }
}

fn parse_merge_reply(reply: &str) -> Result<(Vec<String>, String), MergeError> {
    let trimmed = reply.trim();
    let trimmed = trimmed.strip_prefix("A:").unwrap_or(trimmed).trim_start();
    let mut lines: Vec<String> = trimmed
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err(MergeError::Rejected(MergeRejection::EmptyReply));
    }
    let marker_pos = lines
        .iter()
        .rposition(|l| l.to_lowercase().contains("the answer is"));
    match marker_pos {
        Some(pos) => {
            let answer_line = lines[pos].clone();
            lines.truncate(pos);
            Ok((lines, answer_line))
        }
        None => Err(MergeError::Rejected(MergeRejection::AnswerChanged)),
    }
}

fn validate_merge(
    sample: &ReasoningSample,
    steps: &[String],
    answer_line: &str,
) -> Result<(), MergeError> {
    let extracted = extract_answer(answer_line)
        .ok_or(MergeError::Rejected(MergeRejection::AnswerChanged))?;
    if !answers_match(&extracted, &sample.answer_value) {
        return Err(MergeError::Rejected(MergeRejection::AnswerChanged));
    }
    if steps.len() + 1 != sample.steps.len() {
        return Err(MergeError::Rejected(MergeRejection::BadStepCount));
    }
    Ok(())
}

/// Deterministic merger for steps of the shape `<prose> <expr> = <value>`:
/// deletes the step and substitutes `(<expr>)` for the first occurrence of
/// `<value>` in the subsequent step, falling back to the preceding one.
pub struct RuleMerger;

fn arith_tail_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[0-9][0-9 ().,+*/%\^-]*$").unwrap())
}

fn value_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap())
}

/// Pulls `(expr, value)` out of a step like `"x = 40 - 4 = 36."`:
/// the value is the first number after the last `=`, the expression is the
/// trailing arithmetic before it.
fn removable_equation(text: &str) -> Option<(String, String)> {
    let eq = text.rfind('=')?;
    let value = value_re().find(text[eq + 1..].trim())?.as_str().to_string();
    let before = text[..eq].trim_end();
    let expr = arith_tail_re().find(before)?.as_str().trim();
    if expr.is_empty() {
        return None;
    }
    Some((expr.trim_end_matches(['.', ',']).trim().to_string(), value))
}

/// Substitutes `(expr)` for the first standalone occurrence of `value`.
fn inline_expression(step: &str, value: &str, expr: &str) -> Option<String> {
    let mut start = 0;
    while let Some(pos) = step[start..].find(value) {
        let abs = start + pos;
        let before_ok = abs == 0
            || !step[..abs]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_ascii_digit() || c == '.');
        let after = abs + value.len();
        let after_ok = after >= step.len()
            || !step[after..]
                .chars()
                .next()
                .is_some_and(|c| c.is_ascii_digit() || c == '.');
        if before_ok && after_ok {
            return Some(format!(
                "{}({}){}",
                &step[..abs],
                expr,
                &step[after..]
            ));
        }
        start = after;
    }
    None
}

impl Merger for RuleMerger {
    fn merge(&self, req: &MergeRequest) -> Result<MergeResult, MergeError> {
        let sample = req.sample;
        let idx = req.removed_index;
        assert!(idx < sample.steps.len(), "removed_index in range");
        let (expr, value) = removable_equation(&sample.steps[idx].text)
            .ok_or(MergeError::Rejected(MergeRejection::NoRule))?;
        let texts = sample.step_texts();

        // Subsequent step first, then preceding.
        let mut merged: Option<(usize, String)> = None;
        if idx + 1 < texts.len() {
            if let Some(new) = inline_expression(&texts[idx + 1], &value, &expr) {
                merged = Some((idx + 1, new));
            }
        }
        if merged.is_none() && idx > 0 {
            if let Some(new) = inline_expression(&texts[idx - 1], &value, &expr) {
                merged = Some((idx - 1, new));
            }
        }
        let (target, new_text) = merged.ok_or(MergeError::Rejected(MergeRejection::NoRule))?;

        let mut steps = texts;
        steps[target] = new_text;
        steps.remove(idx);
        validate_merge(sample, &steps, &sample.answer_line)?;
        Ok(MergeResult {
            merged_steps: steps,
            answer_line: sample.answer_line.clone(),
            method: MergeMethod::Rule,
            answer_preserved: true,
        })
    }

    fn name(&self) -> &str {
        "rule"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScriptedGenerator;

    fn sample(steps: Vec<&str>, answer_line: &str, answer: &str) -> ReasoningSample {
        ReasoningSample::new(
            "s",
            "q",
            steps.into_iter().map(str::to_string).collect(),
            answer_line,
            answer,
        )
        .unwrap()
    }

    #[test]
    fn rule_merge_inlines_forward() {
        let s = sample(
            vec!["x = 40 - 4 = 36.", "36 * 3/4 = 27."],
            "The answer is 27",
            "27",
        );
        let result = RuleMerger
            .merge(&MergeRequest {
                sample: &s,
                removed_index: 0,
            })
            .unwrap();
        assert_eq!(result.merged_steps, vec!["(40 - 4) * 3/4 = 27.".to_string()]);
        assert_eq!(result.method, MergeMethod::Rule);
        assert!(result.answer_preserved);
    }

    #[test]
    fn rule_merge_falls_back_to_preceding_step() {
        let s = sample(
            vec!["start with 36 coins.", "check: 24 + 12 = 36.", "done counting."],
            "The answer is 36",
            "36",
        );
        let result = RuleMerger
            .merge(&MergeRequest {
                sample: &s,
                removed_index: 1,
            })
            .unwrap();
        // "36" is absent from the subsequent step, so the preceding one
        // absorbs the expression.
        assert_eq!(
            result.merged_steps,
            vec![
                "start with (24 + 12) coins.".to_string(),
                "done counting.".to_string()
            ]
        );
    }

    #[test]
    fn rule_merge_rejects_steps_without_equations() {
        let s = sample(vec!["no equation here.", "next."], "The answer is 1", "1");
        assert!(matches!(
            RuleMerger.merge(&MergeRequest {
                sample: &s,
                removed_index: 0
            }),
            Err(MergeError::Rejected(MergeRejection::NoRule))
        ));
    }

    #[test]
    fn rule_merge_rejects_when_value_absent_from_neighbors() {
        let s = sample(
            vec!["a = 1 + 1 = 2.", "unrelated step.", "also unrelated."],
            "The answer is 9",
            "9",
        );
        assert!(matches!(
            RuleMerger.merge(&MergeRequest {
                sample: &s,
                removed_index: 0
            }),
            Err(MergeError::Rejected(MergeRejection::NoRule))
        ));
    }

    #[test]
    fn rule_merge_does_not_split_numbers() {
        // "36" must not match inside "136".
        let s = sample(
            vec!["get 12 * 3 = 36.", "the 136 stays, 36 appears."],
            "The answer is 1",
            "1",
        );
        let result = RuleMerger
            .merge(&MergeRequest {
                sample: &s,
                removed_index: 0,
            })
            .unwrap();
        assert_eq!(
            result.merged_steps,
            vec!["the 136 stays, (12 * 3) appears.".to_string()]
        );
    }

    #[test]
    fn prompted_merge_validates_answer() {
        let s = sample(vec!["a = 1 + 1 = 2.", "so 2."], "The answer is 2", "2");
        let prompt = build_merge_prompt(&s, 0);
        let gen = ScriptedGenerator::new("g").with_reply(
            prompt.clone(),
            "A: so (1 + 1).\nThe answer is 3",
        );
        let merger = PromptedMerger::new(Arc::new(gen));
        assert!(matches!(
            merger.merge(&MergeRequest {
                sample: &s,
                removed_index: 0
            }),
            Err(MergeError::Rejected(MergeRejection::AnswerChanged))
        ));
    }

    #[test]
    fn prompted_merge_validates_step_count() {
        let s = sample(vec!["one.", "two.", "three."], "The answer is 2", "2");
        let prompt = build_merge_prompt(&s, 0);
        let gen = ScriptedGenerator::new("g")
            .with_reply(prompt, "A: one.\ntwo.\nthree.\nThe answer is 2");
        let merger = PromptedMerger::new(Arc::new(gen));
        assert!(matches!(
            merger.merge(&MergeRequest {
                sample: &s,
                removed_index: 0
            }),
            Err(MergeError::Rejected(MergeRejection::BadStepCount))
        ));
    }

    #[test]
    fn prompted_merge_accepts_valid_reply() {
        let s = sample(
            vec!["x = 40 - 4 = 36.", "36 * 3/4 = 27."],
            "The answer is 27",
            "27",
        );
        let prompt = build_merge_prompt(&s, 0);
        let gen = ScriptedGenerator::new("g")
            .with_reply(prompt, "A: (40-4)*3/4 = 27.\nThe answer is 27");
        let merger = PromptedMerger::new(Arc::new(gen));
        let result = merger
            .merge(&MergeRequest {
                sample: &s,
                removed_index: 0,
            })
            .unwrap();
        assert_eq!(result.merged_steps.len(), 1);
        assert!(result.merged_steps[0].contains("(40-4)*3/4 = 27"));
    }

    #[test]
    fn template_slots_are_filled() {
        let s = sample(vec!["step one."], "The answer is 4", "4");
        let prompt = build_merge_prompt(&s, 0);
        assert!(prompt.contains("Q: q Let's think step by step."));
        assert!(prompt.contains("After removing 'step one.', the answer become:"));
        assert!(!prompt.contains("{question}"));
        assert!(!prompt.contains("{reasoning}"));
        assert!(!prompt.contains("{removed_step}"));
    }
}
