//! Prompt assembly shared by demo refinement, the correlation study, and the
//! evaluation harness.

use crate::corpus::{render_reasoning, DemonstrationSet, ReasoningSample};

/// Few-shot prompt: each demo as a `Q:`/`A:` block (steps plus answer line),
/// then the target question with a trailing `A:` for the model to continue.
pub fn build_fewshot_prompt(demos: &DemonstrationSet, question: &str) -> String {
    let mut blocks: Vec<String> = demos
        .demos()
        .iter()
        .map(|demo| format!("Q: {}\nA: {}", demo.question, render_reasoning(demo)))
        .collect();
    blocks.push(format!("Q: {question}\nA:"));
    blocks.join("\n\n")
}

/// Zero-shot prompt with the step-by-step preamble.
pub fn build_zeroshot_prompt(question: &str) -> String {
    format!("Q: {question}\nA: Let's think step by step.")
}

/// Prompt used when teacher-force scoring a sample's own reasoning.
pub fn scoring_prompt(sample: &ReasoningSample) -> String {
    format!("{}\n", sample.question)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ReasoningSample;

    #[test]
    fn fewshot_prompt_layout() {
        let demo = ReasoningSample::new(
            "d",
            "2 + 2?",
            vec!["2 and 2 make 4.".into()],
            "The answer is 4",
            "4",
        )
        .unwrap();
        let set = crate::corpus::DemonstrationSet::new(vec![demo], None).unwrap();
        let prompt = build_fewshot_prompt(&set, "3 + 3?");
        assert_eq!(
            prompt,
            "Q: 2 + 2?\nA: 2 and 2 make 4.\nThe answer is 4\n\nQ: 3 + 3?\nA:"
        );
    }

    #[test]
    fn zeroshot_contains_the_preamble() {
        assert!(build_zeroshot_prompt("q").contains("think step by step"));
    }
}
