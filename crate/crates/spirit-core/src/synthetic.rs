//! Deterministic synthetic corpora with known structure, paired with an
//! n-gram oracle trained to match: filler steps score as near-zero
//! information (deleting one lowers perplexity) while critical steps are
//! chained so that deleting one creates an unseen transition and a large
//! perplexity jump. Used to exercise the refinement loops offline and to
//! check that selection strategies behave as designed.
//!
//! The oracle is order 3 so its context spans one interposed filler, and
//! samples place at most one filler per gap; a critical step is then always
//! identifiable from the surviving context, whatever fillers surround it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CalibrationSet, DemonstrationSet, ReasoningSample};
use crate::scoring::NgramOracle;

const FILLERS: [&str; 2] = ["fA", "fB"];

#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub samples: usize,
    pub seed: u64,
    /// Number of disjoint reasoning chains.
    pub chains: usize,
    /// Critical steps per chain.
    pub chain_len: usize,
    /// Fillers per sample are drawn from `1..=max_fillers`.
    pub max_fillers: usize,
    /// Oracle smoothing constant; small values sharpen the penalty for
    /// unseen transitions.
    pub alpha: f64,
    /// Extra never-sampled vocabulary. A larger vocabulary makes an unseen
    /// context cost `ln V`, which must dwarf ordinary token costs: the stop
    /// threshold is anchored to the original perplexity, fillers included, so
    /// a timid unseen-context penalty would let critical removals slip under
    /// it once the fillers are gone.
    pub decoy_vocab: usize,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            seed: 1,
            chains: 4,
            chain_len: 6,
            max_fillers: 3,
            alpha: 1e-5,
            decoy_vocab: 50_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedSample {
    pub sample: ReasoningSample,
    /// Step indices holding filler tokens (in the sample's initial indexing).
    pub filler_positions: Vec<usize>,
}

impl PlantedSample {
    pub fn is_filler_text(text: &str) -> bool {
        FILLERS.contains(&text)
    }
}

#[derive(Debug)]
pub struct PlantedCorpus {
    pub samples: Vec<PlantedSample>,
    pub oracle: NgramOracle,
}

// Two tokens per critical step: distinct filler slots are then at least two
// tokens apart, so no order-3 context window ever spans two fillers.
fn step_text(chain: usize, i: usize) -> String {
    format!("c{chain}x{i} d{chain}x{i}")
}

fn chain_steps(chain: usize, len: usize) -> Vec<String> {
    (0..len).map(|i| step_text(chain, i)).collect()
}

fn question_for(chain: usize) -> String {
    format!("task k{chain}")
}

fn answer_for(chain: usize) -> String {
    format!("v{chain}")
}

/// Training lines: for every chain, the pure question-to-answer token stream
/// (weighted by repetition), plus one variant per filler token per insertion
/// slot. Every legal single-filler stream is in-distribution; every
/// skip-a-critical-step stream is not.
fn training_lines(cfg: &PlantedConfig) -> Vec<String> {
    let mut lines = Vec::new();
    for chain in 0..cfg.chains {
        let mut base: Vec<String> = vec![question_for(chain)];
        base.extend(chain_steps(chain, cfg.chain_len));
        base.push(format!("The answer is {}", answer_for(chain)));
        let pure = base.join(" ");
        for _ in 0..6 {
            lines.push(pure.clone());
        }
        // Fillers sit between two chain steps or after the last one (just
        // ahead of the answer statement). Never before the first step: the
        // skip-first-token adjustment would exclude that filler's own cost
        // from the perplexity, inverting the effect of deleting it.
        for slot in 1..=cfg.chain_len {
            for filler in FILLERS {
                let mut parts = base.clone();
                parts.insert(1 + slot, filler.to_string());
                lines.push(parts.join(" "));
            }
        }
    }
    lines
}

/// Builds the corpus and its matching oracle.
pub fn planted_corpus(cfg: &PlantedConfig) -> PlantedCorpus {
    let oracle = NgramOracle::train(3, cfg.alpha, training_lines(cfg))
        .expect("training corpus non-empty")
        .with_extra_vocab((0..cfg.decoy_vocab).map(|i| format!("z{i:05}")));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let chain = rng.random_range(0..cfg.chains);
        let mut steps = chain_steps(chain, cfg.chain_len);
        let n_fillers = rng.random_range(1..=cfg.max_fillers).min(cfg.chain_len);
        // Distinct slots, one filler per gap at most, never before step 0.
        let mut slots: Vec<usize> = (1..=cfg.chain_len).collect();
        for k in 0..n_fillers {
            let pick = rng.random_range(k..slots.len());
            slots.swap(k, pick);
        }
        let mut chosen: Vec<usize> = slots[..n_fillers].to_vec();
        chosen.sort_unstable_by(|a, b| b.cmp(a));
        for slot in chosen {
            let filler = FILLERS[rng.random_range(0..FILLERS.len())];
            steps.insert(slot, filler.to_string());
        }
        let filler_positions = steps
            .iter()
            .enumerate()
            .filter(|(_, t)| PlantedSample::is_filler_text(t))
            .map(|(i, _)| i)
            .collect();
        let sample = ReasoningSample::new(
            format!("planted-{i:04}"),
            question_for(chain),
            steps,
            format!("The answer is {}", answer_for(chain)),
            answer_for(chain),
        )
        .expect("planted sample is well-formed");
        samples.push(PlantedSample {
            sample,
            filler_positions,
        });
    }
    PlantedCorpus { samples, oracle }
}

#[derive(Debug, Clone)]
pub struct FewshotConfig {
    pub chains: usize,
    pub chain_len: usize,
    /// How many chains become demonstration examples; the rest provide
    /// calibration questions.
    pub demo_chains: usize,
    pub alpha: f64,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        Self {
            chains: 5,
            chain_len: 7,
            demo_chains: 2,
            alpha: 1e-4,
        }
    }
}

#[derive(Debug)]
pub struct FewshotWorld {
    pub demos: DemonstrationSet,
    pub calib: CalibrationSet,
    pub oracle: NgramOracle,
}

/// A deterministic few-shot world: demonstration examples share one step
/// schema, and the oracle is trained on complete `Q:`/`A:` blocks so that
/// few-shot prompts tokenize in-vocabulary. Greedy decoding from a
/// calibration question reproduces that question's chain and stops cleanly
/// at the next fabricated `Q:`. Order 5 keeps the last chain token inside
/// the context of the answer value, which would otherwise be chain-blind.
pub fn fewshot_world(cfg: &FewshotConfig) -> FewshotWorld {
    assert!(cfg.demo_chains >= 1 && cfg.demo_chains < cfg.chains);
    let mut lines = Vec::new();
    for chain in 0..cfg.chains {
        let mut parts = vec![format!("Q: {} A:", question_for(chain))];
        parts.extend(chain_steps(chain, cfg.chain_len));
        parts.push(format!("The answer is {} Q:", answer_for(chain)));
        lines.push(parts.join(" "));
    }
    let oracle = NgramOracle::train(5, cfg.alpha, lines).expect("training corpus non-empty");
    let demos: Vec<ReasoningSample> = (0..cfg.demo_chains)
        .map(|chain| {
            ReasoningSample::new(
                format!("demo-{chain}"),
                question_for(chain),
                chain_steps(chain, cfg.chain_len),
                format!("The answer is {}", answer_for(chain)),
                answer_for(chain),
            )
            .expect("demo is well-formed")
        })
        .collect();
    let calib: Vec<String> = (cfg.demo_chains..cfg.chains).map(question_for).collect();
    FewshotWorld {
        demos: DemonstrationSet::new(demos, None).expect("demos share a schema"),
        calib: CalibrationSet::new(calib).expect("calibration questions exist"),
        oracle,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine_ft::{original_ppl, scan_removals, FtConfig};

    #[test]
    fn corpus_is_seed_deterministic() {
        let cfg = PlantedConfig {
            samples: 10,
            ..PlantedConfig::default()
        };
        let a = planted_corpus(&cfg);
        let b = planted_corpus(&cfg);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.sample, y.sample);
        }
        assert_eq!(a.oracle.serialize_text(), b.oracle.serialize_text());
    }

    #[test]
    fn filler_removal_lowers_ppl_and_critical_removal_raises_it() {
        let cfg = PlantedConfig {
            samples: 20,
            ..PlantedConfig::default()
        };
        let corpus = planted_corpus(&cfg);
        let ft = FtConfig::default();
        for planted in &corpus.samples {
            let ppl_orig = original_ppl(&planted.sample, &corpus.oracle, &ft).unwrap();
            assert!(ppl_orig.is_finite() && ppl_orig >= 1.0);
            let scan = scan_removals(&planted.sample, &corpus.oracle, &ft).unwrap();
            for entry in &scan {
                let is_filler = planted.filler_positions.contains(&entry.step_index);
                if is_filler {
                    assert!(
                        entry.ratio < 1.0,
                        "filler at {} has ratio {}",
                        entry.step_index,
                        entry.ratio
                    );
                } else {
                    assert!(
                        entry.ratio > 1.0,
                        "critical at {} has ratio {}",
                        entry.step_index,
                        entry.ratio
                    );
                }
            }
        }
    }

    #[test]
    fn fewshot_generation_follows_the_chain_and_stops() {
        use crate::prompt::build_fewshot_prompt;
        use crate::scoring::{GenBackend, GenParams};
        let world = fewshot_world(&FewshotConfig::default());
        let prompt = build_fewshot_prompt(&world.demos, &world.calib.questions[0]);
        let generated = world
            .oracle
            .generate(&prompt, &GenParams::default())
            .unwrap();
        assert!(generated.starts_with("c2x0 d2x0"));
        assert!(generated.ends_with("The answer is v2"));
        assert!(!generated.contains("Q:"));
    }

    #[test]
    fn min_ppl_refinement_strips_exactly_the_fillers() {
        let cfg = PlantedConfig {
            samples: 20,
            seed: 7,
            ..PlantedConfig::default()
        };
        let corpus = planted_corpus(&cfg);
        let ft = FtConfig::default();
        for planted in &corpus.samples {
            let (refined, _) =
                crate::refine_ft::refine_sample(&planted.sample, &corpus.oracle, None, &ft)
                    .unwrap();
            let expected: Vec<String> = planted
                .sample
                .step_texts()
                .into_iter()
                .filter(|t| !PlantedSample::is_filler_text(t))
                .collect();
            assert_eq!(refined.step_texts(), expected);
        }
    }
}
