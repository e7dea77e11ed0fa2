//! Scripted backends: exact (prompt, continuation) -> logprobs tables and
//! prompt -> reply tables, for replayable tests and offline fixtures.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GenBackend, GenParams, ScoreBackend, ScoreError, ScoreResult, TokenScore};

/// Scoring backend driven by an explicit table. Entries are keyed by the
/// exact (prompt, continuation) pair; an optional default log-probability
/// covers everything else (assigned uniformly to each whitespace token).
#[derive(Debug, Clone, Default)]
pub struct ScriptedScorer {
    id: String,
    entries: HashMap<(String, String), Vec<f64>>,
    default_logprob: Option<f64>,
}

impl ScriptedScorer {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            entries: HashMap::new(),
            default_logprob: None,
        }
    }

    /// Uniform backend: every continuation token of every request gets the
    /// same log-probability.
    pub fn uniform(id: impl Into<String>, logprob: f64) -> Self {
        Self::new(id).with_default_logprob(logprob)
    }

    pub fn with_default_logprob(mut self, logprob: f64) -> Self {
        self.default_logprob = Some(logprob);
        self
    }

    /// Adds one exact entry. Panics if the log-probability count does not
    /// match the continuation's whitespace-token count.
    pub fn with_entry(
        mut self,
        prompt: impl Into<String>,
        continuation: impl Into<String>,
        logprobs: Vec<f64>,
    ) -> Self {
        let continuation = continuation.into();
        let n = continuation.split_whitespace().count();
        assert_eq!(
            logprobs.len(),
            n,
            "scripted entry has {} logprobs for {} tokens in {continuation:?}",
            logprobs.len(),
            n
        );
        self.entries.insert((prompt.into(), continuation), logprobs);
        self
    }

    /// Adds an entry whose perplexity equals `ppl` under either skip-first
    /// setting: every token gets logprob `-ln(ppl)`.
    pub fn with_ppl(
        self,
        prompt: impl Into<String>,
        continuation: impl Into<String>,
        ppl: f64,
    ) -> Self {
        let continuation = continuation.into();
        let n = continuation.split_whitespace().count();
        let lp = -(ppl.ln());
        self.with_entry(prompt, continuation, vec![lp; n])
    }
}

impl ScoreBackend for ScriptedScorer {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, ScoreError> {
        let tokens = super::ws_tokens(continuation);
        if tokens.is_empty() {
            return Err(ScoreError::EmptyContinuation);
        }
        let logprobs = match self
            .entries
            .get(&(prompt.to_string(), continuation.to_string()))
        {
            Some(lps) => lps.clone(),
            None => match self.default_logprob {
                Some(lp) => vec![lp; tokens.len()],
                None => {
                    return Err(ScoreError::ScriptMiss(format!(
                        "score({})",
                        preview(continuation)
                    )))
                }
            },
        };
        Ok(ScoreResult {
            prompt_echo: prompt.to_string(),
            tokens: tokens
                .into_iter()
                .zip(logprobs)
                .map(|(token, logprob)| TokenScore { token, logprob })
                .collect(),
            backend_id: self.id.clone(),
        })
    }

    fn count_tokens(&self, text: &str) -> Option<usize> {
        Some(text.split_whitespace().count())
    }
}

/// Generation backend driven by an exact prompt -> reply table, with an
/// optional default reply.
#[derive(Debug, Clone, Default)]
pub struct ScriptedGenerator {
    id: String,
    replies: HashMap<String, String>,
    default_reply: Option<String>,
}

impl ScriptedGenerator {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            replies: HashMap::new(),
            default_reply: None,
        }
    }

    pub fn with_reply(mut self, prompt: impl Into<String>, reply: impl Into<String>) -> Self {
        self.replies.insert(prompt.into(), reply.into());
        self
    }

    pub fn with_default_reply(mut self, reply: impl Into<String>) -> Self {
        self.default_reply = Some(reply.into());
        self
    }
}

impl GenBackend for ScriptedGenerator {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, prompt: &str, _params: &GenParams) -> Result<String, ScoreError> {
        if let Some(reply) = self.replies.get(prompt) {
            return Ok(reply.clone());
        }
        if let Some(reply) = &self.default_reply {
            return Ok(reply.clone());
        }
        Err(ScoreError::ScriptMiss(format!(
            "generate({})",
            preview(prompt)
        )))
    }
}

fn preview(text: &str) -> String {
    let t: String = text.chars().take(60).collect();
    if t.len() < text.len() {
        format!("{t:?}...")
    } else {
        format!("{t:?}")
    }
}

#[derive(Serialize, Deserialize)]
struct ScoreFixture {
    prompt: String,
    continuation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ppl: Option<f64>,
}

/// Loads a scripted scorer from a JSONL fixture file. Each record is
/// `{"prompt", "continuation", "logprobs": [..]}` or
/// `{"prompt", "continuation", "ppl": x}`.
pub fn load_score_fixtures(path: &Path) -> Result<ScriptedScorer, ScoreError> {
    let data = fs::read_to_string(path)
        .map_err(|e| ScoreError::Backend(format!("reading score fixtures: {e}")))?;
    let mut scorer = ScriptedScorer::new(fixture_id("scripted-score", &data));
    for (idx, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fixture: ScoreFixture = serde_json::from_str(line).map_err(|e| {
            ScoreError::Backend(format!("score fixture line {}: {e}", idx + 1))
        })?;
        let n = fixture.continuation.split_whitespace().count();
        let logprobs = match (fixture.logprobs, fixture.ppl) {
            (Some(lps), None) => {
                if lps.len() != n {
                    return Err(ScoreError::Backend(format!(
                        "score fixture line {}: {} logprobs for {} tokens",
                        idx + 1,
                        lps.len(),
                        n
                    )));
                }
                lps
            }
            (None, Some(ppl)) => vec![-(ppl.ln()); n],
            _ => {
                return Err(ScoreError::Backend(format!(
                    "score fixture line {}: provide exactly one of \"logprobs\" or \"ppl\"",
                    idx + 1
                )))
            }
        };
        scorer
            .entries
            .insert((fixture.prompt, fixture.continuation), logprobs);
    }
    Ok(scorer)
}

#[derive(Serialize, Deserialize)]
struct GenFixture {
    prompt: String,
    reply: String,
}

/// Loads a scripted generator from a JSONL fixture file of
/// `{"prompt", "reply"}` records.
pub fn load_gen_fixtures(path: &Path) -> Result<ScriptedGenerator, ScoreError> {
    let data = fs::read_to_string(path)
        .map_err(|e| ScoreError::Backend(format!("reading generation fixtures: {e}")))?;
    let mut gen = ScriptedGenerator::new(fixture_id("scripted-gen", &data));
    for (idx, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fixture: GenFixture = serde_json::from_str(line).map_err(|e| {
            ScoreError::Backend(format!("generation fixture line {}: {e}", idx + 1))
        })?;
        gen.replies.insert(fixture.prompt, fixture.reply);
    }
    Ok(gen)
}

fn fixture_id(prefix: &str, data: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(data.as_bytes());
    format!("{prefix}-{}", hex::encode(&hasher.finalize()[..8]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_one_script_gives_zero_logprobs() {
        let scorer = ScriptedScorer::uniform("s", 0.0);
        let result = scorer.score("p", "a b c").unwrap();
        assert!(result.tokens.iter().all(|t| t.logprob == 0.0));
    }

    #[test]
    fn exact_entry_overrides_default() {
        let scorer = ScriptedScorer::uniform("s", -1.0).with_entry("p", "a b", vec![-0.5, -0.25]);
        let result = scorer.score("p", "a b").unwrap();
        assert_eq!(result.tokens[1].logprob, -0.25);
        let other = scorer.score("p", "a c").unwrap();
        assert_eq!(other.tokens[0].logprob, -1.0);
    }

    #[test]
    fn scripted_generator_lookup_and_miss() {
        let gen = ScriptedGenerator::new("g").with_reply("p", "r");
        assert_eq!(gen.generate("p", &GenParams::default()).unwrap(), "r");
        assert!(matches!(
            gen.generate("other", &GenParams::default()),
            Err(ScoreError::ScriptMiss(_))
        ));
    }

    #[test]
    fn with_ppl_round_trips_through_perplexity() {
        use crate::scoring::{perplexity, PplConfig};
        let scorer = ScriptedScorer::new("s").with_ppl("p", "a b c", 2.5);
        let result = scorer.score("p", "a b c").unwrap();
        let ppl = perplexity(&result, &PplConfig::default()).unwrap();
        assert!((ppl - 2.5).abs() < 1e-12);
    }

    #[test]
    fn fixture_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let score_path = dir.path().join("scores.jsonl");
        std::fs::write(
            &score_path,
            "{\"prompt\":\"p\",\"continuation\":\"a b\",\"ppl\":2.0}\n{\"prompt\":\"p\",\"continuation\":\"c d\",\"logprobs\":[-0.1,-0.2]}\n",
        )
        .unwrap();
        let scorer = load_score_fixtures(&score_path).unwrap();
        assert!(scorer.score("p", "a b").is_ok());
        assert_eq!(scorer.score("p", "c d").unwrap().tokens[1].logprob, -0.2);
        assert!(scorer.score("p", "x").is_err());

        let gen_path = dir.path().join("gens.jsonl");
        std::fs::write(&gen_path, "{\"prompt\":\"p\",\"reply\":\"r\"}\n").unwrap();
        let gen = load_gen_fixtures(&gen_path).unwrap();
        assert_eq!(gen.generate("p", &GenParams::default()).unwrap(), "r");
    }
}
