//! Perplexity computation and its backends: teacher-forced log-probability
//! scoring, deterministic oracles for offline runs, remote HTTP clients, and
//! a persistent score cache.

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod cache;
mod ngram;
#[cfg(feature = "remote")]
mod remote;
mod scripted;

pub use cache::{CacheStats, CachedScorer, ScoreCache};
pub use ngram::NgramOracle;
#[cfg(feature = "remote")]
pub use remote::{RemoteApiStyle, RemoteConfig, RemoteGenerator, RemoteScorer};
pub use scripted::{load_gen_fixtures, load_score_fixtures, ScriptedGenerator, ScriptedScorer};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("backend error: {0}")]
    Backend(String),
    #[error("backend returned inconsistent results for one request: {0}")]
    BackendInconsistency(String),
    #[error("continuation tokenizes to 0 tokens")]
    EmptyContinuation,
    #[error("scoring requires at least {required} tokens, got {got}")]
    InsufficientTokens { required: usize, got: usize },
    #[error("no scripted entry for {0}")]
    ScriptMiss(String),
    #[error("token {0:?} is not in the oracle vocabulary and no <unk> token is present")]
    UnknownToken(String),
    #[error("score cache: {0}")]
    Cache(String),
    #[error("generation is not supported: {0}")]
    Unsupported(String),
}

/// One continuation token with its natural-log probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub logprob: f64,
}

/// Per-token log-probabilities of a continuation under a prompt.
/// `tokens` covers the continuation only; prompt tokens are excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub prompt_echo: String,
    pub tokens: Vec<TokenScore>,
    pub backend_id: String,
}

/// Perplexity settings. `skip_first_token` drops the first continuation token
/// from the average: the initial token often gets an outlier probability,
/// which would correlate perplexity with generation length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplConfig {
    pub skip_first_token: bool,
}

impl Default for PplConfig {
    fn default() -> Self {
        Self {
            skip_first_token: true,
        }
    }
}

/// Generation parameters. Oracle backends only support temperature 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub max_tokens: usize,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            temperature: 0.0,
            stop: vec!["Q:".to_string()],
        }
    }
}

/// Teacher-forced scoring: the continuation is supplied, not sampled, and the
/// backend reports the probability of each continuation token conditioned on
/// the prompt plus the preceding continuation tokens.
pub trait ScoreBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn score(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, ScoreError>;

    /// Token count under the backend tokenizer, when it exposes one.
    fn count_tokens(&self, _text: &str) -> Option<usize> {
        None
    }
}

/// Text generation at a fixed temperature (0 for deterministic outputs).
pub trait GenBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, ScoreError>;
}

/// Perplexity of a scored continuation: `exp(-(1/N') * sum(logprob))`, where
/// the sum ranges over the included tokens and `N'` counts them (all tokens,
/// or all but the first per [`PplConfig`]).
pub fn perplexity(result: &ScoreResult, cfg: &PplConfig) -> Result<f64, ScoreError> {
    let required = if cfg.skip_first_token { 2 } else { 1 };
    let got = result.tokens.len();
    if got < required {
        return Err(ScoreError::InsufficientTokens { required, got });
    }
    let included = if cfg.skip_first_token {
        &result.tokens[1..]
    } else {
        &result.tokens[..]
    };
    let mean = included.iter().map(|t| t.logprob).sum::<f64>() / included.len() as f64;
    Ok((-mean).exp())
}

/// Scores a continuation and reduces it to one perplexity value.
pub fn score_ppl(
    backend: &dyn ScoreBackend,
    prompt: &str,
    continuation: &str,
    cfg: &PplConfig,
) -> Result<f64, ScoreError> {
    perplexity(&backend.score(prompt, continuation)?, cfg)
}

/// Where a token count came from, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    Backend,
    Whitespace,
}

impl std::fmt::Display for TokenSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TokenSource::Backend => write!(f, "backend"),
            TokenSource::Whitespace => write!(f, "whitespace"),
        }
    }
}

/// Token count under the backend tokenizer, falling back to whitespace
/// splitting (flagged) when the backend exposes none.
pub fn count_tokens(text: &str, backend: Option<&dyn ScoreBackend>) -> (usize, TokenSource) {
    if let Some(backend) = backend {
        if let Some(n) = backend.count_tokens(text) {
            return (n, TokenSource::Backend);
        }
    }
    (text.split_whitespace().count(), TokenSource::Whitespace)
}

/// Whitespace tokenization shared by the oracle backends.
pub(crate) fn ws_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn result_from(logprobs: &[f64]) -> ScoreResult {
        ScoreResult {
            prompt_echo: String::new(),
            tokens: logprobs
                .iter()
                .map(|&lp| TokenScore {
                    token: "t".into(),
                    logprob: lp,
                })
                .collect(),
            backend_id: "test".into(),
        }
    }

    #[test]
    fn certainty_gives_ppl_one() {
        let r = result_from(&[0.0, 0.0, 0.0]);
        let cfg = PplConfig {
            skip_first_token: false,
        };
        assert_eq!(perplexity(&r, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn half_probability_tokens_give_ppl_two() {
        let r = result_from(&[0.5f64.ln(), 0.5f64.ln()]);
        let cfg = PplConfig {
            skip_first_token: false,
        };
        assert_relative_eq!(perplexity(&r, &cfg).unwrap(), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn skip_first_excludes_the_outlier() {
        let r = result_from(&[-5.0, 0.5f64.ln(), 0.5f64.ln()]);
        let cfg = PplConfig {
            skip_first_token: true,
        };
        assert_relative_eq!(perplexity(&r, &cfg).unwrap(), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn too_few_tokens_for_config() {
        let r = result_from(&[0.0]);
        let cfg = PplConfig {
            skip_first_token: true,
        };
        assert!(matches!(
            perplexity(&r, &cfg),
            Err(ScoreError::InsufficientTokens { required: 2, got: 1 })
        ));
    }

    #[test]
    fn count_tokens_whitespace_fallback() {
        assert_eq!(count_tokens("", None), (0, TokenSource::Whitespace));
        assert_eq!(count_tokens("a b c", None), (3, TokenSource::Whitespace));
    }
}
