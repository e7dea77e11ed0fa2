//! HTTP scoring and generation clients.
//!
//! Two wire styles are supported:
//!
//! - `native`: a minimal JSON scoring endpoint. Request
//!   `{"model", "prompt", "continuation", "logprobs": true}`, response
//!   `{"tokens": [{"token", "logprob"}, ...]}` covering the continuation.
//!   Generation: request `{"model", "prompt", "max_tokens", "temperature",
//!   "stop"}`, response `{"text": "..."}`.
//! - `openai_echo`: an OpenAI-style completions endpoint scored via echo
//!   (`echo: true, max_tokens: 0, logprobs: 0`); continuation tokens are
//!   selected by text offset. Generation uses plain completions.
//!
//! Endpoint URLs and bearer tokens come from configuration or the
//! `SPIRIT_SCORING_URL` / `SPIRIT_SCORING_TOKEN` / `SPIRIT_GEN_URL` /
//! `SPIRIT_GEN_TOKEN` environment variables (resolved by the caller).

use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{GenBackend, GenParams, ScoreBackend, ScoreError, ScoreResult, TokenScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoteApiStyle {
    Native,
    OpenaiEcho,
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub style: RemoteApiStyle,
    /// Transport-error retries (exponential backoff).
    pub retries: u32,
    /// Initial backoff; doubles per retry.
    pub backoff: Duration,
    /// Issue each scoring request twice and require identical responses.
    /// Deterministic responses (temperature 0) are a correctness requirement
    /// for greedy selection; a mismatch surfaces as `BackendInconsistency`.
    pub verify_determinism: bool,
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            token: None,
            style: RemoteApiStyle::Native,
            retries: 3,
            backoff: Duration::from_millis(100),
            verify_determinism: false,
        }
    }
}

fn backend_id_for(cfg: &RemoteConfig, kind: &str) -> String {
    format!("remote-{kind}:{}@{}", cfg.model, cfg.url)
}

fn post_json(
    client: &reqwest::blocking::Client,
    cfg: &RemoteConfig,
    body: &serde_json::Value,
) -> Result<serde_json::Value, ScoreError> {
    let mut delay = cfg.backoff;
    let mut last_err = None;
    for attempt in 0..=cfg.retries {
        if attempt > 0 {
            thread::sleep(delay);
            delay *= 2;
        }
        let mut req = client.post(&cfg.url).json(body);
        if let Some(token) = &cfg.token {
            req = req.bearer_auth(token);
        }
        match req.send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_server_error() {
                    last_err = Some(format!("HTTP {status}"));
                    continue;
                }
                if !status.is_success() {
                    let text = resp.text().unwrap_or_default();
                    return Err(ScoreError::Backend(format!("HTTP {status}: {text}")));
                }
                return resp
                    .json()
                    .map_err(|e| ScoreError::Backend(format!("invalid JSON response: {e}")));
            }
            Err(e) => {
                last_err = Some(e.to_string());
            }
        }
    }
    Err(ScoreError::Backend(format!(
        "transport failed after {} attempts: {}",
        cfg.retries + 1,
        last_err.unwrap_or_default()
    )))
}

pub struct RemoteScorer {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
    id: String,
}

impl RemoteScorer {
    pub fn new(cfg: RemoteConfig) -> Self {
        let id = backend_id_for(&cfg, "score");
        Self {
            cfg,
            client: reqwest::blocking::Client::new(),
            id,
        }
    }

    fn score_once(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, ScoreError> {
        let tokens = match self.cfg.style {
            RemoteApiStyle::Native => self.score_native(prompt, continuation)?,
            RemoteApiStyle::OpenaiEcho => self.score_echo(prompt, continuation)?,
        };
        if tokens.is_empty() {
            return Err(ScoreError::EmptyContinuation);
        }
        Ok(ScoreResult {
            prompt_echo: prompt.to_string(),
            tokens,
            backend_id: self.id.clone(),
        })
    }

    fn score_native(
        &self,
        prompt: &str,
        continuation: &str,
    ) -> Result<Vec<TokenScore>, ScoreError> {
        #[derive(Deserialize)]
        struct NativeToken {
            token: String,
            logprob: f64,
        }
        #[derive(Deserialize)]
        struct NativeResponse {
            tokens: Vec<NativeToken>,
        }
        let body = json!({
            "model": self.cfg.model,
            "prompt": prompt,
            "continuation": continuation,
            "logprobs": true,
        });
        let value = post_json(&self.client, &self.cfg, &body)?;
        let resp: NativeResponse = serde_json::from_value(value)
            .map_err(|e| ScoreError::Backend(format!("unexpected scoring response: {e}")))?;
        Ok(resp
            .tokens
            .into_iter()
            .map(|t| TokenScore {
                token: t.token,
                logprob: t.logprob,
            })
            .collect())
    }

    fn score_echo(&self, prompt: &str, continuation: &str) -> Result<Vec<TokenScore>, ScoreError> {
        #[derive(Deserialize)]
        struct EchoLogprobs {
            tokens: Vec<String>,
            token_logprobs: Vec<Option<f64>>,
            text_offset: Vec<usize>,
        }
        #[derive(Deserialize)]
        struct EchoChoice {
            logprobs: EchoLogprobs,
        }
        #[derive(Deserialize)]
        struct EchoResponse {
            choices: Vec<EchoChoice>,
        }
        let full_text = format!("{prompt}{continuation}");
        let body = json!({
            "model": self.cfg.model,
            "prompt": full_text,
            "echo": true,
            "max_tokens": 0,
            "logprobs": 0,
            "temperature": 0,
        });
        let value = post_json(&self.client, &self.cfg, &body)?;
        let resp: EchoResponse = serde_json::from_value(value)
            .map_err(|e| ScoreError::Backend(format!("unexpected echo response: {e}")))?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ScoreError::Backend("echo response has no choices".into()))?;
        let lp = choice.logprobs;
        if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
            return Err(ScoreError::Backend(
                "echo logprob arrays have mismatched lengths".into(),
            ));
        }
        let cut = prompt.len();
        let mut out = Vec::new();
        for ((token, logprob), offset) in lp
            .tokens
            .into_iter()
            .zip(lp.token_logprobs)
            .zip(lp.text_offset)
        {
            if offset < cut {
                continue;
            }
            let logprob = logprob.ok_or_else(|| {
                ScoreError::Backend("null logprob for a continuation token".into())
            })?;
            out.push(TokenScore { token, logprob });
        }
        Ok(out)
    }
}

impl ScoreBackend for RemoteScorer {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, ScoreError> {
        let first = self.score_once(prompt, continuation)?;
        if self.cfg.verify_determinism {
            let second = self.score_once(prompt, continuation)?;
            if second != first {
                return Err(ScoreError::BackendInconsistency(format!(
                    "two scores of the same request differ ({} tokens vs {})",
                    first.tokens.len(),
                    second.tokens.len()
                )));
            }
        }
        Ok(first)
    }
}

pub struct RemoteGenerator {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
    id: String,
}

impl RemoteGenerator {
    pub fn new(cfg: RemoteConfig) -> Self {
        let id = backend_id_for(&cfg, "gen");
        Self {
            cfg,
            client: reqwest::blocking::Client::new(),
            id,
        }
    }
}

impl GenBackend for RemoteGenerator {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, ScoreError> {
        let body = json!({
            "model": self.cfg.model,
            "prompt": prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "stop": params.stop,
        });
        let value = post_json(&self.client, &self.cfg, &body)?;
        match self.cfg.style {
            RemoteApiStyle::Native => {
                #[derive(Deserialize)]
                struct NativeGen {
                    text: String,
                }
                let resp: NativeGen = serde_json::from_value(value).map_err(|e| {
                    ScoreError::Backend(format!("unexpected generation response: {e}"))
                })?;
                Ok(resp.text)
            }
            RemoteApiStyle::OpenaiEcho => {
                #[derive(Deserialize)]
                struct GenChoice {
                    text: String,
                }
                #[derive(Deserialize)]
                struct GenResponse {
                    choices: Vec<GenChoice>,
                }
                let resp: GenResponse = serde_json::from_value(value).map_err(|e| {
                    ScoreError::Backend(format!("unexpected completions response: {e}"))
                })?;
                resp.choices
                    .into_iter()
                    .next()
                    .map(|c| c.text)
                    .ok_or_else(|| ScoreError::Backend("completions response has no choices".into()))
            }
        }
    }
}
