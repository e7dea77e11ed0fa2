//! Backend wiring: parses backend spec strings and builds scoring/generation
//! backends, wrapping scorers in the score cache.
//!
//! Spec syntax:
//! - `ngram:<path>` — n-gram oracle file
//! - `scripted:<path>` — JSONL fixture table (replayable scores or replies)
//! - `remote` or `remote:<url>` — HTTP backend; the URL falls back to
//!   `SPIRIT_SCORING_URL` / `SPIRIT_GEN_URL` (or the config file), the bearer
//!   token to `SPIRIT_SCORING_TOKEN` / `SPIRIT_GEN_TOKEN`.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};

use spirit_core::scoring::{
    load_gen_fixtures, load_score_fixtures, CachedScorer, GenBackend, NgramOracle, RemoteApiStyle,
    RemoteConfig, RemoteGenerator, RemoteScorer, ScoreBackend, ScoreCache,
};

use crate::config::{self, ScoringSection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendRole {
    Scoring,
    Generation,
}

fn remote_config(spec_url: Option<&str>, role: BackendRole, file: &ScoringSection) -> Result<RemoteConfig> {
    let (env_url, env_token, file_url) = match role {
        BackendRole::Scoring => (
            config::ENV_SCORING_URL,
            config::ENV_SCORING_TOKEN,
            file.scoring_url.clone(),
        ),
        BackendRole::Generation => (
            config::ENV_GEN_URL,
            config::ENV_GEN_TOKEN,
            file.gen_url.clone(),
        ),
    };
    let url = match spec_url {
        Some(u) => u.to_string(),
        None => std::env::var(env_url).ok().or(file_url).with_context(|| {
            format!("remote backend needs a URL (remote:<url>, {env_url}, or the config file)")
        })?,
    };
    let model = file.model.clone().unwrap_or_else(|| "default".to_string());
    let style = match file.api_style.as_deref() {
        None | Some("native") => RemoteApiStyle::Native,
        Some("openai_echo") => RemoteApiStyle::OpenaiEcho,
        Some(other) => bail!("unknown api_style {other:?} (use native or openai_echo)"),
    };
    let mut cfg = RemoteConfig::new(url, model);
    cfg.token = std::env::var(env_token).ok();
    cfg.style = style;
    if let Some(retries) = file.retries {
        cfg.retries = retries;
    }
    Ok(cfg)
}

/// Builds a scoring backend from a spec string, wrapped in the cache.
pub fn build_scorer(
    spec: &str,
    file: &ScoringSection,
    cache_dir: Option<&PathBuf>,
) -> Result<Arc<dyn ScoreBackend>> {
    let inner: Arc<dyn ScoreBackend> = match spec.split_once(':') {
        Some(("ngram", path)) => Arc::new(
            NgramOracle::load(std::path::Path::new(path))
                .with_context(|| format!("loading n-gram oracle {path}"))?,
        ),
        Some(("scripted", path)) => Arc::new(
            load_score_fixtures(std::path::Path::new(path))
                .with_context(|| format!("loading score fixtures {path}"))?,
        ),
        Some(("remote", url)) => Arc::new(RemoteScorer::new(remote_config(
            Some(url),
            BackendRole::Scoring,
            file,
        )?)),
        None if spec == "remote" => Arc::new(RemoteScorer::new(remote_config(
            None,
            BackendRole::Scoring,
            file,
        )?)),
        _ => bail!("unknown scoring backend spec {spec:?} (ngram:<path>, scripted:<path>, remote[:<url>])"),
    };
    let cache = match cache_dir {
        Some(dir) => Arc::new(ScoreCache::persistent(dir).context("opening score cache")?),
        None => Arc::new(ScoreCache::in_memory()),
    };
    Ok(Arc::new(CachedScorer::new(inner, cache)))
}

/// Builds a generation backend from a spec string.
pub fn build_generator(spec: &str, file: &ScoringSection) -> Result<Arc<dyn GenBackend>> {
    Ok(match spec.split_once(':') {
        Some(("ngram", path)) => Arc::new(
            NgramOracle::load(std::path::Path::new(path))
                .with_context(|| format!("loading n-gram oracle {path}"))?,
        ),
        Some(("scripted", path)) => Arc::new(
            load_gen_fixtures(std::path::Path::new(path))
                .with_context(|| format!("loading generation fixtures {path}"))?,
        ),
        Some(("remote", url)) => Arc::new(RemoteGenerator::new(remote_config(
            Some(url),
            BackendRole::Generation,
            file,
        )?)),
        None if spec == "remote" => Arc::new(RemoteGenerator::new(remote_config(
            None,
            BackendRole::Generation,
            file,
        )?)),
        _ => bail!("unknown generation backend spec {spec:?} (ngram:<path>, scripted:<path>, remote[:<url>])"),
    })
}
