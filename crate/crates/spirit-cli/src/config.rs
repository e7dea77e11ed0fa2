//! Configuration loading with flags > environment > file > defaults.
//!
//! The file is TOML with `[ft]`, `[fs]` and `[scoring]` tables mirroring the
//! CLI flags. Secrets (bearer tokens) come only from the environment and are
//! never echoed into manifests; the manifest records key names, not values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use spirit_core::corpus::SegmentMode;

pub const ENV_SCORING_URL: &str = "SPIRIT_SCORING_URL";
pub const ENV_SCORING_TOKEN: &str = "SPIRIT_SCORING_TOKEN";
pub const ENV_GEN_URL: &str = "SPIRIT_GEN_URL";
pub const ENV_GEN_TOKEN: &str = "SPIRIT_GEN_TOKEN";
pub const ENV_CACHE_DIR: &str = "SPIRIT_CACHE_DIR";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub ft: FtSection,
    #[serde(default)]
    pub fs: FsSection,
    #[serde(default)]
    pub scoring: ScoringSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FtSection {
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub strategy: Option<String>,
    pub merge_policy: Option<String>,
    pub merger: Option<String>,
    pub disable_t1: Option<bool>,
    pub min_steps: Option<usize>,
    pub seed: Option<u64>,
    pub score_answer_line: Option<bool>,
    pub recompute_ppl_orig: Option<bool>,
    pub append_answer_hint: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FsSection {
    pub target_steps: Option<usize>,
    pub max_removals: Option<usize>,
    pub ppl_stop_ratio: Option<f64>,
    pub merge: Option<bool>,
    pub merger: Option<String>,
    pub strategy: Option<String>,
    pub seed: Option<u64>,
    pub strict: Option<bool>,
    pub max_tokens: Option<usize>,
    pub stop: Option<Vec<String>>,
    pub calib_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    pub skip_first_token: Option<bool>,
    pub parallelism: Option<usize>,
    pub cache_dir: Option<String>,
    pub score_backend: Option<String>,
    pub gen_backend: Option<String>,
    pub scoring_url: Option<String>,
    pub gen_url: Option<String>,
    pub model: Option<String>,
    pub api_style: Option<String>,
    pub retries: Option<u32>,
    pub segment_mode: Option<String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(path) => {
                let data = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config file {}", path.display()))?;
                toml::from_str(&data)
                    .with_context(|| format!("parsing config file {}", path.display()))
            }
        }
    }
}

/// Flag value wins, then the environment variable, then the file value, then
/// the default.
pub fn resolve<T>(flag: Option<T>, env_key: Option<&str>, file: Option<T>, default: T) -> T
where
    T: std::str::FromStr,
{
    if let Some(v) = flag {
        return v;
    }
    if let Some(key) = env_key {
        if let Ok(raw) = std::env::var(key) {
            if let Ok(v) = raw.parse::<T>() {
                return v;
            }
        }
    }
    file.unwrap_or(default)
}

pub fn parse_segment_mode(s: &str) -> Result<SegmentMode> {
    match s {
        "newline" => Ok(SegmentMode::Newline),
        "sentence" => Ok(SegmentMode::Sentence),
        other => bail!("unknown segment mode {other:?} (use newline or sentence)"),
    }
}

/// Cache directory: flag > env > file; empty string disables persistence.
pub fn resolve_cache_dir(flag: Option<&Path>, file: &ScoringSection) -> Option<PathBuf> {
    if let Some(dir) = flag {
        return Some(dir.to_path_buf());
    }
    if let Ok(dir) = std::env::var(ENV_CACHE_DIR) {
        if !dir.is_empty() {
            return Some(PathBuf::from(dir));
        }
    }
    file.cache_dir
        .as_ref()
        .filter(|d| !d.is_empty())
        .map(PathBuf::from)
}

/// Names of the recognized environment variables that are currently set
/// (recorded in manifests; values never are).
pub fn present_env_keys() -> Vec<String> {
    [
        ENV_SCORING_URL,
        ENV_SCORING_TOKEN,
        ENV_GEN_URL,
        ENV_GEN_TOKEN,
        ENV_CACHE_DIR,
    ]
    .iter()
    .filter(|k| std::env::var(k).is_ok())
    .map(|k| k.to_string())
    .collect()
}
