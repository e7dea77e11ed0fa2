//! Subcommand implementations.

pub mod cache;
pub mod correlate;
pub mod eval;
pub mod refine_fs;
pub mod refine_ft;
pub mod report;
pub mod scan;

use anyhow::{bail, Context, Result};
use std::io::Write;
use std::path::Path;

use spirit_core::refine_ft::{MergePolicy, Strategy};

pub fn parse_strategy(s: &str) -> Result<Strategy> {
    Ok(match s {
        "min_ppl" => Strategy::MinPpl,
        "max_ppl" => Strategy::MaxPpl,
        "random" => Strategy::Random,
        other => bail!("unknown strategy {other:?} (min_ppl, max_ppl, random)"),
    })
}

pub fn parse_merge_policy(s: &str) -> Result<MergePolicy> {
    Ok(match s {
        "standard" => MergePolicy::Standard,
        "remove_only" => MergePolicy::RemoveOnly,
        "always_merge" => MergePolicy::AlwaysMerge,
        other => bail!("unknown merge policy {other:?} (standard, remove_only, always_merge)"),
    })
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: serde::Serialize>(items: &[T], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pretty_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `x.jsonl` -> `x.<tag>.jsonl` style sibling paths.
pub fn sibling(path: &Path, tag: &str, ext: &str) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}
