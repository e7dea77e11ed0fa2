//! Statistics (Pearson correlation and its significance), answer extraction
//! and matching, the accuracy evaluation harness, and accuracy-vs-token
//! trade-off reporting.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DemonstrationSet, ReasoningSample};
use crate::prompt::{build_fewshot_prompt, build_zeroshot_prompt};
use crate::scoring::{
    count_tokens, score_ppl, GenBackend, GenParams, PplConfig, ScoreBackend, ScoreError,
    TokenSource,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Report(String),
}

/// Pearson product-moment correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::InvalidInput(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 3 {
        return Err(AnalysisError::InvalidInput(format!(
            "need at least 3 pairs, got {n}"
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::InvalidInput(
            "zero variance in one of the inputs".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sided {
    One,
    Two,
}

/// Correlation with its significance under the t-test with n-2 degrees of
/// freedom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
    pub sided: Sided,
}

/// Significance of a Pearson coefficient: `t = r * sqrt((n-2) / (1 - r^2))`,
/// with the tail probability of the t-distribution evaluated through the
/// regularized incomplete beta function. The one-sided value is half the
/// two-sided tail, on the side of the observed sign.
pub fn pearson_p(r: f64, n: usize, sided: Sided) -> Result<f64, AnalysisError> {
    if !(r.is_finite() && r.abs() <= 1.0) {
        return Err(AnalysisError::InvalidInput(format!(
            "correlation {r} outside [-1, 1]"
        )));
    }
    if n < 3 {
        return Err(AnalysisError::InvalidInput(format!(
            "need at least 3 pairs, got {n}"
        )));
    }
    if r.abs() == 1.0 {
        return Ok(0.0);
    }
    let dof = (n - 2) as f64;
    let t_sq = dof * r * r / (1.0 - r * r);
    let x = dof / (dof + t_sq);
    let two_sided = statrs::function::beta::beta_reg(dof / 2.0, 0.5, x);
    Ok(match sided {
        Sided::Two => two_sided,
        Sided::One => two_sided / 2.0,
    })
}

/// Value following the last case-insensitive `"the answer is"`, truncated at
/// the end of that line and stripped of terminal punctuation. When the tail
/// is an arithmetic rewrite (`"(300 / 60) = 5"`), the value after the final
/// `=` is taken.
pub fn extract_answer(generation: &str) -> Option<String> {
    const MARKER: &str = "the answer is";
    let lower = generation.to_lowercase();
    let pos = lower.rfind(MARKER)?;
    let tail = &generation[pos + MARKER.len()..];
    let tail = tail.split('\n').next().unwrap_or("");
    let mut value = tail.trim().trim_end_matches(['.', '!', '?', ',', ';', ':']);
    if let Some(eq) = value.rfind('=') {
        value = value[eq + 1..]
            .trim()
            .trim_end_matches(['.', '!', '?', ',', ';', ':']);
    }
    let value = value.trim();
    if value.is_empty() {
        None
    } else {
        Some(value.to_string())
    }
}

/// Canonical form for answer comparison: commas and currency symbols are
/// stripped, terminal punctuation dropped, and numerals normalized so that
/// `"12.0"` matches `"12"`.
pub fn normalize_answer(answer: &str) -> String {
    let cleaned: String = answer
        .trim()
        .chars()
        .filter(|c| !matches!(c, ',' | '$' | '€' | '£'))
        .collect();
    let cleaned = cleaned
        .trim()
        .trim_end_matches(['.', '!', '?', ';', ':'])
        .trim()
        .to_lowercase();
    canonical_number(&cleaned).unwrap_or(cleaned)
}

fn canonical_number(s: &str) -> Option<String> {
    let (sign, digits) = match s.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", s),
    };
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit() || c == '.') {
        return None;
    }
    let mut parts = digits.splitn(2, '.');
    let int_part = parts.next().unwrap_or("");
    let frac_part = parts.next();
    if int_part.is_empty() && frac_part.is_none() {
        return None;
    }
    if digits.matches('.').count() > 1 {
        return None;
    }
    let int_norm = {
        let trimmed = int_part.trim_start_matches('0');
        if trimmed.is_empty() {
            "0"
        } else {
            trimmed
        }
    };
    let frac_norm = frac_part.map(|f| f.trim_end_matches('0')).unwrap_or("");
    let body = if frac_norm.is_empty() {
        int_norm.to_string()
    } else {
        format!("{int_norm}.{frac_norm}")
    };
    if body == "0" {
        return Some("0".into());
    }
    Some(format!("{sign}{body}"))
}

/// True when two answers agree after normalization.
pub fn answers_match(a: &str, b: &str) -> bool {
    normalize_answer(a) == normalize_answer(b)
}

/// One accuracy/efficiency measurement for a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub label: String,
    pub accuracy: f64,
    pub mean_generated_tokens: f64,
    pub n_eval: usize,
    pub token_source: TokenSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub generated: String,
    pub extracted: Option<String>,
    pub gold: String,
    pub correct: bool,
    pub generated_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub label: String,
    pub gen_params: GenParams,
    /// Abort on the first generation failure instead of counting it incorrect.
    pub strict: bool,
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            label: "eval".into(),
            gen_params: GenParams::default(),
            strict: false,
            parallelism: 1,
        }
    }
}

/// Runs the test set through the generator (few-shot from `demos`, or
/// zero-shot when `demos` is `None`), scoring answers by normalized exact
/// match against each sample's gold value. Token counts use the scoring
/// backend's tokenizer when one is supplied, else whitespace (flagged).
pub fn evaluate(
    demos: Option<&DemonstrationSet>,
    test_set: &[ReasoningSample],
    generator: &dyn GenBackend,
    token_backend: Option<&dyn ScoreBackend>,
    cfg: &EvalConfig,
) -> Result<(TradeoffPoint, Vec<EvalRecord>), AnalysisError> {
    if test_set.is_empty() {
        return Err(AnalysisError::InvalidInput("empty test set".into()));
    }
    let eval_one = |sample: &ReasoningSample| -> Result<EvalRecord, ScoreError> {
        let prompt = match demos {
            Some(demos) => build_fewshot_prompt(demos, &sample.question),
            None => build_zeroshot_prompt(&sample.question),
        };
        match generator.generate(&prompt, &cfg.gen_params) {
            Ok(generated) => {
                let extracted = extract_answer(&generated);
                let correct = extracted
                    .as_deref()
                    .is_some_and(|e| answers_match(e, &sample.answer_value));
                let (generated_tokens, _) = count_tokens(&generated, token_backend);
                Ok(EvalRecord {
                    sample_id: sample.id.clone(),
                    generated,
                    extracted,
                    gold: sample.answer_value.clone(),
                    correct,
                    generated_tokens,
                    error: None,
                })
            }
            Err(e) if !cfg.strict => Ok(EvalRecord {
                sample_id: sample.id.clone(),
                generated: String::new(),
                extracted: None,
                gold: sample.answer_value.clone(),
                correct: false,
                generated_tokens: 0,
                error: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    };
    let records: Vec<EvalRecord> = run_bounded(cfg.parallelism, test_set, eval_one)?;
    let n_eval = records.len();
    let correct = records.iter().filter(|r| r.correct).count();
    let total_tokens: usize = records.iter().map(|r| r.generated_tokens).sum();
    let token_source = match token_backend {
        Some(b) if b.count_tokens("x").is_some() => TokenSource::Backend,
        _ => TokenSource::Whitespace,
    };
    Ok((
        TradeoffPoint {
            label: cfg.label.clone(),
            accuracy: correct as f64 / n_eval as f64,
            mean_generated_tokens: total_tokens as f64 / n_eval as f64,
            n_eval,
            token_source,
        },
        records,
    ))
}

pub(crate) fn run_bounded<T, R, F>(
    parallelism: usize,
    items: &[T],
    f: F,
) -> Result<Vec<R>, ScoreError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, ScoreError> + Sync,
{
    if parallelism <= 1 {
        items.iter().map(&f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| ScoreError::Backend(format!("thread pool: {e}")))?;
        pool.install(|| items.par_iter().map(&f).collect())
    }
}

/// One removal configuration's measurement in the correlation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPoint {
    pub subset: Vec<usize>,
    pub mean_ppl: f64,
    pub accuracy: f64,
    pub n_questions: usize,
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub gen_params: GenParams,
    pub ppl_cfg: PplConfig,
    pub sided: Sided,
    pub strict: bool,
    pub parallelism: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            gen_params: GenParams::default(),
            ppl_cfg: PplConfig::default(),
            sided: Sided::Two,
            strict: false,
            parallelism: 1,
        }
    }
}

/// For each step-index subset in the plan, deletes those schema positions
/// from every demo, generates one completion per evaluation question, scores
/// its perplexity, and checks its extracted answer; then correlates mean
/// perplexity with accuracy across the subsets.
///
/// One backend generates and another may score, so transfer setups (scores
/// from one model, generations from another) fall out of the wiring.
pub fn correlation_study(
    demos: &DemonstrationSet,
    eval_set: &[ReasoningSample],
    removal_plan: &[Vec<usize>],
    generator: &dyn GenBackend,
    scorer: &dyn ScoreBackend,
    cfg: &StudyConfig,
) -> Result<(Vec<StudyPoint>, Result<CorrelationResult, AnalysisError>), AnalysisError> {
    if removal_plan.is_empty() {
        return Err(AnalysisError::InvalidInput("empty removal plan".into()));
    }
    if eval_set.is_empty() {
        return Err(AnalysisError::InvalidInput("empty evaluation set".into()));
    }
    let mut points = Vec::new();
    for subset in removal_plan {
        for &idx in subset {
            if idx >= demos.schema_len() {
                return Err(AnalysisError::InvalidInput(format!(
                    "removal plan index {idx} out of range for schema of {}",
                    demos.schema_len()
                )));
            }
        }
        let reduced = demos.remove_steps(subset);
        let results = run_bounded(cfg.parallelism, eval_set, |sample| {
            let prompt = build_fewshot_prompt(&reduced, &sample.question);
            let generated = generator.generate(&prompt, &cfg.gen_params)?;
            let ppl = score_ppl(scorer, &prompt, &generated, &cfg.ppl_cfg);
            match ppl {
                Ok(ppl) => {
                    let correct = extract_answer(&generated)
                        .is_some_and(|e| answers_match(&e, &sample.answer_value));
                    Ok((Some(ppl), correct))
                }
                Err(e) if !cfg.strict => {
                    let _ = e;
                    Ok((None, false))
                }
                Err(e) => Err(e),
            }
        })?;
        let ppls: Vec<f64> = results.iter().filter_map(|(p, _)| *p).collect();
        if ppls.is_empty() {
            return Err(AnalysisError::InvalidInput(format!(
                "no scorable generations for subset {subset:?}"
            )));
        }
        let mean_ppl = ppls.iter().sum::<f64>() / ppls.len() as f64;
        let correct = results.iter().filter(|(_, c)| *c).count();
        points.push(StudyPoint {
            subset: subset.clone(),
            mean_ppl,
            accuracy: correct as f64 / eval_set.len() as f64,
            n_questions: eval_set.len(),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.mean_ppl).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    let correlation = pearson(&xs, &ys).and_then(|r| {
        Ok(CorrelationResult {
            r,
            p_value: pearson_p(r, points.len(), cfg.sided)?,
            n: points.len(),
            sided: cfg.sided,
        })
    });
    Ok((points, correlation))
}

const REPORT_HEADER: &str = "label,accuracy,mean_tokens,n_eval,token_source";

/// Emits the trade-off table as CSV, one row per configuration, sorted
/// ascending by mean generated tokens.
pub fn report(points: &[TradeoffPoint], path: &Path) -> Result<(), AnalysisError> {
    fs::write(path, render_report(points)?)?;
    Ok(())
}

pub fn render_report(points: &[TradeoffPoint]) -> Result<String, AnalysisError> {
    if points.is_empty() {
        return Err(AnalysisError::InvalidInput("no trade-off points".into()));
    }
    let mut sorted: Vec<&TradeoffPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.mean_generated_tokens
            .partial_cmp(&b.mean_generated_tokens)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for p in sorted {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_quote(&p.label),
            p.accuracy,
            p.mean_generated_tokens,
            p.n_eval,
            p.token_source
        ));
    }
    Ok(out)
}

/// Parses a report emitted by [`render_report`].
pub fn parse_report(data: &str) -> Result<Vec<TradeoffPoint>, AnalysisError> {
    let mut lines = data.lines();
    let header = lines.next().unwrap_or_default();
    if header != REPORT_HEADER {
        return Err(AnalysisError::Report(format!(
            "unexpected header {header:?}"
        )));
    }
    let mut points = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_csv(line);
        if fields.len() != 5 {
            return Err(AnalysisError::Report(format!(
                "row {}: expected 5 fields, got {}",
                idx + 2,
                fields.len()
            )));
        }
        let bad = |what: &str, e: String| {
            AnalysisError::Report(format!("row {}: bad {what}: {e}", idx + 2))
        };
        points.push(TradeoffPoint {
            label: fields[0].clone(),
            accuracy: fields[1].parse().map_err(|e: std::num::ParseFloatError| {
                bad("accuracy", e.to_string())
            })?,
            mean_generated_tokens: fields[2].parse().map_err(
                |e: std::num::ParseFloatError| bad("mean_tokens", e.to_string()),
            )?,
            n_eval: fields[3]
                .parse()
                .map_err(|e: std::num::ParseIntError| bad("n_eval", e.to_string()))?,
            token_source: match fields[4].as_str() {
                "backend" => TokenSource::Backend,
                "whitespace" => TokenSource::Whitespace,
                other => return Err(bad("token_source", format!("{other:?}"))),
            },
        });
    }
    Ok(points)
}

fn csv_quote(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn split_csv(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted => {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    cur.push('"');
                } else {
                    quoted = false;
                }
            }
            '"' if cur.is_empty() => quoted = true,
            ',' if !quoted => {
                fields.push(std::mem::take(&mut cur));
            }
            c => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}
