//! Deterministic n-gram oracle with additive smoothing: a stand-in language
//! model for offline runs and desk-scale tests.
//!
//! Tokens are whitespace-separated words. For an order-`k` model the context
//! of a token is its `k-1` predecessors in the prompt+continuation stream
//! (shorter near the start of the stream). With add-alpha smoothing,
//!
//! ```text
//! p(v | ctx) = (count(ctx -> v) + alpha) / (count(ctx -> *) + alpha * V)
//! ```
//!
//! so probabilities over the vocabulary sum to 1 for any context, seen or not.
//!
//! The persistence format is plain text so tests can author oracles by hand:
//!
//! ```text
//! ngram-oracle v1
//! order 2
//! alpha 1
//! vocab a b
//! counts
//! 0 a 2
//! 1 a b 2
//! ```
//!
//! Each counts line is `<ctx_len> <ctx tokens...> <token> <count>`; the
//! leading length makes the split unambiguous.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{GenBackend, GenParams, ScoreBackend, ScoreError, ScoreResult, TokenScore};

const UNK: &str = "<unk>";

#[derive(Debug, Clone)]
struct ContextCounts {
    total: u64,
    per_token: HashMap<usize, u64>,
}

#[derive(Debug, Clone)]
pub struct NgramOracle {
    order: usize,
    alpha: f64,
    vocab: Vec<String>,
    vocab_index: HashMap<String, usize>,
    counts: HashMap<Vec<usize>, ContextCounts>,
    id: String,
}

impl NgramOracle {
    /// Trains on an iterator of lines; each line is one token sequence and
    /// context windows do not cross lines. The vocabulary is exactly the set
    /// of distinct training tokens.
    pub fn train<I, S>(order: usize, alpha: f64, lines: I) -> Result<Self, ScoreError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if order == 0 {
            return Err(ScoreError::Backend("n-gram order must be >= 1".into()));
        }
        if !(alpha > 0.0) {
            return Err(ScoreError::Backend(
                "smoothing constant alpha must be > 0".into(),
            ));
        }
        let sequences: Vec<Vec<String>> = lines
            .into_iter()
            .map(|l| super::ws_tokens(l.as_ref()))
            .filter(|toks| !toks.is_empty())
            .collect();
        if sequences.is_empty() {
            return Err(ScoreError::Backend("empty training corpus".into()));
        }
        let mut vocab: Vec<String> = sequences.iter().flatten().cloned().collect();
        vocab.sort();
        vocab.dedup();
        let vocab_index: HashMap<String, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();

        let mut counts: HashMap<Vec<usize>, ContextCounts> = HashMap::new();
        for seq in &sequences {
            let ids: Vec<usize> = seq.iter().map(|t| vocab_index[t]).collect();
            for i in 0..ids.len() {
                let max_ctx = (order - 1).min(i);
                for ctx_len in 0..=max_ctx {
                    let ctx = ids[i - ctx_len..i].to_vec();
                    let entry = counts.entry(ctx).or_insert_with(|| ContextCounts {
                        total: 0,
                        per_token: HashMap::new(),
                    });
                    entry.total += 1;
                    *entry.per_token.entry(ids[i]).or_insert(0) += 1;
                }
            }
        }

        let mut oracle = Self {
            order,
            alpha,
            vocab,
            vocab_index,
            counts,
            id: String::new(),
        };
        oracle.id = format!("ngram-v1-{}", content_hash(&oracle.serialize_text()));
        Ok(oracle)
    }

    /// Adds an `<unk>` token to the vocabulary; out-of-vocabulary input tokens
    /// map onto it instead of failing.
    pub fn with_unk(self) -> Self {
        self.with_extra_vocab([UNK.to_string()])
    }

    /// Extends the vocabulary with tokens that carry no counts. They widen
    /// the smoothing denominator and deepen the uniform floor of unseen
    /// contexts without changing any recorded transition.
    pub fn with_extra_vocab<I>(mut self, extra: I) -> Self
    where
        I: IntoIterator<Item = String>,
    {
        let mut vocab = self.vocab.clone();
        vocab.extend(extra);
        vocab.sort();
        vocab.dedup();
        if vocab == self.vocab {
            return self;
        }
        // Token ids shift; remap the count tables onto the new ordering.
        let new_index: HashMap<String, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let remap: Vec<usize> = self.vocab.iter().map(|t| new_index[t]).collect();
        let counts = self
            .counts
            .drain()
            .map(|(ctx, cc)| {
                let ctx: Vec<usize> = ctx.into_iter().map(|i| remap[i]).collect();
                let per_token = cc
                    .per_token
                    .into_iter()
                    .map(|(t, c)| (remap[t], c))
                    .collect();
                (
                    ctx,
                    ContextCounts {
                        total: cc.total,
                        per_token,
                    },
                )
            })
            .collect();
        self.vocab = vocab;
        self.vocab_index = new_index;
        self.counts = counts;
        self.id = format!("ngram-v1-{}", content_hash(&self.serialize_text()));
        self
    }

    /// Content-derived backend identifier (stable across file paths).
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn token_id(&self, token: &str) -> Result<usize, ScoreError> {
        if let Some(&id) = self.vocab_index.get(token) {
            return Ok(id);
        }
        self.vocab_index
            .get(UNK)
            .copied()
            .ok_or_else(|| ScoreError::UnknownToken(token.to_string()))
    }

    fn tokens_to_ids(&self, text: &str) -> Result<Vec<usize>, ScoreError> {
        super::ws_tokens(text)
            .iter()
            .map(|t| self.token_id(t))
            .collect()
    }

    /// Smoothed conditional probability of vocabulary id `token` given the
    /// context ids.
    fn prob(&self, ctx: &[usize], token: usize) -> f64 {
        let v = self.vocab.len() as f64;
        let (total, count) = match self.counts.get(ctx) {
            Some(cc) => (
                cc.total as f64,
                cc.per_token.get(&token).copied().unwrap_or(0) as f64,
            ),
            None => (0.0, 0.0),
        };
        (count + self.alpha) / (total + self.alpha * v)
    }

    fn context_of<'a>(&self, stream: &'a [usize], pos: usize) -> &'a [usize] {
        let ctx_len = (self.order - 1).min(pos);
        &stream[pos - ctx_len..pos]
    }

    /// Serializes to the plain-text persistence format, sorted for
    /// deterministic output.
    pub fn serialize_text(&self) -> String {
        let mut out = String::new();
        out.push_str("ngram-oracle v1\n");
        out.push_str(&format!("order {}\n", self.order));
        out.push_str(&format!("alpha {}\n", self.alpha));
        out.push_str(&format!("vocab {}\n", self.vocab.join(" ")));
        out.push_str("counts\n");
        let mut lines: BTreeMap<(usize, Vec<String>, String), u64> = BTreeMap::new();
        for (ctx, cc) in &self.counts {
            let ctx_toks: Vec<String> = ctx.iter().map(|&i| self.vocab[i].clone()).collect();
            for (&tok, &count) in &cc.per_token {
                lines.insert((ctx.len(), ctx_toks.clone(), self.vocab[tok].clone()), count);
            }
        }
        for ((ctx_len, ctx, tok), count) in lines {
            let mut fields = vec![ctx_len.to_string()];
            fields.extend(ctx);
            fields.push(tok);
            fields.push(count.to_string());
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ScoreError> {
        fs::write(path, self.serialize_text())
            .map_err(|e| ScoreError::Backend(format!("writing oracle file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        let data = fs::read_to_string(path)
            .map_err(|e| ScoreError::Backend(format!("reading oracle file: {e}")))?;
        Self::parse_text(&data)
    }

    pub fn parse_text(data: &str) -> Result<Self, ScoreError> {
        let bad = |msg: String| ScoreError::Backend(format!("oracle file: {msg}"));
        let mut lines = data.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or_default();
        if header != "ngram-oracle v1" {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut order = None;
        let mut alpha = None;
        let mut vocab: Option<Vec<String>> = None;
        let mut in_counts = false;
        let mut raw_counts: Vec<(usize, Vec<String>, String, u64)> = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if !in_counts {
                if line == "counts" {
                    in_counts = true;
                    continue;
                }
                let (key, rest) = line
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| bad(format!("line {lineno}: malformed header field")))?;
                match key {
                    "order" => {
                        order = Some(rest.trim().parse::<usize>().map_err(|e| {
                            bad(format!("line {lineno}: bad order: {e}"))
                        })?)
                    }
                    "alpha" => {
                        alpha = Some(rest.trim().parse::<f64>().map_err(|e| {
                            bad(format!("line {lineno}: bad alpha: {e}"))
                        })?)
                    }
                    "vocab" => vocab = Some(super::ws_tokens(rest)),
                    other => return Err(bad(format!("line {lineno}: unknown field {other:?}"))),
                }
            } else {
                let fields = super::ws_tokens(line);
                let ctx_len: usize = fields[0]
                    .parse()
                    .map_err(|e| bad(format!("line {lineno}: bad context length: {e}")))?;
                if fields.len() != ctx_len + 3 {
                    return Err(bad(format!(
                        "line {lineno}: expected {} fields, got {}",
                        ctx_len + 3,
                        fields.len()
                    )));
                }
                let ctx = fields[1..1 + ctx_len].to_vec();
                let token = fields[1 + ctx_len].clone();
                let count: u64 = fields[2 + ctx_len]
                    .parse()
                    .map_err(|e| bad(format!("line {lineno}: bad count: {e}")))?;
                raw_counts.push((ctx_len, ctx, token, count));
            }
        }
        let order = order.ok_or_else(|| bad("missing order".into()))?;
        let alpha = alpha.ok_or_else(|| bad("missing alpha".into()))?;
        let mut vocab = vocab.ok_or_else(|| bad("missing vocab".into()))?;
        if order == 0 {
            return Err(bad("order must be >= 1".into()));
        }
        if !(alpha > 0.0) {
            return Err(bad("alpha must be > 0".into()));
        }
        vocab.sort();
        vocab.dedup();
        if vocab.is_empty() {
            return Err(bad("empty vocabulary".into()));
        }
        let vocab_index: HashMap<String, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let mut counts: HashMap<Vec<usize>, ContextCounts> = HashMap::new();
        for (ctx_len, ctx, token, count) in raw_counts {
            if ctx_len > order - 1 {
                return Err(bad(format!(
                    "context of length {ctx_len} exceeds order-1 = {}",
                    order - 1
                )));
            }
            let ctx_ids: Vec<usize> = ctx
                .iter()
                .map(|t| {
                    vocab_index
                        .get(t)
                        .copied()
                        .ok_or_else(|| bad(format!("context token {t:?} not in vocab")))
                })
                .collect::<Result<_, _>>()?;
            let tok_id = vocab_index
                .get(&token)
                .copied()
                .ok_or_else(|| bad(format!("token {token:?} not in vocab")))?;
            let entry = counts.entry(ctx_ids).or_insert_with(|| ContextCounts {
                total: 0,
                per_token: HashMap::new(),
            });
            entry.total += count;
            *entry.per_token.entry(tok_id).or_insert(0) += count;
        }
        let mut oracle = Self {
            order,
            alpha,
            vocab,
            vocab_index,
            counts,
            id: String::new(),
        };
        oracle.id = format!("ngram-v1-{}", content_hash(&oracle.serialize_text()));
        Ok(oracle)
    }

    /// Probability table over the full vocabulary for a raw-token context,
    /// used by normalization checks.
    pub fn distribution(&self, context: &[&str]) -> Result<Vec<f64>, ScoreError> {
        let ctx: Vec<usize> = context
            .iter()
            .map(|t| self.token_id(t))
            .collect::<Result<_, _>>()?;
        let ctx_len = (self.order - 1).min(ctx.len());
        let ctx = &ctx[ctx.len() - ctx_len..];
        Ok((0..self.vocab.len()).map(|v| self.prob(ctx, v)).collect())
    }
}

fn content_hash(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex::encode(&hasher.finalize()[..8])
}

impl ScoreBackend for NgramOracle {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<ScoreResult, ScoreError> {
        let cont_tokens = super::ws_tokens(continuation);
        if cont_tokens.is_empty() {
            return Err(ScoreError::EmptyContinuation);
        }
        let prompt_ids = self.tokens_to_ids(prompt)?;
        let cont_ids: Vec<usize> = cont_tokens
            .iter()
            .map(|t| self.token_id(t))
            .collect::<Result<_, _>>()?;
        let mut stream = prompt_ids.clone();
        stream.extend(&cont_ids);
        let tokens = cont_tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                let pos = prompt_ids.len() + i;
                let ctx = self.context_of(&stream, pos);
                TokenScore {
                    token: tok.clone(),
                    logprob: self.prob(ctx, stream[pos]).ln(),
                }
            })
            .collect();
        Ok(ScoreResult {
            prompt_echo: prompt.to_string(),
            tokens,
            backend_id: self.id.clone(),
        })
    }

    fn count_tokens(&self, text: &str) -> Option<usize> {
        Some(text.split_whitespace().count())
    }
}

impl GenBackend for NgramOracle {
    fn backend_id(&self) -> &str {
        &self.id
    }

    /// Greedy decoding: each step takes the argmax of the smoothed
    /// conditional, ties broken toward the lexicographically smallest token.
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, ScoreError> {
        if params.temperature != 0.0 {
            return Err(ScoreError::Unsupported(
                "the n-gram oracle only generates at temperature 0".into(),
            ));
        }
        let mut stream = self.tokens_to_ids(prompt)?;
        let mut out_tokens: Vec<String> = Vec::new();
        for _ in 0..params.max_tokens {
            let ctx = self.context_of(&stream, stream.len()).to_vec();
            // Vocabulary is sorted, so the first strict maximum is the
            // lexicographically smallest among ties.
            let mut best = 0;
            let mut best_p = f64::NEG_INFINITY;
            for v in 0..self.vocab.len() {
                let p = self.prob(&ctx, v);
                if p > best_p {
                    best_p = p;
                    best = v;
                }
            }
            stream.push(best);
            out_tokens.push(self.vocab[best].clone());
            let text = out_tokens.join(" ");
            for stop in &params.stop {
                if let Some(pos) = text.find(stop.as_str()) {
                    return Ok(text[..pos].trim_end().to_string());
                }
            }
        }
        Ok(out_tokens.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{perplexity, PplConfig};
    use approx::assert_relative_eq;

    fn simple_oracle() -> NgramOracle {
        NgramOracle::train(2, 1.0, ["a b a b"]).unwrap()
    }

    #[test]
    fn hand_evaluated_bigram_probability() {
        // Trained on "a b a b": count(a -> b) = 2, count(a -> *) = 2, V = 2,
        // so p(b | a) = (2 + 1) / (2 + 2) = 3/4.
        let oracle = simple_oracle();
        let result = oracle.score("", "a b").unwrap();
        assert_eq!(result.tokens.len(), 2);
        assert_relative_eq!(
            result.tokens[1].logprob,
            (3.0f64 / 4.0).ln(),
            max_relative = 1e-12
        );
        // First token has empty context: unigram p(a) = (2 + 1) / (4 + 2).
        assert_relative_eq!(
            result.tokens[0].logprob,
            (3.0f64 / 6.0).ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn huge_alpha_approaches_uniform() {
        let oracle = NgramOracle::train(2, 1e12, ["a b a b"]).unwrap();
        let result = oracle.score("", "a b").unwrap();
        let v = oracle.vocab().len() as f64;
        for t in &result.tokens {
            assert_relative_eq!(t.logprob, -(v.ln()), max_relative = 1e-9);
        }
    }

    #[test]
    fn unseen_context_is_exactly_uniform() {
        let oracle = NgramOracle::train(3, 0.5, ["a b c"]).unwrap();
        let dist = oracle.distribution(&["c", "a"]).unwrap();
        let v = oracle.vocab().len() as f64;
        for p in dist {
            assert_relative_eq!(p, 1.0 / v, max_relative = 1e-15);
        }
    }

    #[test]
    fn distributions_sum_to_one() {
        let oracle = NgramOracle::train(2, 0.3, ["a b a c", "b b a"]).unwrap();
        for ctx in [vec![], vec!["a"], vec!["b"], vec!["c"]] {
            let sum: f64 = oracle.distribution(&ctx).unwrap().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum} for ctx {ctx:?}");
        }
    }

    #[test]
    fn greedy_decode_takes_the_argmax() {
        let oracle = simple_oracle();
        let params = GenParams {
            max_tokens: 1,
            ..GenParams::default()
        };
        assert_eq!(oracle.generate("a", &params).unwrap(), "b");
    }

    #[test]
    fn empty_continuation_is_rejected() {
        let oracle = simple_oracle();
        assert!(matches!(
            oracle.score("a", "  "),
            Err(ScoreError::EmptyContinuation)
        ));
    }

    #[test]
    fn oov_without_unk_fails_and_unk_rescues() {
        let oracle = simple_oracle();
        assert!(matches!(
            oracle.score("", "a z"),
            Err(ScoreError::UnknownToken(t)) if t == "z"
        ));
        let oracle = simple_oracle().with_unk();
        assert!(oracle.score("", "a z").is_ok());
    }

    #[test]
    fn save_load_round_trip_preserves_scores() {
        let oracle = NgramOracle::train(3, 0.25, ["a b c a b", "c c a"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.txt");
        oracle.save(&path).unwrap();
        let loaded = NgramOracle::load(&path).unwrap();
        assert_eq!(loaded.id(), oracle.id());
        let a = oracle.score("c", "a b c").unwrap();
        let b = loaded.score("c", "a b c").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_authored_text_format() {
        let text = "ngram-oracle v1\norder 2\nalpha 1\nvocab a b\ncounts\n1 a b 2\n1 b a 1\n0 a 2\n0 b 2\n";
        let oracle = NgramOracle::parse_text(text).unwrap();
        let result = oracle.score("", "a b").unwrap();
        assert_relative_eq!(
            result.tokens[1].logprob,
            (3.0f64 / 4.0).ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn count_matches_score_token_length() {
        let oracle = simple_oracle();
        let text = "a b a";
        let n = ScoreBackend::count_tokens(&oracle, text).unwrap();
        assert_eq!(n, oracle.score("", text).unwrap().tokens.len());
    }

    #[test]
    fn certainty_limit_has_ppl_near_one() {
        // A corpus that is one long deterministic chain gives near-1
        // conditionals with small alpha.
        let line = "x y x y x y x y x y x y x y x y";
        let oracle = NgramOracle::train(2, 1e-9, [line]).unwrap();
        let result = oracle.score("x", "y x y x").unwrap();
        let ppl = perplexity(&result, &PplConfig::default()).unwrap();
        assert!(ppl < 1.0 + 1e-6, "ppl {ppl}");
    }
}
