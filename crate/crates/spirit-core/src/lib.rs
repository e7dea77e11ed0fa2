//! Refinement of chain-of-thought reasoning data guided by perplexity.
//!
//! The library removes or merges the reasoning steps whose removal least
//! increases (or most decreases) perplexity under a pluggable scoring
//! backend, for two settings:
//!
//! - [`refine_fs`]: refining a shared few-shot demonstration schema against a
//!   calibration set of questions (generation perplexity);
//! - [`refine_ft`]: refining each sample of a fine-tuning corpus against its
//!   own teacher-forced perplexity, with threshold gates and merge-vs-remove
//!   arbitration.
//!
//! [`scoring`] provides the backends (remote HTTP, deterministic n-gram
//! oracle, scripted tables) plus a persistent score cache; [`merge`] rewrites
//! a neighbor step to absorb a removed one; [`analysis`] holds the
//! correlation statistics, answer extraction, the evaluation harness, and
//! trade-off reporting; [`corpus`] is the dataset model and file I/O.

pub mod analysis;
pub mod corpus;
pub mod merge;
pub mod prompt;
pub mod refine_fs;
pub mod refine_ft;
pub mod scoring;
pub mod synthetic;

pub use analysis::{
    answers_match, correlation_study, evaluate, extract_answer, pearson, pearson_p,
    CorrelationResult, Sided, TradeoffPoint,
};
pub use corpus::{
    load_samples, render_reasoning, save_samples, segment_steps, CalibrationSet, CorpusError,
    DemonstrationSet, ReasoningSample, SegmentMode, Step,
};
pub use merge::{MergeError, MergeRequest, MergeResult, Merger, PromptedMerger, RuleMerger};
pub use refine_fs::{refine_demos, FsConfig, FsStop, FsTrace};
pub use refine_ft::{
    refine_dataset, refine_sample, scan_removals, FtConfig, MergePolicy, RefineError,
    RefinementTrace, ScanEntry, Strategy,
};
pub use scoring::{
    perplexity, score_ppl, GenBackend, GenParams, NgramOracle, PplConfig, ScoreBackend,
    ScoreError, ScoreResult, ScriptedGenerator, ScriptedScorer, TokenScore,
};
