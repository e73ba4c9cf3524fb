//! Failure analysis for language-model benchmark runs.
//!
//! The pipeline turns raw benchmark run records into an interpretable map of
//! why models fail:
//!
//! 1. [`corpus`] ingests newline-delimited run records, decides which
//!    predictions count as failures, attaches correct predictions from other
//!    models as reference solutions, and samples failures per model/dataset
//!    pair.
//! 2. [`analyzer`] runs a judge model over each failure and parses the
//!    structured diagnosis (criteria, summary, short error label).
//! 3. [`taxonomy`] mines a layered category tree from error-label frequencies
//!    through generate / iterative-update / review rounds.
//! 4. [`assigner`] classifies every error label into one category per layer,
//!    with `Other` / `Hard to Analyze` fallbacks, or applies the shipped
//!    static atlas instead of mining.
//! 5. [`report`] and [`evaluation`] turn assignment tables into prevalence
//!    tables, model diffs, distributions, crosstabs, and validation metrics
//!    (coverage, probe accuracy, robustness, binomial significance).
//!
//! [`gateway`] hosts the prompt templates and the judge clients (live HTTP,
//! deterministic record/replay). [`pipeline`] wires all stages together
//! behind a run manifest; the `errormap` binary is a thin front end over it.
//!
//! Numeric kernels in [`numeric`] are generic over the scalar type via
//! `num-traits`; the pipeline itself runs on [`Scalar`].

pub mod analyzer;
pub mod assigner;
pub mod corpus;
pub mod evaluation;
pub mod gateway;
pub mod numeric;
pub mod pipeline;
pub mod report;
pub mod taxonomy;

/// Scalar type used throughout the pipeline.
pub type Scalar = f64;

pub use analyzer::{AnalysisSummary, CorpusAnalysis, ErrorAnalysis, Verdict, VerdictRecord};
pub use corpus::{
    CaseKey, CorpusIndex, FailureCase, Prediction, RunRecord, ThresholdMode, ThresholdPolicy,
};
pub use gateway::{ChatClient, CompletionRequest, Decoding, Gateway, JudgeResponse};
