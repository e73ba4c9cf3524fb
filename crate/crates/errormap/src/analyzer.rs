//! Per-instance error analysis: run the judge over each failure case and
//! parse the structured diagnosis.
//!
//! Verdicts come in three kinds. `Analyzed` carries the full diagnosis;
//! `NoErrorFound` means the judge disagrees that the prediction is wrong
//! (these cases never reach the taxonomy or assignment stages);
//! `WholeSolutionIncorrect` is the judge's sentinel for predictions with no
//! single first error, kept as a countable label of its own.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CaseKey, FailureCase};
use crate::gateway::{extract, Gateway, GatewayError, TemplateId};

/// Sentinel the judge writes into `final_answer` when the entire prediction
/// is wrong.
pub const WHOLE_SOLUTION_SENTINEL: &str = "whole solution incorrect";

pub use crate::gateway::extract::{CriterionAssessment, Quality};

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("judge call failed: {0}")]
    Gateway(#[from] GatewayError),
    #[error("unparsable reply after re-ask: {0}")]
    Unparsable(String),
    #[error("analysis for {case} violates the schema: {message}")]
    InvalidAnalysis { case: CaseKey, message: String },
    #[error("all {0} cases failed analysis")]
    AllCasesFailed(usize),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed verdict record: {message}")]
    MalformedRecord {
        path: String,
        line: usize,
        message: String,
    },
}

/// Structured diagnosis of one failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorAnalysis {
    pub case: CaseKey,
    pub required_criteria: Vec<CriterionAssessment>,
    pub error_summary: String,
    /// Short phrasal label naming the failed skill.
    pub error_label: String,
}

/// Outcome of analyzing one failure case.
#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Analyzed(ErrorAnalysis),
    NoErrorFound,
    WholeSolutionIncorrect(ErrorAnalysis),
}

impl Verdict {
    pub fn kind(&self) -> VerdictKind {
        match self {
            Verdict::Analyzed(_) => VerdictKind::Analyzed,
            Verdict::NoErrorFound => VerdictKind::NoErrorFound,
            Verdict::WholeSolutionIncorrect(_) => VerdictKind::WholeSolutionIncorrect,
        }
    }

    /// The diagnosis, for the verdicts that carry one.
    pub fn analysis(&self) -> Option<&ErrorAnalysis> {
        match self {
            Verdict::Analyzed(a) | Verdict::WholeSolutionIncorrect(a) => Some(a),
            Verdict::NoErrorFound => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Analyzed,
    NoErrorFound,
    WholeSolutionIncorrect,
}

/// One line of the analysis interchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub case: CaseKey,
    pub kind: VerdictKind,
    #[serde(default)]
    pub criteria: Vec<CriterionAssessment>,
    #[serde(default)]
    pub error_summary: String,
    #[serde(default)]
    pub error_label: String,
}

impl VerdictRecord {
    pub fn new(case: CaseKey, verdict: &Verdict) -> Self {
        match verdict {
            Verdict::Analyzed(a) | Verdict::WholeSolutionIncorrect(a) => Self {
                case,
                kind: verdict.kind(),
                criteria: a.required_criteria.clone(),
                error_summary: a.error_summary.clone(),
                error_label: a.error_label.clone(),
            },
            Verdict::NoErrorFound => Self {
                case,
                kind: VerdictKind::NoErrorFound,
                criteria: Vec::new(),
                error_summary: String::new(),
                error_label: String::new(),
            },
        }
    }

    /// Whether this record contributes an error label downstream.
    pub fn is_labeled(&self) -> bool {
        matches!(
            self.kind,
            VerdictKind::Analyzed | VerdictKind::WholeSolutionIncorrect
        )
    }
}

/// One case that could not be analyzed, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case: CaseKey,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub analyzed: usize,
    pub no_error: usize,
    pub whole_incorrect: usize,
    pub failed: usize,
}

/// Everything `analyze_corpus` produces: verdicts in input order, the
/// per-case failures, and the summary counts.
#[derive(Debug, Clone, Default)]
pub struct CorpusAnalysis {
    pub verdicts: Vec<VerdictRecord>,
    pub failures: Vec<CaseFailure>,
    pub summary: AnalysisSummary,
}

/// Bindings for the per-instance prompt of one failure case.
pub fn per_instance_bindings(case: &FailureCase) -> BTreeMap<String, String> {
    let mut bindings = BTreeMap::new();
    bindings.insert("input_text".to_string(), case.input_text.clone());
    bindings.insert("output_text".to_string(), case.wrong_output.clone());
    bindings.insert(
        "correct_answer".to_string(),
        case.references.join("\n"),
    );
    let icps = case
        .icps
        .iter()
        .enumerate()
        .map(|(i, icp)| format!("{}. {}", i + 1, icp))
        .collect::<Vec<_>>()
        .join("\n\n");
    bindings.insert("correct_outputs".to_string(), icps);
    bindings
}

const FORMAT_REMINDER: &str = "Reminder: output exactly one JSON object containing the required_criteria array and the final_answer object with error_summary and error_title, following the format given above.";

fn normalized(text: &str) -> String {
    text.trim().to_ascii_lowercase()
}

/// Turn a parsed payload into a verdict, enforcing the analysis invariants.
fn classify_payload(
    case: &CaseKey,
    payload: extract::ErrorAnalysisPayload,
) -> Result<Verdict, String> {
    let summary = payload.final_answer.error_summary.trim().to_string();
    let title = payload.final_answer.error_title.trim().to_string();
    if summary.is_empty() && title.is_empty() {
        return Ok(Verdict::NoErrorFound);
    }
    let analysis = ErrorAnalysis {
        case: case.clone(),
        required_criteria: payload.required_criteria,
        error_summary: summary,
        error_label: title.clone(),
    };
    if normalized(&title) == WHOLE_SOLUTION_SENTINEL {
        return Ok(Verdict::WholeSolutionIncorrect(analysis));
    }
    if title.is_empty() {
        return Err("error label empty while error_summary is not".to_string());
    }
    if analysis.required_criteria.is_empty() {
        return Err("analyzed verdict carries no criteria".to_string());
    }
    Ok(Verdict::Analyzed(analysis))
}

/// Analyze one failure case with the canonical per-instance template.
pub fn analyze_failure(case: &FailureCase, gateway: &Gateway) -> Result<Verdict, AnalyzeError> {
    analyze_failure_with_template(case, gateway, TemplateId::PerInstance.as_str())
}

/// Analyze one failure case with a specific per-instance template (the
/// robustness probe runs the shipped paraphrases through here).
///
/// An unparsable or schema-violating reply gets exactly one re-ask with a
/// format reminder appended, then the case fails.
pub fn analyze_failure_with_template(
    case: &FailureCase,
    gateway: &Gateway,
    template: &str,
) -> Result<Verdict, AnalyzeError> {
    let bindings = per_instance_bindings(case);
    let prompt = crate::gateway::templates::render_named(template, &bindings)?;
    let key = case.key();

    let reply = gateway.complete(template, prompt.clone())?;
    let first_attempt = extract::extract_error_analysis(&reply.raw_text)
        .map_err(|err| err.to_string())
        .and_then(|payload| classify_payload(&key, payload));
    let first_error = match first_attempt {
        Ok(verdict) => return Ok(verdict),
        Err(message) => message,
    };

    let retry_prompt = format!("{prompt}\n\n{FORMAT_REMINDER}");
    let reply = gateway.complete(template, retry_prompt)?;
    extract::extract_error_analysis(&reply.raw_text)
        .map_err(|err| err.to_string())
        .and_then(|payload| classify_payload(&key, payload))
        .map_err(|second_error| {
            AnalyzeError::Unparsable(format!(
                "{key}: first attempt: {first_error}; retry: {second_error}"
            ))
        })
}

/// Analyze a batch of failure cases with up to `parallelism` concurrent
/// judge calls. Results are in input order regardless of completion order;
/// per-case errors are collected, not fatal, unless every case fails.
pub fn analyze_corpus(
    cases: &[FailureCase],
    gateway: &Gateway,
    parallelism: usize,
) -> Result<CorpusAnalysis, AnalyzeError> {
    let parallelism = parallelism.max(1);
    if cases.is_empty() {
        return Ok(CorpusAnalysis::default());
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<Verdict, AnalyzeError>)>();
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(cases.len()) {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cases.len() {
                    break;
                }
                let result = analyze_failure(&cases[i], gateway);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
    });

    let mut slots: Vec<Option<Result<Verdict, AnalyzeError>>> =
        (0..cases.len()).map(|_| None).collect();
    for (i, result) in rx {
        slots[i] = Some(result);
    }

    let mut analysis = CorpusAnalysis::default();
    for (case, slot) in cases.iter().zip(slots) {
        match slot.expect("every case produced a result") {
            Ok(verdict) => {
                match verdict.kind() {
                    VerdictKind::Analyzed => analysis.summary.analyzed += 1,
                    VerdictKind::NoErrorFound => analysis.summary.no_error += 1,
                    VerdictKind::WholeSolutionIncorrect => analysis.summary.whole_incorrect += 1,
                }
                analysis.verdicts.push(VerdictRecord::new(case.key(), &verdict));
            }
            Err(err) => {
                analysis.summary.failed += 1;
                analysis.failures.push(CaseFailure {
                    case: case.key(),
                    error: err.to_string(),
                });
            }
        }
    }
    if analysis.verdicts.is_empty() {
        return Err(AnalyzeError::AllCasesFailed(analysis.failures.len()));
    }
    Ok(analysis)
}

/// Write verdict records as newline-delimited JSON.
pub fn write_verdicts(path: impl AsRef<Path>, records: &[VerdictRecord]) -> Result<(), AnalyzeError> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|source| AnalyzeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for record in records {
        let line = serde_json::to_string(record).expect("verdict record serializes");
        writeln!(file, "{line}").map_err(|source| AnalyzeError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Read a verdict interchange file.
pub fn read_verdicts(path: impl AsRef<Path>) -> Result<Vec<VerdictRecord>, AnalyzeError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| AnalyzeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AnalyzeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|err| AnalyzeError::MalformedRecord {
                path: path.display().to_string(),
                line: i + 1,
                message: err.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}
