//! Run-record ingestion, failure marking, reference-solution extraction, and
//! proportional sampling.
//!
//! The run format is newline-delimited: one prediction per line with fields
//! exactly `{dataset, instance_id, input, references, metadata, model,
//! output, score, max_score}`. Lines sharing `(dataset, instance_id)` merge
//! into one [`RunRecord`]; a run set may span multiple files. Any malformed
//! line rejects the whole load — analyses feed statistics, so silent drops
//! would bias them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{origin}:{line}: malformed run record: {message}")]
    Malformed {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("{origin}:{line}: max_score must be positive, got {max_score}")]
    NonPositiveMaxScore {
        origin: String,
        line: usize,
        max_score: f64,
    },
    #[error("{origin}:{line}: score {score} outside [0, {max_score}]")]
    ScoreOutOfRange {
        origin: String,
        line: usize,
        score: f64,
        max_score: f64,
    },
    #[error("{origin}:{line}: duplicate prediction for ({dataset}, {instance}) by model {model}")]
    DuplicatePrediction {
        origin: String,
        line: usize,
        dataset: String,
        instance: String,
        model: String,
    },
    #[error("{origin}:{line}: ({dataset}, {instance}) disagrees with an earlier line on {field}")]
    InconsistentInstance {
        origin: String,
        line: usize,
        dataset: String,
        instance: String,
        field: &'static str,
    },
    #[error("binary threshold mode but ({dataset}, {instance}, {model}) has score {score} with max {max_score}")]
    NonBinaryScore {
        dataset: String,
        instance: String,
        model: String,
        score: f64,
        max_score: f64,
    },
    #[error("threshold fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("sample rate {0} outside (0, 1]")]
    InvalidSampleRate(f64),
    #[error("instance ({dataset}, {instance}) not present in the run set")]
    UnknownInstance { dataset: String, instance: String },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Identity of one analyzed prediction: which model failed on which instance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CaseKey {
    pub dataset: String,
    pub instance: String,
    pub model: String,
}

impl CaseKey {
    pub fn new(
        dataset: impl Into<String>,
        instance: impl Into<String>,
        model: impl Into<String>,
    ) -> Self {
        Self {
            dataset: dataset.into(),
            instance: instance.into(),
            model: model.into(),
        }
    }
}

impl std::fmt::Display for CaseKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.dataset, self.instance, self.model)
    }
}

/// One model's scored output on an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub model_id: String,
    pub output_text: String,
    pub score: f64,
    pub max_score: f64,
}

/// One benchmark instance with every model's prediction on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset_id: String,
    pub instance_id: String,
    pub input_text: String,
    pub references: Vec<String>,
    pub metadata: BTreeMap<String, String>,
    pub predictions: Vec<Prediction>,
}

/// How scored predictions are split into failures and successes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Scores must be exactly 0 or max; 0 is a failure.
    Binary,
    /// A score strictly below `fraction * max_score` is a failure.
    #[default]
    Fraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub mode: ThresholdMode,
    pub fraction: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            mode: ThresholdMode::Fraction,
            fraction: 0.7,
        }
    }
}

impl ThresholdPolicy {
    pub fn binary() -> Self {
        Self {
            mode: ThresholdMode::Binary,
            fraction: 0.0,
        }
    }

    pub fn fraction(fraction: f64) -> Result<Self, CorpusError> {
        if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
            return Err(CorpusError::InvalidFraction(fraction));
        }
        Ok(Self {
            mode: ThresholdMode::Fraction,
            fraction,
        })
    }

    /// Whether a prediction counts as a failure under this policy.
    ///
    /// The comparison is strict: a score exactly at the threshold counts as
    /// success.
    pub fn is_failure(&self, record: &RunRecord, p: &Prediction) -> Result<bool, CorpusError> {
        match self.mode {
            ThresholdMode::Binary => {
                if p.score != 0.0 && p.score != p.max_score {
                    return Err(CorpusError::NonBinaryScore {
                        dataset: record.dataset_id.clone(),
                        instance: record.instance_id.clone(),
                        model: p.model_id.clone(),
                        score: p.score,
                        max_score: p.max_score,
                    });
                }
                Ok(p.score == 0.0)
            }
            ThresholdMode::Fraction => {
                if !(0.0..=1.0).contains(&self.fraction) {
                    return Err(CorpusError::InvalidFraction(self.fraction));
                }
                Ok(p.score < self.fraction * p.max_score)
            }
        }
    }
}

/// A failed prediction bundled with everything a judge needs to diagnose it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub dataset_id: String,
    pub instance_id: String,
    pub model_id: String,
    pub input_text: String,
    pub references: Vec<String>,
    /// Correct outputs from other models on the same instance, at most
    /// [`DEFAULT_ICP_LIMIT`] of them.
    pub icps: Vec<String>,
    pub wrong_output: String,
}

impl FailureCase {
    pub fn key(&self) -> CaseKey {
        CaseKey::new(&self.dataset_id, &self.instance_id, &self.model_id)
    }
}

/// Maximum number of correct reference predictions attached to a failure.
pub const DEFAULT_ICP_LIMIT: usize = 3;

/// One prediction line of the run format.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunLine {
    dataset: String,
    instance_id: String,
    input: String,
    #[serde(default)]
    references: Vec<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    model: String,
    output: String,
    score: f64,
    max_score: f64,
}

/// Load run records from a reader of newline-delimited records.
///
/// `origin` names the source in errors (a path, or `"<stream>"`).
pub fn load_runs_from_reader<R: Read>(
    reader: R,
    origin: &str,
) -> Result<Vec<RunRecord>, CorpusError> {
    let mut records: Vec<RunRecord> = Vec::new();
    let mut index: BTreeMap<(String, String), usize> = BTreeMap::new();
    merge_reader_into(reader, origin, &mut records, &mut index)?;
    Ok(records)
}

/// Load run records from a single file.
pub fn load_runs(path: impl AsRef<Path>) -> Result<Vec<RunRecord>, CorpusError> {
    load_run_files(&[path.as_ref().to_path_buf()])
}

/// Load and merge run records from several files; predictions for the same
/// `(dataset, instance_id)` key are merged across files.
pub fn load_run_files(paths: &[std::path::PathBuf]) -> Result<Vec<RunRecord>, CorpusError> {
    let mut records: Vec<RunRecord> = Vec::new();
    let mut index: BTreeMap<(String, String), usize> = BTreeMap::new();
    for path in paths {
        let origin = path.display().to_string();
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: origin.clone(),
            source,
        })?;
        merge_reader_into(file, &origin, &mut records, &mut index)?;
    }
    Ok(records)
}

fn merge_reader_into<R: Read>(
    reader: R,
    origin: &str,
    records: &mut Vec<RunRecord>,
    index: &mut BTreeMap<(String, String), usize>,
) -> Result<(), CorpusError> {
    let reader = BufReader::new(reader);
    for (line_idx, line) in reader.lines().enumerate() {
        let line_no = line_idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: origin.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RunLine =
            serde_json::from_str(&line).map_err(|err| CorpusError::Malformed {
                origin: origin.to_string(),
                line: line_no,
                message: err.to_string(),
            })?;
        if !(parsed.max_score > 0.0) {
            return Err(CorpusError::NonPositiveMaxScore {
                origin: origin.to_string(),
                line: line_no,
                max_score: parsed.max_score,
            });
        }
        if !(0.0..=parsed.max_score).contains(&parsed.score) {
            return Err(CorpusError::ScoreOutOfRange {
                origin: origin.to_string(),
                line: line_no,
                score: parsed.score,
                max_score: parsed.max_score,
            });
        }
        let key = (parsed.dataset.clone(), parsed.instance_id.clone());
        let prediction = Prediction {
            model_id: parsed.model,
            output_text: parsed.output,
            score: parsed.score,
            max_score: parsed.max_score,
        };
        match index.get(&key) {
            Some(&at) => {
                let record = &mut records[at];
                let mismatch = if record.input_text != parsed.input {
                    Some("input")
                } else if record.references != parsed.references {
                    Some("references")
                } else if record.metadata != parsed.metadata {
                    Some("metadata")
                } else {
                    None
                };
                if let Some(field) = mismatch {
                    return Err(CorpusError::InconsistentInstance {
                        origin: origin.to_string(),
                        line: line_no,
                        dataset: key.0,
                        instance: key.1,
                        field,
                    });
                }
                if record
                    .predictions
                    .iter()
                    .any(|p| p.model_id == prediction.model_id)
                {
                    return Err(CorpusError::DuplicatePrediction {
                        origin: origin.to_string(),
                        line: line_no,
                        dataset: key.0,
                        instance: key.1,
                        model: prediction.model_id,
                    });
                }
                record.predictions.push(prediction);
            }
            None => {
                index.insert(key, records.len());
                records.push(RunRecord {
                    dataset_id: parsed.dataset,
                    instance_id: parsed.instance_id,
                    input_text: parsed.input,
                    references: parsed.references,
                    metadata: parsed.metadata,
                    predictions: vec![prediction],
                });
            }
        }
    }
    Ok(())
}

/// Mark every prediction below the threshold as a failure case (reference
/// solutions not yet attached).
pub fn mark_failures(
    records: &[RunRecord],
    policy: &ThresholdPolicy,
) -> Result<Vec<FailureCase>, CorpusError> {
    let mut cases = Vec::new();
    for record in records {
        for p in &record.predictions {
            if policy.is_failure(record, p)? {
                cases.push(FailureCase {
                    dataset_id: record.dataset_id.clone(),
                    instance_id: record.instance_id.clone(),
                    model_id: p.model_id.clone(),
                    input_text: record.input_text.clone(),
                    references: record.references.clone(),
                    icps: Vec::new(),
                    wrong_output: p.output_text.clone(),
                });
            }
        }
    }
    Ok(cases)
}

/// Lookup index over run records by `(dataset, instance)`.
pub struct CorpusIndex<'a> {
    by_key: BTreeMap<(&'a str, &'a str), &'a RunRecord>,
}

impl<'a> CorpusIndex<'a> {
    pub fn new(records: &'a [RunRecord]) -> Self {
        let by_key = records
            .iter()
            .map(|r| ((r.dataset_id.as_str(), r.instance_id.as_str()), r))
            .collect();
        Self { by_key }
    }

    pub fn get(&self, dataset: &str, instance: &str) -> Option<&'a RunRecord> {
        self.by_key.get(&(dataset, instance)).copied()
    }

    /// Metadata for an instance, if the instance is known.
    pub fn metadata(&self, dataset: &str, instance: &str) -> Option<&'a BTreeMap<String, String>> {
        self.get(dataset, instance).map(|r| &r.metadata)
    }
}

/// Attach up to `k` correct predictions from other models to a failure case.
///
/// Selection is deterministic: correct predictions sorted by model id, the
/// failing model excluded. Idempotent — the list is recomputed from scratch.
pub fn attach_icps(
    mut case: FailureCase,
    index: &CorpusIndex<'_>,
    policy: &ThresholdPolicy,
    k: usize,
) -> Result<FailureCase, CorpusError> {
    let record = index
        .get(&case.dataset_id, &case.instance_id)
        .ok_or_else(|| CorpusError::UnknownInstance {
            dataset: case.dataset_id.clone(),
            instance: case.instance_id.clone(),
        })?;
    let mut correct: Vec<&Prediction> = Vec::new();
    for p in &record.predictions {
        if p.model_id == case.model_id {
            continue;
        }
        if !policy.is_failure(record, p)? {
            correct.push(p);
        }
    }
    correct.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    case.icps = correct
        .into_iter()
        .take(k)
        .map(|p| p.output_text.clone())
        .collect();
    Ok(case)
}

/// Attach reference solutions to every case.
pub fn attach_all_icps(
    cases: Vec<FailureCase>,
    records: &[RunRecord],
    policy: &ThresholdPolicy,
    k: usize,
) -> Result<Vec<FailureCase>, CorpusError> {
    let index = CorpusIndex::new(records);
    cases
        .into_iter()
        .map(|case| attach_icps(case, &index, policy, k))
        .collect()
}

/// Deterministic RNG namespaced by a seed and a list of string parts.
///
/// The same `(seed, parts)` always yields the same stream, independent of
/// platform and of any other RNG use in the run.
pub fn derive_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        hasher.update([0x1f]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Deterministic sub-seed namespaced like [`derive_rng`].
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        hasher.update([0x1f]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Sample failures per `(model, dataset)` group: each group of size `n`
/// contributes `ceil(rate * n)` cases chosen uniformly without replacement.
///
/// Original corpus order is preserved in the output. Identical seeds yield
/// identical samples.
pub fn sample_failures(
    cases: &[FailureCase],
    rate: f64,
    seed: u64,
) -> Result<Vec<FailureCase>, CorpusError> {
    if !(rate > 0.0 && rate <= 1.0) || !rate.is_finite() {
        return Err(CorpusError::InvalidSampleRate(rate));
    }
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, case) in cases.iter().enumerate() {
        groups
            .entry((case.model_id.as_str(), case.dataset_id.as_str()))
            .or_default()
            .push(i);
    }
    let mut selected = vec![false; cases.len()];
    for ((model, dataset), indices) in groups {
        let take = group_sample_size(rate, indices.len());
        let mut rng = derive_rng(seed, &["sample", model, dataset]);
        let mut pool = indices;
        // Partial Fisher-Yates: the first `take` slots end up holding a
        // uniform draw without replacement.
        for i in 0..take {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        for &idx in &pool[..take] {
            selected[idx] = true;
        }
    }
    Ok(cases
        .iter()
        .zip(selected)
        .filter(|(_, keep)| *keep)
        .map(|(case, _)| case.clone())
        .collect())
}

/// Sample size for one group: `ceil(rate * n)`, never zero for a nonempty
/// group. The tiny slack tolerates f64 representation error in rates like
/// 0.1, where `0.1 * 200` lands just above 20.
pub fn group_sample_size(rate: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = (rate * n as f64 - 1e-9).ceil() as usize;
    raw.clamp(1, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn line(dataset: &str, instance: &str, model: &str, score: f64, max: f64) -> String {
        format!(
            r#"{{"dataset":"{dataset}","instance_id":"{instance}","input":"q-{instance}","references":["ref"],"metadata":{{}},"model":"{model}","output":"out-{model}-{instance}","score":{score},"max_score":{max}}}"#
        )
    }

    fn small_fixture() -> String {
        let mut lines = Vec::new();
        for instance in ["i1", "i2", "i3"] {
            for model in ["m1", "m2"] {
                let score = if model == "m1" { 0.0 } else { 1.0 };
                lines.push(line("ds", instance, model, score, 1.0));
            }
        }
        lines.join("\n")
    }

    #[test]
    fn empty_stream_yields_empty_list() {
        let records = load_runs_from_reader(Cursor::new(""), "<stream>").unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn fixture_of_three_instances_two_models() {
        let records = load_runs_from_reader(Cursor::new(small_fixture()), "<stream>").unwrap();
        assert_eq!(records.len(), 3);
        for record in &records {
            assert_eq!(record.predictions.len(), 2);
        }
    }

    #[test]
    fn score_above_max_names_the_line() {
        let text = format!("{}\n{}", line("ds", "i1", "m1", 1.0, 1.0), line("ds", "i2", "m1", 2.0, 1.0));
        let err = load_runs_from_reader(Cursor::new(text), "<stream>").unwrap_err();
        match err {
            CorpusError::ScoreOutOfRange { line, score, .. } => {
                assert_eq!(line, 2);
                assert_eq!(score, 2.0);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn non_positive_max_score_rejected() {
        let err =
            load_runs_from_reader(Cursor::new(line("ds", "i1", "m1", 0.0, 0.0)), "<stream>")
                .unwrap_err();
        assert!(matches!(err, CorpusError::NonPositiveMaxScore { line: 1, .. }));
    }

    #[test]
    fn malformed_line_rejects_whole_load() {
        let text = format!("{}\nnot json", line("ds", "i1", "m1", 1.0, 1.0));
        let err = load_runs_from_reader(Cursor::new(text), "<stream>").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }));
    }

    #[test]
    fn duplicate_model_for_instance_rejected() {
        let text = format!(
            "{}\n{}",
            line("ds", "i1", "m1", 1.0, 1.0),
            line("ds", "i1", "m1", 0.0, 1.0)
        );
        let err = load_runs_from_reader(Cursor::new(text), "<stream>").unwrap_err();
        assert!(matches!(err, CorpusError::DuplicatePrediction { .. }));
    }

    #[test]
    fn binary_policy_marks_zero_scores() {
        let records = load_runs_from_reader(Cursor::new(small_fixture()), "<stream>").unwrap();
        let cases = mark_failures(&records, &ThresholdPolicy::binary()).unwrap();
        assert_eq!(cases.len(), 3);
        assert!(cases.iter().all(|c| c.model_id == "m1"));
    }

    #[test]
    fn binary_policy_rejects_fractional_score() {
        let records =
            load_runs_from_reader(Cursor::new(line("ds", "i1", "m1", 0.5, 1.0)), "<stream>")
                .unwrap();
        let err = mark_failures(&records, &ThresholdPolicy::binary()).unwrap_err();
        assert!(matches!(err, CorpusError::NonBinaryScore { .. }));
    }

    #[test]
    fn fraction_threshold_is_strict() {
        let policy = ThresholdPolicy::fraction(0.7).unwrap();
        let mk = |score: f64| {
            load_runs_from_reader(Cursor::new(line("ds", "i1", "m1", score, 1.0)), "<stream>")
                .unwrap()
        };
        let below = mark_failures(&mk(0.65), &policy).unwrap();
        assert_eq!(below.len(), 1);
        // A score exactly at the threshold counts as success.
        let at = mark_failures(&mk(0.70), &policy).unwrap();
        assert!(at.is_empty());
    }

    #[test]
    fn failures_partition_predictions() {
        let records = load_runs_from_reader(Cursor::new(small_fixture()), "<stream>").unwrap();
        let policy = ThresholdPolicy::default();
        let failures = mark_failures(&records, &policy).unwrap();
        let total: usize = records.iter().map(|r| r.predictions.len()).sum();
        let mut successes = 0usize;
        for record in &records {
            for p in &record.predictions {
                if !policy.is_failure(record, p).unwrap() {
                    successes += 1;
                }
            }
        }
        assert_eq!(failures.len() + successes, total);
    }

    fn icp_fixture(correct_models: usize) -> Vec<RunRecord> {
        let mut lines = vec![line("ds", "i1", "loser", 0.0, 1.0)];
        for i in 0..correct_models {
            lines.push(line("ds", "i1", &format!("w{i}"), 1.0, 1.0));
        }
        load_runs_from_reader(Cursor::new(lines.join("\n")), "<stream>").unwrap()
    }

    #[test]
    fn icps_capped_at_k_in_model_id_order() {
        let records = icp_fixture(5);
        let policy = ThresholdPolicy::binary();
        let cases = mark_failures(&records, &policy).unwrap();
        let case = attach_icps(
            cases[0].clone(),
            &CorpusIndex::new(&records),
            &policy,
            3,
        )
        .unwrap();
        assert_eq!(case.icps.len(), 3);
        assert_eq!(
            case.icps,
            vec!["out-w0-i1", "out-w1-i1", "out-w2-i1"]
        );
    }

    #[test]
    fn no_other_correct_model_means_empty_icps() {
        let records = icp_fixture(0);
        let policy = ThresholdPolicy::binary();
        let cases = mark_failures(&records, &policy).unwrap();
        let case =
            attach_icps(cases[0].clone(), &CorpusIndex::new(&records), &policy, 3).unwrap();
        assert!(case.icps.is_empty());
    }

    #[test]
    fn only_failing_model_answered_means_empty_icps() {
        let records =
            load_runs_from_reader(Cursor::new(line("ds", "i1", "solo", 0.0, 1.0)), "<stream>")
                .unwrap();
        let policy = ThresholdPolicy::binary();
        let cases = mark_failures(&records, &policy).unwrap();
        let case =
            attach_icps(cases[0].clone(), &CorpusIndex::new(&records), &policy, 3).unwrap();
        assert!(case.icps.is_empty());
    }

    #[test]
    fn attach_icps_is_idempotent() {
        let records = icp_fixture(4);
        let policy = ThresholdPolicy::binary();
        let index = CorpusIndex::new(&records);
        let cases = mark_failures(&records, &policy).unwrap();
        let once = attach_icps(cases[0].clone(), &index, &policy, 3).unwrap();
        let twice = attach_icps(once.clone(), &index, &policy, 3).unwrap();
        assert_eq!(once, twice);
    }

    fn synthetic_cases(model: &str, dataset: &str, n: usize) -> Vec<FailureCase> {
        (0..n)
            .map(|i| FailureCase {
                dataset_id: dataset.to_string(),
                instance_id: format!("i{i}"),
                model_id: model.to_string(),
                input_text: String::new(),
                references: Vec::new(),
                icps: Vec::new(),
                wrong_output: String::new(),
            })
            .collect()
    }

    #[test]
    fn sample_sizes_are_exact_ceil() {
        assert_eq!(group_sample_size(0.1, 200), 20);
        assert_eq!(group_sample_size(0.1, 5), 1);
        assert_eq!(group_sample_size(1.0, 7), 7);
        assert_eq!(group_sample_size(0.3, 10), 3);
        assert_eq!(group_sample_size(0.25, 10), 3);
    }

    #[test]
    fn full_rate_keeps_original_order() {
        let cases = synthetic_cases("m", "ds", 9);
        let sampled = sample_failures(&cases, 1.0, 7).unwrap();
        assert_eq!(sampled, cases);
    }

    #[test]
    fn same_seed_same_sample() {
        let cases = synthetic_cases("m", "ds", 50);
        let a = sample_failures(&cases, 0.2, 99).unwrap();
        let b = sample_failures(&cases, 0.2, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn distinct_seeds_vary_the_sample() {
        let cases = synthetic_cases("m", "ds", 20);
        let mut distinct = std::collections::BTreeSet::new();
        for seed in 0..100u64 {
            let sampled = sample_failures(&cases, 0.3, seed).unwrap();
            let ids: Vec<String> = sampled.into_iter().map(|c| c.instance_id).collect();
            distinct.insert(ids);
        }
        assert!(distinct.len() >= 2);
    }

    #[test]
    fn sampling_is_per_group() {
        let mut cases = synthetic_cases("m1", "ds1", 10);
        cases.extend(synthetic_cases("m2", "ds1", 5));
        cases.extend(synthetic_cases("m1", "ds2", 3));
        let sampled = sample_failures(&cases, 0.4, 1).unwrap();
        let count = |model: &str, dataset: &str| {
            sampled
                .iter()
                .filter(|c| c.model_id == model && c.dataset_id == dataset)
                .count()
        };
        assert_eq!(count("m1", "ds1"), 4);
        assert_eq!(count("m2", "ds1"), 2);
        assert_eq!(count("m1", "ds2"), 2);
    }

    #[test]
    fn invalid_rate_rejected() {
        let cases = synthetic_cases("m", "ds", 3);
        assert!(sample_failures(&cases, 0.0, 1).is_err());
        assert!(sample_failures(&cases, 1.5, 1).is_err());
    }

    #[test]
    fn multi_file_merge_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        std::fs::write(&p1, line("ds", "i1", "m1", 1.0, 1.0)).unwrap();
        std::fs::write(&p2, line("ds", "i1", "m2", 0.0, 1.0)).unwrap();
        let records = load_run_files(&[p1, p2]).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].predictions.len(), 2);
    }
}
