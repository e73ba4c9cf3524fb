//! Label assignment: classify each analyzed error into exactly one category
//! per layer, with `Other` / `Hard to Analyze` fallbacks, plus the static
//! atlas fast path that skips mining entirely.
//!
//! Classification is label-level: unique labels are classified once and the
//! mapping is broadcast to all cases sharing a label, which cuts judge calls
//! by the duplication factor.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::VerdictRecord;
use crate::corpus::CaseKey;
use crate::gateway::extract;
use crate::gateway::templates::{self, TemplateId};
use crate::gateway::{Gateway, GatewayError};
use crate::taxonomy::{self, Category, LabelCount, Taxonomy, TaxonomyConfig, TaxonomyNode};

/// Reserved fallback for labels no category fits.
pub const OTHER: &str = "Other";
/// Reserved fallback for labels without enough information to classify.
pub const HARD_TO_ANALYZE: &str = "Hard to Analyze";

#[derive(Debug, Error)]
pub enum AssignError {
    #[error("no labeled verdicts to assign")]
    NoLabels,
    #[error("no categories to classify into")]
    NoCategories,
    #[error("batch of {got} labels exceeds classify_batch_size {limit}")]
    BatchTooLarge { got: usize, limit: usize },
    #[error("judge call failed: {0}")]
    Gateway(#[from] GatewayError),
    #[error("classification reply unparsable after re-ask: {0}")]
    Unparsable(String),
    #[error("case {0} appears more than once in the analyses")]
    DuplicateCase(CaseKey),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed assignment record: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
}

/// Where one case's error label landed: the category names along the tree
/// walk, root first. A path ends early at a reserved name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub label: String,
    pub path: Vec<String>,
}

/// Mapping from every analyzed case to its category path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignmentTable {
    pub entries: BTreeMap<CaseKey, Assignment>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AssignmentLine {
    case: CaseKey,
    label: String,
    path: Vec<String>,
}

impl AssignmentTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Layer-1 category of one case.
    pub fn root_category(&self, case: &CaseKey) -> Option<&str> {
        self.entries
            .get(case)
            .and_then(|a| a.path.first())
            .map(String::as_str)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AssignError> {
        let path = path.as_ref();
        let mut file = File::create(path).map_err(|source| AssignError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for (case, assignment) in &self.entries {
            let line = AssignmentLine {
                case: case.clone(),
                label: assignment.label.clone(),
                path: assignment.path.clone(),
            };
            let json = serde_json::to_string(&line).expect("assignment line serializes");
            writeln!(file, "{json}").map_err(|source| AssignError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AssignError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| AssignError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut table = AssignmentTable::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| AssignError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: AssignmentLine =
                serde_json::from_str(&line).map_err(|err| AssignError::Malformed {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: err.to_string(),
                })?;
            table.entries.insert(
                parsed.case,
                Assignment {
                    label: parsed.label,
                    path: parsed.path,
                },
            );
        }
        Ok(table)
    }
}

/// The static category list shipped with the repo for the mining-free
/// assignment mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atlas {
    pub version: String,
    pub categories: Vec<Category>,
}

impl Atlas {
    /// The category list embedded in the crate, sorted most to least
    /// prevalent.
    pub fn builtin() -> Self {
        serde_json::from_str(include_str!("../data/atlas.json")).expect("embedded atlas parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AssignError> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|source| AssignError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&body).map_err(|err| AssignError::Malformed {
            path: path.display().to_string(),
            line: 0,
            message: err.to_string(),
        })
    }
}

/// Whitespace- and case-normalized form used for category-name matching.
/// Fuzzy matching is deliberately absent so fallback behavior stays
/// auditable.
fn normalized(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_ascii_lowercase()
}

/// Whether a category name is one of the reserved fallbacks.
pub fn is_reserved(name: &str) -> bool {
    let n = normalized(name);
    n == normalized(OTHER) || n == normalized(HARD_TO_ANALYZE)
}

/// Strip a leading `12. ` enumeration, as judges sometimes echo the numbered
/// input.
fn strip_enumeration(text: &str) -> &str {
    let trimmed = text.trim_start();
    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        if let Some(rest) = trimmed[digits..].strip_prefix('.') {
            return rest.trim_start();
        }
    }
    trimmed
}

/// Numbered label list carried in a classification prompt's data section.
/// Mainly for scripted judges in tests and fixture tooling.
pub fn labels_in_classify_prompt(prompt: &str) -> Vec<String> {
    let marker = "Assign a single category to each of the following errors:\n\n";
    let Some(at) = prompt.find(marker) else {
        return Vec::new();
    };
    prompt[at + marker.len()..]
        .lines()
        .take_while(|line| !line.trim().is_empty())
        .map(|line| strip_enumeration(line).to_string())
        .collect()
}

fn classify_bindings(categories: &[Category], labels: &[&str]) -> BTreeMap<String, String> {
    let data = labels
        .iter()
        .enumerate()
        .map(|(i, label)| format!("{}. {}", i + 1, label))
        .collect::<Vec<_>>()
        .join("\n");
    let mut bindings = BTreeMap::new();
    bindings.insert(
        "taxonomy".to_string(),
        taxonomy::clusters_to_json(categories),
    );
    bindings.insert("data".to_string(), data);
    bindings.insert("data_type".to_string(), "error list".to_string());
    bindings
}

/// Resolve one reply against the open labels. Returns the labels still
/// unresolved (missing from the reply or mapped to an unknown name).
fn resolve_reply(
    entries: &[extract::ClassifiedError],
    open: &[&str],
    canonical: &BTreeMap<String, String>,
    out: &mut BTreeMap<String, String>,
) -> Vec<String> {
    let mut by_text: BTreeMap<String, &str> = BTreeMap::new();
    for entry in entries {
        by_text.insert(
            normalized(strip_enumeration(&entry.error_text)),
            entry.category.as_str(),
        );
    }
    let mut unresolved = Vec::new();
    for label in open {
        let reply_category = by_text.get(&normalized(label));
        match reply_category.and_then(|c| canonical.get(&normalized(c))) {
            Some(name) => {
                out.insert(label.to_string(), name.clone());
            }
            None => unresolved.push(label.to_string()),
        }
    }
    unresolved
}

/// Classify one batch of labels into the given categories.
///
/// Every input label ends up mapped: a reply naming an unknown category (or
/// skipping a label) triggers one re-ask for the batch, after which
/// unresolved labels map to [`OTHER`].
pub fn classify_batch(
    categories: &[Category],
    labels: &[&str],
    cfg: &TaxonomyConfig,
    gateway: &Gateway,
) -> Result<BTreeMap<String, String>, AssignError> {
    if categories.is_empty() {
        return Err(AssignError::NoCategories);
    }
    if labels.is_empty() {
        return Ok(BTreeMap::new());
    }
    if labels.len() > cfg.classify_batch_size {
        return Err(AssignError::BatchTooLarge {
            got: labels.len(),
            limit: cfg.classify_batch_size,
        });
    }
    // Accepted names: the offered categories plus the reserved fallbacks.
    let mut canonical: BTreeMap<String, String> = BTreeMap::new();
    for category in categories {
        canonical.insert(normalized(&category.name), category.name.clone());
    }
    canonical.insert(normalized(OTHER), OTHER.to_string());
    canonical.insert(normalized(HARD_TO_ANALYZE), HARD_TO_ANALYZE.to_string());

    let prompt = templates::render(TemplateId::Classify, &classify_bindings(categories, labels))?;
    let mut mapping: BTreeMap<String, String> = BTreeMap::new();

    let reply = gateway.complete(TemplateId::Classify.as_str(), prompt.clone())?;
    let first = extract::extract_classify_reply(&reply.raw_text);
    let unresolved = match &first {
        Ok(entries) => resolve_reply(entries, labels, &canonical, &mut mapping),
        Err(_) => labels.iter().map(|l| l.to_string()).collect(),
    };
    if unresolved.is_empty() {
        return Ok(mapping);
    }

    let retry_prompt = format!(
        "{prompt}\n\nReminder: every category must be copied exactly from the taxonomy above, \
         or be 'Other' if nothing fits; answer for every error in the list."
    );
    let reply = gateway.complete(TemplateId::Classify.as_str(), retry_prompt)?;
    match extract::extract_classify_reply(&reply.raw_text) {
        Ok(entries) => {
            let open: Vec<&str> = unresolved.iter().map(String::as_str).collect();
            let still_open = resolve_reply(&entries, &open, &canonical, &mut mapping);
            for label in still_open {
                log::debug!("label '{label}' unresolved after re-ask; falling back to {OTHER}");
                mapping.insert(label, OTHER.to_string());
            }
            Ok(mapping)
        }
        Err(err) => {
            if first.is_err() {
                // Both replies were unparsable; that is a failure, not a
                // fallback.
                return Err(AssignError::Unparsable(err.to_string()));
            }
            for label in unresolved {
                mapping.insert(label, OTHER.to_string());
            }
            Ok(mapping)
        }
    }
}

/// Classify a full label tally, chunked into `classify_batch_size` batches.
pub fn classify_labels_into(
    categories: &[Category],
    labels: &[LabelCount],
    cfg: &TaxonomyConfig,
    gateway: &Gateway,
) -> Result<BTreeMap<String, String>, AssignError> {
    let mut mapping = BTreeMap::new();
    for chunk in labels.chunks(cfg.classify_batch_size) {
        let batch: Vec<&str> = chunk.iter().map(|l| l.label.as_str()).collect();
        mapping.extend(classify_batch(categories, &batch, cfg, gateway)?);
    }
    Ok(mapping)
}

/// Category layer used during assignment walks.
struct LayerNode<'a> {
    category: &'a Category,
    children: Vec<LayerNode<'a>>,
}

fn layer_from_taxonomy(nodes: &[TaxonomyNode]) -> Vec<LayerNode<'_>> {
    nodes
        .iter()
        .map(|node| LayerNode {
            category: &node.category,
            children: layer_from_taxonomy(&node.children),
        })
        .collect()
}

fn classify_into_layer(
    nodes: &[LayerNode<'_>],
    labels: &[LabelCount],
    prefix: &[String],
    cfg: &TaxonomyConfig,
    gateway: &Gateway,
    paths: &mut BTreeMap<String, Vec<String>>,
) -> Result<(), AssignError> {
    let categories: Vec<Category> = nodes.iter().map(|n| n.category.clone()).collect();
    let mapping = classify_labels_into(&categories, labels, cfg, gateway)?;
    for (label, category) in &mapping {
        let mut path = prefix.to_vec();
        path.push(category.clone());
        paths.insert(label.clone(), path);
    }
    // Descend only through non-reserved categories that have children.
    for node in nodes {
        if node.children.is_empty() {
            continue;
        }
        let assigned: Vec<LabelCount> = labels
            .iter()
            .filter(|l| mapping.get(&l.label).map(String::as_str) == Some(&node.category.name))
            .cloned()
            .collect();
        if assigned.is_empty() {
            continue;
        }
        let mut prefix = prefix.to_vec();
        prefix.push(node.category.name.clone());
        classify_into_layer(&node.children, &assigned, &prefix, cfg, gateway, paths)?;
    }
    Ok(())
}

fn broadcast(
    analyses: &[VerdictRecord],
    paths: &BTreeMap<String, Vec<String>>,
) -> Result<AssignmentTable, AssignError> {
    let mut table = AssignmentTable::default();
    for record in analyses {
        if !record.is_labeled() {
            continue;
        }
        let path = paths
            .get(&record.error_label)
            .expect("every tallied label was classified")
            .clone();
        let previous = table.entries.insert(
            record.case.clone(),
            Assignment {
                label: record.error_label.clone(),
                path,
            },
        );
        if previous.is_some() {
            return Err(AssignError::DuplicateCase(record.case.clone()));
        }
    }
    Ok(table)
}

/// Assign every analyzed error a category path through a mined taxonomy.
pub fn assign_all(
    taxonomy: &Taxonomy,
    analyses: &[VerdictRecord],
    cfg: &TaxonomyConfig,
    gateway: &Gateway,
) -> Result<AssignmentTable, AssignError> {
    let tally = taxonomy::tally_labels(analyses).map_err(|_| AssignError::NoLabels)?;
    let layer = layer_from_taxonomy(&taxonomy.roots);
    let mut paths = BTreeMap::new();
    classify_into_layer(&layer, &tally, &[], cfg, gateway, &mut paths)?;
    broadcast(analyses, &paths)
}

/// Assign every analyzed error to an atlas category (single layer, mining
/// skipped). Empty analyses yield an empty table.
pub fn apply_atlas(
    atlas: &Atlas,
    analyses: &[VerdictRecord],
    cfg: &TaxonomyConfig,
    gateway: &Gateway,
) -> Result<AssignmentTable, AssignError> {
    if !analyses.iter().any(|r| r.is_labeled()) {
        return Ok(AssignmentTable::default());
    }
    let tally = taxonomy::tally_labels(analyses).map_err(|_| AssignError::NoLabels)?;
    let layer: Vec<LayerNode<'_>> = atlas
        .categories
        .iter()
        .map(|category| LayerNode {
            category,
            children: Vec::new(),
        })
        .collect();
    let mut paths = BTreeMap::new();
    classify_into_layer(&layer, &tally, &[], cfg, gateway, &mut paths)?;
    broadcast(analyses, &paths)
}
