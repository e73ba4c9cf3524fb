//! Taxonomy mining: turn error-label frequencies into a layered category
//! tree through generate / iterative-update / review rounds, recursing into
//! categories that hold enough labels.
//!
//! Mining within one layer is strictly sequential (iterative refinement is
//! order-dependent); each subtree's seed derives from the run seed and the
//! category path, so results do not depend on traversal order.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::VerdictRecord;
use crate::assigner;
use crate::corpus::{derive_rng, derive_seed};
use crate::gateway::extract::{self, ClusterItem, ClusterList};
use crate::gateway::templates::{self, TemplateId};
use crate::gateway::{Gateway, GatewayError};

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("no error labels: every verdict is no-error or the input is empty")]
    NoLabels,
    #[error("judge call failed: {0}")]
    Gateway(#[from] GatewayError),
    #[error("{call} reply invalid after retry: {message}")]
    InvalidClusters { call: String, message: String },
    #[error("assignment during mining failed: {0}")]
    Assignment(#[from] Box<crate::assigner::AssignError>),
    #[error("invalid taxonomy: {0}")]
    Invalid(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed taxonomy file {path}: {message}")]
    Malformed { path: String, message: String },
}

/// Mining parameters. Defaults match the shipped configuration; every field
/// is a knob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaxonomyConfig {
    /// Labels per mining batch.
    pub batch_size: usize,
    /// Labels per classification batch.
    pub classify_batch_size: usize,
    /// Maximum category name length, in words.
    pub cluster_name_length: usize,
    /// Maximum category description length, in words.
    pub cluster_description_length: usize,
    /// Maximum categories per layer.
    pub max_num_clusters: usize,
    /// Maximum tree depth.
    pub max_layers: usize,
    /// A category only grows children if it holds at least this many unique
    /// labels.
    pub min_labels_to_recurse: usize,
    /// Word budget offered to the judge for its explanation text.
    pub explanation_length: usize,
    /// Word budget offered to the judge for its suggested edits.
    pub suggestion_length: usize,
}

impl Default for TaxonomyConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            classify_batch_size: 50,
            cluster_name_length: 5,
            cluster_description_length: 30,
            max_num_clusters: 25,
            max_layers: 3,
            min_labels_to_recurse: 20,
            explanation_length: 100,
            suggestion_length: 100,
        }
    }
}

impl TaxonomyConfig {
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        let fields = [
            ("batch_size", self.batch_size),
            ("classify_batch_size", self.classify_batch_size),
            ("cluster_name_length", self.cluster_name_length),
            ("cluster_description_length", self.cluster_description_length),
            ("max_num_clusters", self.max_num_clusters),
            ("max_layers", self.max_layers),
            ("min_labels_to_recurse", self.min_labels_to_recurse),
            ("explanation_length", self.explanation_length),
            ("suggestion_length", self.suggestion_length),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(TaxonomyError::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// An error label with its number of occurrences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCount {
    pub label: String,
    pub count: u64,
}

/// One mined category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    pub description: String,
}

impl From<ClusterItem> for Category {
    fn from(item: ClusterItem) -> Self {
        Self {
            id: item.id,
            name: item.name,
            description: item.description,
        }
    }
}

/// A category with the labels assigned to it and its sub-categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub category: Category,
    pub assigned_labels: Vec<LabelCount>,
    #[serde(default)]
    pub children: Vec<TaxonomyNode>,
}

/// Where a taxonomy came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub judge_model: String,
    pub seed: u64,
    /// RFC 3339 timestamp; absent in replay runs so artifacts stay
    /// byte-reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

/// The layered category tree with its config snapshot and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub roots: Vec<TaxonomyNode>,
    pub config: TaxonomyConfig,
    pub provenance: Provenance,
}

/// Names the mining prompts refuse as category names.
pub const VAGUE_NAMES: [&str; 5] = ["Other", "General", "Unclear", "Miscellaneous", "Undefined"];

fn is_vague(name: &str) -> bool {
    VAGUE_NAMES
        .iter()
        .any(|v| v.eq_ignore_ascii_case(name.trim()))
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

impl Taxonomy {
    /// Categories per layer as flat lists, outermost first.
    pub fn layer_categories(&self) -> Vec<Vec<&Category>> {
        fn walk<'a>(nodes: &'a [TaxonomyNode], depth: usize, layers: &mut Vec<Vec<&'a Category>>) {
            if nodes.is_empty() {
                return;
            }
            if layers.len() <= depth {
                layers.resize_with(depth + 1, Vec::new);
            }
            for node in nodes {
                layers[depth].push(&node.category);
                walk(&node.children, depth + 1, layers);
            }
        }
        let mut layers: Vec<Vec<&Category>> = Vec::new();
        walk(&self.roots, 0, &mut layers);
        layers
    }

    /// Check every structural invariant of the tree against its config.
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        self.config.validate()?;
        if self.roots.len() > self.config.max_num_clusters {
            return Err(TaxonomyError::Invalid(format!(
                "{} roots exceed max_num_clusters {}",
                self.roots.len(),
                self.config.max_num_clusters
            )));
        }
        self.validate_siblings(&self.roots, 1)
    }

    fn validate_siblings(&self, nodes: &[TaxonomyNode], depth: usize) -> Result<(), TaxonomyError> {
        if nodes.is_empty() {
            return Ok(());
        }
        if depth > self.config.max_layers {
            return Err(TaxonomyError::Invalid(format!(
                "tree depth {depth} exceeds max_layers {}",
                self.config.max_layers
            )));
        }
        let mut names = BTreeSet::new();
        for node in nodes {
            let category = &node.category;
            if category.name.trim().is_empty() || category.description.trim().is_empty() {
                return Err(TaxonomyError::Invalid(
                    "category with empty name or description".to_string(),
                ));
            }
            if !names.insert(category.name.clone()) {
                return Err(TaxonomyError::Invalid(format!(
                    "duplicate sibling name '{}' at depth {depth}",
                    category.name
                )));
            }
            if is_vague(&category.name) {
                return Err(TaxonomyError::Invalid(format!(
                    "vague category name '{}'",
                    category.name
                )));
            }
            if word_count(&category.name) > self.config.cluster_name_length {
                return Err(TaxonomyError::Invalid(format!(
                    "name '{}' exceeds {} words",
                    category.name, self.config.cluster_name_length
                )));
            }
            if word_count(&category.description) > self.config.cluster_description_length {
                return Err(TaxonomyError::Invalid(format!(
                    "description of '{}' exceeds {} words",
                    category.name, self.config.cluster_description_length
                )));
            }
            if node.children.len() > self.config.max_num_clusters {
                return Err(TaxonomyError::Invalid(format!(
                    "'{}' has {} children, more than max_num_clusters {}",
                    category.name,
                    node.children.len(),
                    self.config.max_num_clusters
                )));
            }
            // Children partition the parent's labels, minus Other /
            // Hard-to-Analyze leakage at that layer.
            let parent_labels: BTreeSet<&str> = node
                .assigned_labels
                .iter()
                .map(|l| l.label.as_str())
                .collect();
            let mut seen: BTreeSet<&str> = BTreeSet::new();
            for child in &node.children {
                for label in &child.assigned_labels {
                    if !parent_labels.contains(label.label.as_str()) {
                        return Err(TaxonomyError::Invalid(format!(
                            "label '{}' of child '{}' missing from parent '{}'",
                            label.label, child.category.name, category.name
                        )));
                    }
                    if !seen.insert(label.label.as_str()) {
                        return Err(TaxonomyError::Invalid(format!(
                            "label '{}' assigned to two children of '{}'",
                            label.label, category.name
                        )));
                    }
                }
            }
            self.validate_siblings(&node.children, depth + 1)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TaxonomyError> {
        let path = path.as_ref();
        let mut body = serde_json::to_string_pretty(self).expect("taxonomy serializes");
        body.push('\n');
        fs::write(path, body).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&body).map_err(|err| TaxonomyError::Malformed {
            path: path.display().to_string(),
            message: err.to_string(),
        })
    }
}

/// Count unique error labels over the labeled verdicts, descending count
/// with lexicographic tie-break.
pub fn tally_labels(analyses: &[VerdictRecord]) -> Result<Vec<LabelCount>, TaxonomyError> {
    let mut counts: std::collections::BTreeMap<&str, u64> = std::collections::BTreeMap::new();
    for record in analyses {
        if record.is_labeled() {
            *counts.entry(record.error_label.as_str()).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(TaxonomyError::NoLabels);
    }
    let mut tally: Vec<LabelCount> = counts
        .into_iter()
        .map(|(label, count)| LabelCount {
            label: label.to_string(),
            count,
        })
        .collect();
    tally.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
    Ok(tally)
}

/// Render a batch of labels as the tuple list the mining prompts expect.
pub fn format_label_data(batch: &[LabelCount]) -> String {
    batch
        .iter()
        .map(|entry| format!("({:?}, {})", entry.label, entry.count))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Render categories as the JSON cluster list carried inside prompts.
pub fn clusters_to_json(categories: &[Category]) -> String {
    let list = ClusterList {
        clusters: categories
            .iter()
            .map(|c| ClusterItem {
                id: c.id,
                name: c.name.clone(),
                description: c.description.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&list).expect("cluster list serializes")
}

/// Validate a judge's cluster list against the config; returns renumbered
/// categories. The review pass passes `enforce_limit: false` because its
/// over-limit handling is truncation, not rejection.
fn validate_clusters(
    items: Vec<ClusterItem>,
    cfg: &TaxonomyConfig,
    enforce_limit: bool,
) -> Result<Vec<Category>, String> {
    if items.is_empty() {
        return Err("empty cluster list".to_string());
    }
    if enforce_limit && items.len() > cfg.max_num_clusters {
        return Err(format!(
            "{} categories exceed the limit of {}",
            items.len(),
            cfg.max_num_clusters
        ));
    }
    let mut names = BTreeSet::new();
    for item in &items {
        if is_vague(&item.name) {
            return Err(format!("vague category name '{}'", item.name));
        }
        if word_count(&item.name) > cfg.cluster_name_length {
            return Err(format!(
                "name '{}' exceeds {} words",
                item.name, cfg.cluster_name_length
            ));
        }
        if word_count(&item.description) > cfg.cluster_description_length {
            return Err(format!(
                "description of '{}' exceeds {} words",
                item.name, cfg.cluster_description_length
            ));
        }
        if !names.insert(item.name.to_ascii_lowercase()) {
            return Err(format!("duplicate category name '{}'", item.name));
        }
    }
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(i, item)| Category {
            id: (i + 1) as u64,
            name: item.name,
            description: item.description,
        })
        .collect())
}

enum MineCall<'a> {
    Generate { data: &'a str },
    Update { data: &'a str, cluster_list: String },
    Review { cluster_list: String },
}

impl MineCall<'_> {
    fn template(&self) -> TemplateId {
        match self {
            MineCall::Generate { .. } => TemplateId::TaxonomyGenerate,
            MineCall::Update { .. } => TemplateId::TaxonomyUpdate,
            MineCall::Review { .. } => TemplateId::TaxonomyReview,
        }
    }
}

/// Run one mining call: render, execute, extract, validate, with a single
/// constraint-reminder retry. The review pass truncates an over-long list in
/// reply order instead of failing.
fn run_mine_call(
    gateway: &Gateway,
    cfg: &TaxonomyConfig,
    parent: Option<&Category>,
    call: MineCall<'_>,
) -> Result<Vec<Category>, TaxonomyError> {
    let template = call.template();
    let is_review = matches!(call, MineCall::Review { .. });
    let mut bindings = templates::taxonomy_length_bindings(
        cfg.cluster_name_length,
        cfg.cluster_description_length,
        cfg.max_num_clusters,
        cfg.explanation_length,
    );
    match &call {
        MineCall::Generate { data } => {
            bindings.insert("data".to_string(), data.to_string());
        }
        MineCall::Update { data, cluster_list } => {
            bindings.insert("data".to_string(), data.to_string());
            bindings.insert("cluster_list".to_string(), cluster_list.clone());
            bindings.insert(
                "suggestion_length".to_string(),
                cfg.suggestion_length.to_string(),
            );
        }
        MineCall::Review { cluster_list } => {
            bindings.insert("cluster_list".to_string(), cluster_list.clone());
            bindings.insert(
                "suggestion_length".to_string(),
                cfg.suggestion_length.to_string(),
            );
        }
    }
    if let Some(parent) = parent {
        bindings.insert("parent_category".to_string(), parent.name.clone());
    }
    let prompt = templates::render(template, &bindings)?;

    let attempt = |prompt: String| -> Result<Result<Vec<Category>, String>, TaxonomyError> {
        let reply = gateway.complete(template.as_str(), prompt)?;
        let items = match template {
            TemplateId::TaxonomyGenerate => extract::extract_cluster_list(&reply.raw_text),
            _ => extract::extract_update_reply(&reply.raw_text).map(|update| {
                log::debug!(
                    "{} rating_score {} (suggestions: {})",
                    template.as_str(),
                    update.rating_score,
                    update.suggestions
                );
                update.clusters
            }),
        };
        Ok(match items {
            Ok(items) => {
                let over_limit = items.len() > cfg.max_num_clusters;
                match validate_clusters(items, cfg, !is_review) {
                    Ok(mut categories) => {
                        if is_review && over_limit {
                            log::warn!(
                                "review returned {} categories; truncating to {} in reply order",
                                categories.len(),
                                cfg.max_num_clusters
                            );
                            categories.truncate(cfg.max_num_clusters);
                        }
                        Ok(categories)
                    }
                    Err(message) => Err(message),
                }
            }
            Err(err) => Err(err.to_string()),
        })
    };

    match attempt(prompt.clone())? {
        Ok(categories) => Ok(categories),
        Err(first_failure) => {
            let retry_prompt = format!(
                "{prompt}\n\nReminder: the previous reply was rejected ({first_failure}). \
                 Output a valid cluster list in the required JSON format: at most {} categories, \
                 names of at most {} words, descriptions of at most {} words, unique names, \
                 and no vague names such as \"Other\" or \"General\".",
                cfg.max_num_clusters, cfg.cluster_name_length, cfg.cluster_description_length
            );
            match attempt(retry_prompt)? {
                Ok(categories) => Ok(categories),
                Err(second_failure) => Err(TaxonomyError::InvalidClusters {
                    call: template.as_str().to_string(),
                    message: second_failure,
                }),
            }
        }
    }
}

/// Mine one category layer from a label tally.
///
/// Labels are seed-shuffled and split into batches: the first batch feeds
/// the generation prompt, later batches feed update prompts, and a review
/// pass closes the layer. With a parent, every prompt carries the
/// parent-category preamble.
pub fn mine_layer(
    labels: &[LabelCount],
    parent: Option<&Category>,
    cfg: &TaxonomyConfig,
    gateway: &Gateway,
    seed: u64,
) -> Result<Vec<Category>, TaxonomyError> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(TaxonomyError::NoLabels);
    }
    let mut shuffled = labels.to_vec();
    let mut rng = derive_rng(seed, &["shuffle"]);
    shuffled.shuffle(&mut rng);

    let mut batches = shuffled.chunks(cfg.batch_size);
    let first = batches.next().expect("labels is non-empty");
    let mut categories = run_mine_call(
        gateway,
        cfg,
        parent,
        MineCall::Generate {
            data: &format_label_data(first),
        },
    )?;
    for batch in batches {
        categories = run_mine_call(
            gateway,
            cfg,
            parent,
            MineCall::Update {
                data: &format_label_data(batch),
                cluster_list: clusters_to_json(&categories),
            },
        )?;
    }
    run_mine_call(
        gateway,
        cfg,
        parent,
        MineCall::Review {
            cluster_list: clusters_to_json(&categories),
        },
    )
}

/// Build the full layered taxonomy: mine layer 1 over the whole tally,
/// assign labels to categories, and recurse into categories holding at
/// least `min_labels_to_recurse` unique labels until `max_layers`.
pub fn build_taxonomy(
    analyses: &[VerdictRecord],
    cfg: &TaxonomyConfig,
    gateway: &Gateway,
    seed: u64,
) -> Result<Taxonomy, TaxonomyError> {
    cfg.validate()?;
    let tally = tally_labels(analyses)?;
    let roots = mine_subtree(&tally, None, &[], cfg, gateway, seed, 1)?;
    let taxonomy = Taxonomy {
        roots,
        config: cfg.clone(),
        provenance: Provenance {
            judge_model: gateway.model_name().to_string(),
            seed,
            created_at: None,
        },
    };
    taxonomy.validate()?;
    Ok(taxonomy)
}

fn mine_subtree(
    labels: &[LabelCount],
    parent: Option<&Category>,
    path: &[&str],
    cfg: &TaxonomyConfig,
    gateway: &Gateway,
    seed: u64,
    depth: usize,
) -> Result<Vec<TaxonomyNode>, TaxonomyError> {
    let mut seed_parts: Vec<&str> = vec!["mine"];
    seed_parts.extend_from_slice(path);
    let subtree_seed = derive_seed(seed, &seed_parts);
    let categories = mine_layer(labels, parent, cfg, gateway, subtree_seed)?;
    let mapping =
        assigner::classify_labels_into(&categories, labels, cfg, gateway).map_err(Box::new)?;
    let mut nodes = Vec::with_capacity(categories.len());
    for category in categories {
        let assigned: Vec<LabelCount> = labels
            .iter()
            .filter(|entry| mapping.get(&entry.label).map(String::as_str) == Some(&category.name))
            .cloned()
            .collect();
        let children = if assigned.len() >= cfg.min_labels_to_recurse && depth < cfg.max_layers {
            let mut child_path: Vec<&str> = path.to_vec();
            child_path.push(&category.name);
            mine_subtree(
                &assigned,
                Some(&category),
                &child_path,
                cfg,
                gateway,
                seed,
                depth + 1,
            )?
        } else {
            Vec::new()
        };
        nodes.push(TaxonomyNode {
            category,
            assigned_labels: assigned,
            children,
        });
    }
    Ok(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::{VerdictKind, VerdictRecord};
    use crate::corpus::CaseKey;
    use crate::gateway::{ChatClient, ClientKind, CompletionRequest, JudgeResponse};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};

    fn record(label: &str, i: usize) -> VerdictRecord {
        VerdictRecord {
            case: CaseKey::new("ds", format!("i{i}"), "m"),
            kind: VerdictKind::Analyzed,
            criteria: Vec::new(),
            error_summary: String::new(),
            error_label: label.to_string(),
        }
    }

    #[test]
    fn tally_counts_and_orders() {
        let records = vec![record("A", 0), record("B", 1), record("A", 2)];
        let tally = tally_labels(&records).unwrap();
        assert_eq!(
            tally,
            vec![
                LabelCount {
                    label: "A".to_string(),
                    count: 2
                },
                LabelCount {
                    label: "B".to_string(),
                    count: 1
                }
            ]
        );
    }

    #[test]
    fn tally_breaks_ties_lexicographically() {
        let records = vec![record("z", 0), record("a", 1), record("m", 2)];
        let tally = tally_labels(&records).unwrap();
        let labels: Vec<&str> = tally.iter().map(|l| l.label.as_str()).collect();
        assert_eq!(labels, vec!["a", "m", "z"]);
        assert!(tally.iter().all(|l| l.count == 1));
    }

    #[test]
    fn tally_of_repeated_label() {
        let records: Vec<VerdictRecord> = (0..5).map(|i| record("x", i)).collect();
        let tally = tally_labels(&records).unwrap();
        assert_eq!(tally.len(), 1);
        assert_eq!(tally[0].count, 5);
    }

    #[test]
    fn tally_rejects_unlabeled_input() {
        let unlabeled = VerdictRecord {
            case: CaseKey::new("ds", "i", "m"),
            kind: VerdictKind::NoErrorFound,
            criteria: Vec::new(),
            error_summary: String::new(),
            error_label: String::new(),
        };
        assert!(matches!(
            tally_labels(&[unlabeled]).unwrap_err(),
            TaxonomyError::NoLabels
        ));
    }

    fn clusters_reply(names: &[&str]) -> String {
        let clusters: Vec<String> = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                format!(
                    r#"{{"id": {}, "name": "{}", "description": "Errors about {}."}}"#,
                    i + 1,
                    name,
                    name.to_ascii_lowercase()
                )
            })
            .collect();
        format!(r#"{{"clusters": [{}]}}"#, clusters.join(", "))
    }

    fn update_reply(names: &[&str]) -> String {
        format!(
            "\"rating_score\": 90\n\"explanation\": fine\n\"suggestions\": N/A\n\"clusters\": {}",
            clusters_reply(names)
        )
    }

    /// Scripted miner: counts calls per prompt kind and replies with a fixed
    /// category list; classification sends every label to the first
    /// category.
    struct ScriptedMiner {
        names: Vec<&'static str>,
        generate: AtomicUsize,
        update: AtomicUsize,
        review: AtomicUsize,
        prompts: Mutex<Vec<(String, String)>>,
    }

    impl ScriptedMiner {
        fn new(names: Vec<&'static str>) -> Arc<Self> {
            Arc::new(Self {
                names,
                generate: AtomicUsize::new(0),
                update: AtomicUsize::new(0),
                review: AtomicUsize::new(0),
                prompts: Mutex::new(Vec::new()),
            })
        }

        fn gateway(self: &Arc<Self>) -> Gateway {
            struct Shared(Arc<ScriptedMiner>);
            impl ChatClient for Shared {
                fn complete(
                    &self,
                    r: &CompletionRequest,
                ) -> Result<JudgeResponse, GatewayError> {
                    self.0.complete(r)
                }
            }
            Gateway::new(Box::new(Shared(self.clone())), "judge")
        }
    }

    impl ChatClient for ScriptedMiner {
        fn complete(&self, request: &CompletionRequest) -> Result<JudgeResponse, GatewayError> {
            self.prompts
                .lock()
                .unwrap()
                .push((request.kind.clone(), request.prompt.clone()));
            let text = match request.kind.as_str() {
                "taxonomy_generate" => {
                    self.generate.fetch_add(1, Ordering::SeqCst);
                    clusters_reply(&self.names)
                }
                "taxonomy_update" => {
                    self.update.fetch_add(1, Ordering::SeqCst);
                    update_reply(&self.names)
                }
                "taxonomy_review" => {
                    self.review.fetch_add(1, Ordering::SeqCst);
                    update_reply(&self.names)
                }
                "classify" => {
                    let labels = crate::assigner::labels_in_classify_prompt(&request.prompt);
                    let entries: Vec<String> = labels
                        .iter()
                        .map(|label| {
                            format!(
                                r#"{{"error_text": {:?}, "category": "{}"}}"#,
                                label, self.names[0]
                            )
                        })
                        .collect();
                    format!(r#"{{"classified_errors": [{}]}}"#, entries.join(", "))
                }
                other => panic!("unexpected kind {other}"),
            };
            Ok(JudgeResponse {
                raw_text: text,
                latency: std::time::Duration::ZERO,
                client_kind: ClientKind::Replay,
            })
        }
    }

    fn labels(n: usize) -> Vec<LabelCount> {
        (0..n)
            .map(|i| LabelCount {
                label: format!("label {i}"),
                count: (n - i) as u64,
            })
            .collect()
    }

    #[test]
    fn single_batch_is_one_generate_and_one_review() {
        let client = ScriptedMiner::new(vec!["Computation Error", "Missing Required Element"]);
        let gateway = client.gateway();
        let cfg = TaxonomyConfig::default();
        let categories = mine_layer(&labels(60), None, &cfg, &gateway, 7).unwrap();
        assert_eq!(categories.len(), 2);
        assert_eq!(client.generate.load(Ordering::SeqCst), 1);
        assert_eq!(client.update.load(Ordering::SeqCst), 0);
        assert_eq!(client.review.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn twelve_hundred_labels_make_two_updates() {
        let client = ScriptedMiner::new(vec!["Computation Error"]);
        let gateway = client.gateway();
        let cfg = TaxonomyConfig::default();
        mine_layer(&labels(1200), None, &cfg, &gateway, 7).unwrap();
        assert_eq!(client.generate.load(Ordering::SeqCst), 1);
        assert_eq!(client.update.load(Ordering::SeqCst), 2);
        assert_eq!(client.review.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn parent_name_reaches_every_prompt() {
        let client = ScriptedMiner::new(vec!["Formula Misapplication Error"]);
        let gateway = client.gateway();
        let cfg = TaxonomyConfig::default();
        let parent = Category {
            id: 1,
            name: "Computation Error".to_string(),
            description: "Wrong numbers.".to_string(),
        };
        mine_layer(&labels(600), Some(&parent), &cfg, &gateway, 7).unwrap();
        let prompts = client.prompts.lock().unwrap();
        assert!(prompts.len() >= 3);
        for (kind, prompt) in prompts.iter() {
            assert!(
                prompt.contains("already been labeled under the category: *Computation Error*"),
                "prompt kind {kind} lacks the parent preamble"
            );
        }
    }

    /// Judge that misbehaves on the first generate call and recovers on the
    /// reminder retry.
    struct FlakyMiner {
        bad_first: String,
        calls: AtomicUsize,
    }

    impl ChatClient for FlakyMiner {
        fn complete(&self, request: &CompletionRequest) -> Result<JudgeResponse, GatewayError> {
            let text = match request.kind.as_str() {
                "taxonomy_generate" => {
                    if self.calls.fetch_add(1, Ordering::SeqCst) == 0 {
                        self.bad_first.clone()
                    } else {
                        clusters_reply(&["Computation Error"])
                    }
                }
                _ => update_reply(&["Computation Error"]),
            };
            Ok(JudgeResponse {
                raw_text: text,
                latency: std::time::Duration::ZERO,
                client_kind: ClientKind::Replay,
            })
        }
    }

    #[test]
    fn vague_name_triggers_retry_then_succeeds() {
        let gateway = Gateway::new(
            Box::new(FlakyMiner {
                bad_first: clusters_reply(&["Other"]),
                calls: AtomicUsize::new(0),
            }),
            "judge",
        );
        let cfg = TaxonomyConfig::default();
        let categories = mine_layer(&labels(3), None, &cfg, &gateway, 1).unwrap();
        assert_eq!(categories[0].name, "Computation Error");
    }

    #[test]
    fn overlong_name_fails_schema_and_retries() {
        let gateway = Gateway::new(
            Box::new(FlakyMiner {
                bad_first: clusters_reply(&["A Very Long Category Name Indeed Overflowing"]),
                calls: AtomicUsize::new(0),
            }),
            "judge",
        );
        let cfg = TaxonomyConfig::default();
        let categories = mine_layer(&labels(3), None, &cfg, &gateway, 1).unwrap();
        assert_eq!(categories[0].name, "Computation Error");
    }

    struct AlwaysBad;

    impl ChatClient for AlwaysBad {
        fn complete(&self, _request: &CompletionRequest) -> Result<JudgeResponse, GatewayError> {
            Ok(JudgeResponse {
                raw_text: clusters_reply(&["Undefined"]),
                latency: std::time::Duration::ZERO,
                client_kind: ClientKind::Replay,
            })
        }
    }

    #[test]
    fn persistent_violation_errors_after_one_retry() {
        let gateway = Gateway::new(Box::new(AlwaysBad), "judge");
        let cfg = TaxonomyConfig::default();
        let err = mine_layer(&labels(3), None, &cfg, &gateway, 1).unwrap_err();
        assert!(matches!(err, TaxonomyError::InvalidClusters { .. }));
    }

    #[test]
    fn review_over_limit_truncates_in_reply_order() {
        struct BigReview;
        impl ChatClient for BigReview {
            fn complete(&self, request: &CompletionRequest) -> Result<JudgeResponse, GatewayError> {
                let names: Vec<String> = (0..5).map(|i| format!("Category {i}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                let text = match request.kind.as_str() {
                    "taxonomy_generate" => clusters_reply(&refs[..3]),
                    // Review exceeds the configured limit on purpose.
                    _ => update_reply(&refs),
                };
                Ok(JudgeResponse {
                    raw_text: text,
                    latency: std::time::Duration::ZERO,
                    client_kind: ClientKind::Replay,
                })
            }
        }
        let gateway = Gateway::new(Box::new(BigReview), "judge");
        let cfg = TaxonomyConfig {
            max_num_clusters: 4,
            ..TaxonomyConfig::default()
        };
        let categories = mine_layer(&labels(3), None, &cfg, &gateway, 1).unwrap();
        assert_eq!(categories.len(), 4);
        assert_eq!(categories[0].name, "Category 0");
        assert_eq!(categories[3].name, "Category 3");
    }

    #[test]
    fn hard_to_analyze_is_a_permitted_name() {
        let items = vec![ClusterItem {
            id: 1,
            name: "Hard to Analyze".to_string(),
            description: "Ambiguous errors lacking context.".to_string(),
        }];
        assert!(validate_clusters(items, &TaxonomyConfig::default(), true).is_ok());
    }

    #[test]
    fn taxonomy_file_round_trips() {
        let taxonomy = Taxonomy {
            roots: vec![TaxonomyNode {
                category: Category {
                    id: 1,
                    name: "Computation Error".to_string(),
                    description: "Wrong numbers.".to_string(),
                },
                assigned_labels: vec![LabelCount {
                    label: "Arithmetic Slip".to_string(),
                    count: 3,
                }],
                children: Vec::new(),
            }],
            config: TaxonomyConfig::default(),
            provenance: Provenance {
                judge_model: "judge".to_string(),
                seed: 42,
                created_at: None,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("taxonomy.json");
        taxonomy.save(&path).unwrap();
        let loaded = Taxonomy::load(&path).unwrap();
        assert_eq!(taxonomy, loaded);
        // Lossless: saving the loaded tree reproduces the bytes.
        let again = dir.path().join("again.json");
        loaded.save(&again).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn max_layers_one_never_recurses() {
        let client = ScriptedMiner::new(vec!["Computation Error"]);
        let gateway = client.gateway();
        let cfg = TaxonomyConfig {
            max_layers: 1,
            min_labels_to_recurse: 1,
            ..TaxonomyConfig::default()
        };
        let records: Vec<VerdictRecord> = (0..30).map(|i| record(&format!("L{i}"), i)).collect();
        let taxonomy = build_taxonomy(&records, &cfg, &gateway, 5).unwrap();
        assert_eq!(taxonomy.roots.len(), 1);
        assert!(taxonomy.roots[0].children.is_empty());
        taxonomy.validate().unwrap();
    }

    #[test]
    fn below_threshold_category_stays_leaf() {
        let client = ScriptedMiner::new(vec!["Computation Error"]);
        let gateway = client.gateway();
        let cfg = TaxonomyConfig {
            min_labels_to_recurse: 20,
            ..TaxonomyConfig::default()
        };
        let records: Vec<VerdictRecord> = (0..3).map(|i| record(&format!("L{i}"), i)).collect();
        let taxonomy = build_taxonomy(&records, &cfg, &gateway, 5).unwrap();
        assert_eq!(taxonomy.roots[0].assigned_labels.len(), 3);
        assert!(taxonomy.roots[0].children.is_empty());
    }
}
