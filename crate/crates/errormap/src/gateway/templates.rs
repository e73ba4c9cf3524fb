//! Prompt templates with named placeholders and conditional blocks.
//!
//! Conditional sections (references, correct responses, parent category)
//! render iff their binding is present and non-empty. Rendering is
//! byte-deterministic; golden-file tests pin the output of every template.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use minijinja::{Environment, UndefinedBehavior};

use super::GatewayError;

/// The prompt templates the pipeline executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateId {
    PerInstance,
    TaxonomyGenerate,
    TaxonomyUpdate,
    TaxonomyReview,
    Classify,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::PerInstance,
        TemplateId::TaxonomyGenerate,
        TemplateId::TaxonomyUpdate,
        TemplateId::TaxonomyReview,
        TemplateId::Classify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::PerInstance => "per_instance",
            TemplateId::TaxonomyGenerate => "taxonomy_generate",
            TemplateId::TaxonomyUpdate => "taxonomy_update",
            TemplateId::TaxonomyReview => "taxonomy_review",
            TemplateId::Classify => "classify",
        }
    }
}

impl std::str::FromStr for TemplateId {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| GatewayError::UnknownTemplate(s.to_string()))
    }
}

struct TemplateSpec {
    name: &'static str,
    body: &'static str,
    /// Placeholders that must be bound; rendering without them is an error.
    required: &'static [&'static str],
    /// Placeholders gating conditional sections; missing or empty omits the
    /// section.
    optional: &'static [&'static str],
}

const TAXONOMY_LENGTH_PARAMS: &[&str] = &[
    "data_type",
    "cluster_name_length",
    "cluster_description_length",
    "max_num_clusters",
    "explanation_length",
];

const SPECS: &[TemplateSpec] = &[
    TemplateSpec {
        name: "per_instance",
        body: include_str!("templates/per_instance.txt"),
        required: &["input_text", "output_text"],
        optional: &["correct_answer", "correct_outputs"],
    },
    TemplateSpec {
        name: "per_instance_alt_a",
        body: include_str!("templates/per_instance_alt_a.txt"),
        required: &["input_text", "output_text"],
        optional: &["correct_answer", "correct_outputs"],
    },
    TemplateSpec {
        name: "per_instance_alt_b",
        body: include_str!("templates/per_instance_alt_b.txt"),
        required: &["input_text", "output_text"],
        optional: &["correct_answer", "correct_outputs"],
    },
    TemplateSpec {
        name: "taxonomy_generate",
        body: include_str!("templates/taxonomy_generate.txt"),
        required: &[
            "data",
            "data_type",
            "cluster_name_length",
            "cluster_description_length",
            "max_num_clusters",
            "explanation_length",
        ],
        optional: &["parent_category"],
    },
    TemplateSpec {
        name: "taxonomy_update",
        body: include_str!("templates/taxonomy_update.txt"),
        required: &[
            "data",
            "cluster_list",
            "data_type",
            "cluster_name_length",
            "cluster_description_length",
            "max_num_clusters",
            "explanation_length",
            "suggestion_length",
        ],
        optional: &["parent_category"],
    },
    TemplateSpec {
        name: "taxonomy_review",
        body: include_str!("templates/taxonomy_review.txt"),
        required: &[
            "cluster_list",
            "cluster_name_length",
            "cluster_description_length",
            "max_num_clusters",
            "explanation_length",
            "suggestion_length",
        ],
        optional: &["parent_category"],
    },
    TemplateSpec {
        name: "classify",
        body: include_str!("templates/classify.txt"),
        required: &["taxonomy", "data", "data_type"],
        optional: &[],
    },
];

/// Names of the two per-instance paraphrases used by the robustness probe.
pub const VARIANT_TEMPLATES: [&str; 2] = ["per_instance_alt_a", "per_instance_alt_b"];

/// Every registered template name (the five pipeline templates plus the two
/// robustness variants).
pub fn template_names() -> Vec<&'static str> {
    SPECS.iter().map(|s| s.name).collect()
}

fn spec(name: &str) -> Option<&'static TemplateSpec> {
    SPECS.iter().find(|s| s.name == name)
}

fn environment() -> &'static Environment<'static> {
    static ENV: OnceLock<Environment<'static>> = OnceLock::new();
    ENV.get_or_init(|| {
        let mut env = Environment::new();
        env.set_undefined_behavior(UndefinedBehavior::Lenient);
        for spec in SPECS {
            env.add_template(spec.name, spec.body)
                .expect("built-in template parses");
        }
        env
    })
}

/// Render a pipeline template with the given bindings.
pub fn render(
    id: TemplateId,
    bindings: &BTreeMap<String, String>,
) -> Result<String, GatewayError> {
    render_named(id.as_str(), bindings)
}

/// Render any registered template (pipeline templates or robustness
/// variants) by name.
pub fn render_named(
    name: &str,
    bindings: &BTreeMap<String, String>,
) -> Result<String, GatewayError> {
    let spec = spec(name).ok_or_else(|| GatewayError::UnknownTemplate(name.to_string()))?;
    for placeholder in spec.required {
        if !bindings.contains_key(*placeholder) {
            return Err(GatewayError::MissingBinding {
                template: name.to_string(),
                placeholder: placeholder.to_string(),
            });
        }
    }
    let template = environment()
        .get_template(name)
        .expect("registered template exists");
    template
        .render(minijinja::Value::from_serialize(bindings))
        .map_err(|source| GatewayError::Render {
            template: name.to_string(),
            message: source.to_string(),
        })
}

/// Shared bindings for the taxonomy prompts derived from mining parameters.
pub fn taxonomy_length_bindings(
    cluster_name_length: usize,
    cluster_description_length: usize,
    max_num_clusters: usize,
    explanation_length: usize,
) -> BTreeMap<String, String> {
    let mut bindings = BTreeMap::new();
    bindings.insert("data_type".to_string(), "error label".to_string());
    bindings.insert(
        "cluster_name_length".to_string(),
        cluster_name_length.to_string(),
    );
    bindings.insert(
        "cluster_description_length".to_string(),
        cluster_description_length.to_string(),
    );
    bindings.insert(
        "max_num_clusters".to_string(),
        max_num_clusters.to_string(),
    );
    bindings.insert(
        "explanation_length".to_string(),
        explanation_length.to_string(),
    );
    debug_assert!(TAXONOMY_LENGTH_PARAMS
        .iter()
        .all(|key| bindings.contains_key(*key)));
    bindings
}
