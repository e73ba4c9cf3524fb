//! Extraction of structured payloads from raw judge replies.
//!
//! Object schemas are located as the first balanced top-level JSON object in
//! the reply, fenced or bare. The update/review replies instead carry tagged
//! fields (`rating_score`, `explanation`, `suggestions`, `clusters`); the
//! clusters tag is followed by a JSON object or array.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use super::GatewayError;

/// Execution quality of one required criterion in the wrong output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quality {
    Correct,
    PartiallyCorrect,
    Incorrect,
    /// The criterion is missing from the wrong output (`null` on the wire).
    Absent,
}

impl Quality {
    fn parse(value: &Value) -> Result<Self, String> {
        match value {
            Value::Null => Ok(Quality::Absent),
            Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
                "correct" => Ok(Quality::Correct),
                "partially correct" => Ok(Quality::PartiallyCorrect),
                "incorrect" => Ok(Quality::Incorrect),
                other => Err(format!(
                    "quality must be null, correct, partially correct, or incorrect; got '{other}'"
                )),
            },
            other => Err(format!("quality must be null or a string, got {other}")),
        }
    }

    fn as_wire(&self) -> Option<&'static str> {
        match self {
            Quality::Correct => Some("correct"),
            Quality::PartiallyCorrect => Some("partially correct"),
            Quality::Incorrect => Some("incorrect"),
            Quality::Absent => None,
        }
    }
}

impl Serialize for Quality {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self.as_wire() {
            Some(s) => serializer.serialize_str(s),
            None => serializer.serialize_unit(),
        }
    }
}

impl<'de> Deserialize<'de> for Quality {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw: Option<String> = Option::deserialize(deserializer)?;
        Quality::parse(&raw.map(Value::String).unwrap_or(Value::Null))
            .map_err(serde::de::Error::custom)
    }
}

/// One criterion of the structured correct solution, assessed against the
/// wrong output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionAssessment {
    pub criterion: String,
    pub present_in_wrong: bool,
    pub quality: Quality,
    /// Quote from the wrong output; may be empty when the criterion is
    /// absent.
    #[serde(default)]
    pub evidence: String,
    #[serde(default)]
    pub comment: String,
}

/// The `final_answer` object of a per-instance reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub error_summary: String,
    pub error_title: String,
}

/// Parsed per-instance analysis reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorAnalysisPayload {
    pub required_criteria: Vec<CriterionAssessment>,
    pub final_answer: FinalAnswer,
}

impl ErrorAnalysisPayload {
    /// Canonical wire form: the JSON object exactly as the prompt requests
    /// it.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("payload serializes")
    }
}

/// One mined cluster as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterItem {
    pub id: u64,
    pub name: String,
    pub description: String,
}

/// Wrapper matching the `{"clusters": [...]}` wire shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterList {
    pub clusters: Vec<ClusterItem>,
}

/// Parsed update/review reply: tagged rating plus the updated cluster list.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReply {
    pub rating_score: u8,
    pub explanation: String,
    pub suggestions: String,
    pub clusters: Vec<ClusterItem>,
}

/// One classified error from a batched classification reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedError {
    pub error_text: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassifyList {
    classified_errors: Vec<ClassifiedError>,
}

/// Schemas the extractor understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaId {
    ErrorAnalysis,
    ClusterList,
    UpdateReply,
    ClassifyReply,
}

impl SchemaId {
    fn name(self) -> &'static str {
        match self {
            SchemaId::ErrorAnalysis => "error_analysis",
            SchemaId::ClusterList => "cluster_list",
            SchemaId::UpdateReply => "update_reply",
            SchemaId::ClassifyReply => "classify_reply",
        }
    }
}

/// A structured value extracted from a raw reply.
#[derive(Debug, Clone, PartialEq)]
pub enum Extracted {
    ErrorAnalysis(ErrorAnalysisPayload),
    ClusterList(Vec<ClusterItem>),
    UpdateReply(UpdateReply),
    ClassifyReply(Vec<ClassifiedError>),
}

/// Extract and validate the payload a schema demands from a raw reply.
pub fn extract_structured(raw_text: &str, schema: SchemaId) -> Result<Extracted, GatewayError> {
    match schema {
        SchemaId::ErrorAnalysis => extract_error_analysis(raw_text).map(Extracted::ErrorAnalysis),
        SchemaId::ClusterList => extract_cluster_list(raw_text).map(Extracted::ClusterList),
        SchemaId::UpdateReply => extract_update_reply(raw_text).map(Extracted::UpdateReply),
        SchemaId::ClassifyReply => extract_classify_reply(raw_text).map(Extracted::ClassifyReply),
    }
}

fn extraction_error(schema: SchemaId, message: impl Into<String>) -> GatewayError {
    GatewayError::Extraction {
        schema: schema.name().to_string(),
        message: message.into(),
    }
}

fn schema_error(schema: SchemaId, message: impl Into<String>) -> GatewayError {
    GatewayError::SchemaViolation {
        schema: schema.name().to_string(),
        message: message.into(),
    }
}

/// Locate the first balanced, parseable JSON value starting with `open` in
/// `text`. Returns the parsed value.
fn first_balanced_json(text: &str, opens: &[char]) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut start = 0usize;
    while start < bytes.len() {
        let open_at = text[start..]
            .char_indices()
            .find(|(_, c)| opens.contains(c))
            .map(|(i, _)| start + i)?;
        if let Some(end) = balanced_end(text, open_at) {
            if let Ok(value) = serde_json::from_str::<Value>(&text[open_at..=end]) {
                return Some(value);
            }
        }
        start = open_at + 1;
    }
    None
}

/// Byte index of the close bracket balancing the open bracket at `open_at`,
/// honoring JSON string and escape rules.
fn balanced_end(text: &str, open_at: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    let (open, close) = match bytes[open_at] {
        b'{' => (b'{', b'}'),
        b'[' => (b'[', b']'),
        _ => return None,
    };
    let mut depth = 0i64;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open_at) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b if b == open => depth += 1,
            b if b == close => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn string_field(obj: &Value, keys: &[&str]) -> Option<String> {
    for key in keys {
        if let Some(v) = obj.get(key) {
            if let Some(s) = v.as_str() {
                return Some(s.to_string());
            }
        }
    }
    None
}

/// Parse a per-instance analysis reply.
///
/// Accepts both `error_title` and `title` for the label field and
/// normalizes to `error_title`.
pub fn extract_error_analysis(raw_text: &str) -> Result<ErrorAnalysisPayload, GatewayError> {
    let schema = SchemaId::ErrorAnalysis;
    let value = first_balanced_json(raw_text, &['{'])
        .ok_or_else(|| extraction_error(schema, "no parsable JSON object in reply"))?;
    let criteria_value = value
        .get("required_criteria")
        .ok_or_else(|| schema_error(schema, "missing required_criteria"))?;
    let criteria_array = criteria_value
        .as_array()
        .ok_or_else(|| schema_error(schema, "required_criteria is not an array"))?;
    let mut required_criteria = Vec::with_capacity(criteria_array.len());
    for (i, entry) in criteria_array.iter().enumerate() {
        let criterion = string_field(entry, &["criterion"])
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| schema_error(schema, format!("criterion {i}: missing text")))?;
        let present_in_wrong = entry
            .get("present_in_wrong")
            .and_then(|v| v.as_bool())
            .ok_or_else(|| {
                schema_error(schema, format!("criterion {i}: present_in_wrong not a bool"))
            })?;
        let quality = Quality::parse(entry.get("quality").unwrap_or(&Value::Null))
            .map_err(|msg| schema_error(schema, format!("criterion {i}: {msg}")))?;
        if quality == Quality::Absent && present_in_wrong {
            return Err(schema_error(
                schema,
                format!("criterion {i}: absent quality contradicts present_in_wrong=true"),
            ));
        }
        required_criteria.push(CriterionAssessment {
            criterion,
            present_in_wrong,
            quality,
            evidence: string_field(entry, &["evidence"]).unwrap_or_default(),
            comment: string_field(entry, &["comment"]).unwrap_or_default(),
        });
    }
    let final_answer = value
        .get("final_answer")
        .ok_or_else(|| schema_error(schema, "missing final_answer"))?;
    let error_summary = string_field(final_answer, &["error_summary"])
        .ok_or_else(|| schema_error(schema, "final_answer missing error_summary"))?;
    let error_title = string_field(final_answer, &["error_title", "title"])
        .ok_or_else(|| schema_error(schema, "final_answer missing error_title/title"))?;
    Ok(ErrorAnalysisPayload {
        required_criteria,
        final_answer: FinalAnswer {
            error_summary,
            error_title,
        },
    })
}

fn parse_cluster_items(value: &Value, schema: SchemaId) -> Result<Vec<ClusterItem>, GatewayError> {
    let array = match value {
        Value::Array(items) => items,
        Value::Object(_) => value
            .get("clusters")
            .and_then(|v| v.as_array())
            .ok_or_else(|| schema_error(schema, "missing clusters array"))?,
        _ => return Err(schema_error(schema, "clusters payload is not an object or array")),
    };
    let mut items = Vec::with_capacity(array.len());
    for (i, entry) in array.iter().enumerate() {
        let id = entry
            .get("id")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| schema_error(schema, format!("cluster {i}: id not a positive integer")))?;
        if id == 0 {
            return Err(schema_error(schema, format!("cluster {i}: id must be >= 1")));
        }
        let name = string_field(entry, &["name"])
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| schema_error(schema, format!("cluster {i}: missing name")))?;
        let description = string_field(entry, &["description"])
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| schema_error(schema, format!("cluster {i}: missing description")))?;
        items.push(ClusterItem {
            id,
            name,
            description,
        });
    }
    Ok(items)
}

/// Parse a cluster list reply (the generation prompt's output).
pub fn extract_cluster_list(raw_text: &str) -> Result<Vec<ClusterItem>, GatewayError> {
    let schema = SchemaId::ClusterList;
    let value = first_balanced_json(raw_text, &['{'])
        .ok_or_else(|| extraction_error(schema, "no parsable JSON object in reply"))?;
    parse_cluster_items(&value, schema)
}

const UPDATE_TAGS: [&str; 4] = ["rating_score", "explanation", "suggestions", "clusters"];

/// Byte offset just past the tag token, for the first occurrence of `tag`
/// (quoted or bare) in `text`.
fn find_tag(text: &str, tag: &str) -> Option<usize> {
    let quoted = format!("\"{tag}\"");
    if let Some(at) = text.find(&quoted) {
        return Some(at + quoted.len());
    }
    text.find(tag).map(|at| at + tag.len())
}

/// Text between a tag and the next known tag (or end of reply).
fn tag_text<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let start = find_tag(text, tag)?;
    let rest = &text[start..];
    let mut end = rest.len();
    for other in UPDATE_TAGS {
        if other == tag {
            continue;
        }
        if let Some(at) = rest.find(&format!("\"{other}\"")) {
            end = end.min(at);
        }
    }
    Some(rest[..end].trim_start_matches([':', '-', '=', ' ', '\t']).trim())
}

/// Parse a tagged update/review reply.
pub fn extract_update_reply(raw_text: &str) -> Result<UpdateReply, GatewayError> {
    let schema = SchemaId::UpdateReply;
    let rating_text = tag_text(raw_text, "rating_score")
        .ok_or_else(|| extraction_error(schema, "missing rating_score tag"))?;
    let digits: String = rating_text
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    let rating_score: i64 = digits
        .parse()
        .map_err(|_| extraction_error(schema, "rating_score is not an integer"))?;
    if !(0..=100).contains(&rating_score) {
        return Err(schema_error(
            schema,
            format!("rating_score {rating_score} outside [0, 100]"),
        ));
    }
    let explanation = tag_text(raw_text, "explanation").unwrap_or_default().to_string();
    let suggestions = tag_text(raw_text, "suggestions").unwrap_or_default().to_string();
    let clusters_start = find_tag(raw_text, "clusters")
        .ok_or_else(|| extraction_error(schema, "missing clusters tag"))?;
    let clusters_value = first_balanced_json(&raw_text[clusters_start..], &['{', '['])
        .ok_or_else(|| extraction_error(schema, "no parsable clusters payload after tag"))?;
    let clusters = parse_cluster_items(&clusters_value, schema)?;
    Ok(UpdateReply {
        rating_score: rating_score as u8,
        explanation,
        suggestions,
        clusters,
    })
}

/// Parse a batched classification reply.
pub fn extract_classify_reply(raw_text: &str) -> Result<Vec<ClassifiedError>, GatewayError> {
    let schema = SchemaId::ClassifyReply;
    let value = first_balanced_json(raw_text, &['{'])
        .ok_or_else(|| extraction_error(schema, "no parsable JSON object in reply"))?;
    let entries = value
        .get("classified_errors")
        .and_then(|v| v.as_array())
        .ok_or_else(|| schema_error(schema, "missing classified_errors array"))?;
    let mut out = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let error_text = string_field(entry, &["error_text"])
            .ok_or_else(|| schema_error(schema, format!("entry {i}: missing error_text")))?;
        let category = string_field(entry, &["category"])
            .ok_or_else(|| schema_error(schema, format!("entry {i}: missing category")))?;
        out.push(ClassifiedError {
            error_text,
            category,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE_ANALYSIS: &str = r#"
Some preamble from the judge.

```json
{
  "required_criteria": [
    {
      "criterion": "Describe the relationship between A and B",
      "present_in_wrong": true,
      "quality": "incorrect",
      "evidence": "Because A increased when B increased, A must be caused by B.",
      "comment": "Confuses correlation with causation"
    },
    {
      "criterion": "Explain the mechanism of action",
      "present_in_wrong": true,
      "quality": "correct",
      "evidence": "the biochemical pathway...",
      "comment": "Accurate and complete"
    }
  ],
  "final_answer": {
    "error_summary": "The incorrect response assumes causation from correlation, leading to a flawed conclusion about the relationship between A and B.",
    "error_title": "Causal Misinterpretation"
  }
}
```
"#;

    #[test]
    fn fenced_sample_object_parses_with_two_criteria() {
        let payload = extract_error_analysis(SAMPLE_ANALYSIS).unwrap();
        assert_eq!(payload.required_criteria.len(), 2);
        assert_eq!(payload.final_answer.error_title, "Causal Misinterpretation");
        assert_eq!(payload.required_criteria[0].quality, Quality::Incorrect);
    }

    #[test]
    fn first_balanced_object_wins_over_later_ones() {
        let text = r#"
{"required_criteria": [{"criterion": "c", "present_in_wrong": false, "quality": null}],
 "final_answer": {"error_summary": "s", "title": "First"}}
{"required_criteria": [], "final_answer": {"error_summary": "", "error_title": "Second"}}
"#;
        let payload = extract_error_analysis(text).unwrap();
        assert_eq!(payload.final_answer.error_title, "First");
    }

    #[test]
    fn title_alias_normalizes_to_error_title() {
        let text = r#"{"required_criteria": [], "final_answer": {"error_summary": "s", "title": "Aliased"}}"#;
        let payload = extract_error_analysis(text).unwrap();
        assert_eq!(payload.final_answer.error_title, "Aliased");
    }

    #[test]
    fn bad_quality_string_is_schema_error() {
        let text = r#"{"required_criteria": [{"criterion": "c", "present_in_wrong": true, "quality": "good"}], "final_answer": {"error_summary": "", "error_title": ""}}"#;
        let err = extract_error_analysis(text).unwrap_err();
        assert!(matches!(err, GatewayError::SchemaViolation { .. }));
    }

    #[test]
    fn absent_quality_with_presence_is_schema_error() {
        let text = r#"{"required_criteria": [{"criterion": "c", "present_in_wrong": true, "quality": null}], "final_answer": {"error_summary": "", "error_title": ""}}"#;
        let err = extract_error_analysis(text).unwrap_err();
        assert!(matches!(err, GatewayError::SchemaViolation { .. }));
    }

    #[test]
    fn braces_inside_strings_do_not_break_balancing() {
        let text = r#"noise {"required_criteria": [{"criterion": "uses { and } and \" quotes", "present_in_wrong": false, "quality": null}], "final_answer": {"error_summary": "s", "error_title": "t"}} trailing"#;
        let payload = extract_error_analysis(text).unwrap();
        assert_eq!(payload.required_criteria[0].criterion, "uses { and } and \" quotes");
    }

    #[test]
    fn no_payload_is_extraction_error() {
        let err = extract_error_analysis("no json here").unwrap_err();
        assert!(matches!(err, GatewayError::Extraction { .. }));
    }

    #[test]
    fn cluster_list_parses_and_validates() {
        let text = r#"
"explanation": grouped by failed skill.
"clusters":
{"clusters": [
  {"id": 1, "name": "Factual Error", "description": "Model fails to retrieve accurate information."},
  {"id": 2, "name": "Computation Error", "description": "Model miscalculates."}
]}
"#;
        let items = extract_cluster_list(text).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[1].name, "Computation Error");
    }

    #[test]
    fn cluster_with_zero_id_rejected() {
        let text = r#"{"clusters": [{"id": 0, "name": "X", "description": "d"}]}"#;
        assert!(matches!(
            extract_cluster_list(text).unwrap_err(),
            GatewayError::SchemaViolation { .. }
        ));
    }

    const SAMPLE_UPDATE: &str = r#"
"rating_score": 87
"explanation": The reference list covers the data well.
"suggestions": N/A
"clusters": {
  "clusters": [
    {"id": 1, "name": "Factual Error", "description": "Model fails to retrieve accurate information."}
  ]
}
"#;

    #[test]
    fn update_reply_extracts_all_tags() {
        let reply = extract_update_reply(SAMPLE_UPDATE).unwrap();
        assert_eq!(reply.rating_score, 87);
        assert_eq!(reply.explanation, "The reference list covers the data well.");
        assert_eq!(reply.suggestions, "N/A");
        assert_eq!(reply.clusters.len(), 1);
    }

    #[test]
    fn rating_out_of_range_is_schema_error() {
        let text = SAMPLE_UPDATE.replace("87", "150");
        assert!(matches!(
            extract_update_reply(&text).unwrap_err(),
            GatewayError::SchemaViolation { .. }
        ));
    }

    #[test]
    fn update_accepts_bare_cluster_array() {
        let text = r#"
"rating_score": 60
"clusters": [{"id": 1, "name": "N", "description": "D"}]
"#;
        let reply = extract_update_reply(text).unwrap();
        assert_eq!(reply.clusters.len(), 1);
        assert!(reply.explanation.is_empty());
    }

    #[test]
    fn classify_reply_parses_entries() {
        let text = r#"
Reasoning about each error...
{"classified_errors": [
  {"error_text": "Arithmetic slip", "category": "Computation Error"},
  {"error_text": "Missed the list", "category": "Missing Required Element"}
]}
"#;
        let entries = extract_classify_reply(text).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].category, "Computation Error");
    }

    #[test]
    fn canonical_form_round_trips() {
        let payload = extract_error_analysis(SAMPLE_ANALYSIS).unwrap();
        let reparsed = extract_error_analysis(&payload.to_canonical_json()).unwrap();
        assert_eq!(payload, reparsed);
    }

    #[test]
    fn dispatcher_routes_by_schema() {
        let extracted = extract_structured(SAMPLE_ANALYSIS, SchemaId::ErrorAnalysis).unwrap();
        assert!(matches!(extracted, Extracted::ErrorAnalysis(_)));
        let extracted = extract_structured(SAMPLE_UPDATE, SchemaId::UpdateReply).unwrap();
        assert!(matches!(extracted, Extracted::UpdateReply(_)));
    }
}
