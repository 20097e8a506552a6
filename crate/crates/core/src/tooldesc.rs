//! Standardized tool/task description schema, canonical serialization, and
//! validation shared by every other module.
//!
//! A tool description has exactly three text fields: `input`, `process`, and
//! `output`. The canonical JSON serialization is a single line with that fixed
//! key order, so identical descriptions always embed to identical vectors and
//! cache keys.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Query-side modality class of a tool or query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Audio];

    pub fn label(&self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Audio => "audio",
        }
    }
}

/// Attachment kind; mixed image+audio queries are rejected at validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttachmentKind {
    Image,
    Audio,
}

/// Opaque multimodal payload attached to a query. Content is never decoded
/// locally; it is forwarded to remote APIs as-is.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attachment {
    pub kind: AttachmentKind,
    pub payload_ref: String,
    pub media_type: String,
}

/// The three-field description body shared by tool and task descriptions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionBody {
    pub input: String,
    pub process: String,
    pub output: String,
}

/// A tool's standardized description plus identity and modality tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDescription {
    pub tool_id: String,
    pub input: String,
    pub process: String,
    pub output: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl ToolDescription {
    pub fn body(&self) -> DescriptionBody {
        DescriptionBody {
            input: self.input.clone(),
            process: self.process.clone(),
            output: self.output.clone(),
        }
    }

    /// Checks the identity and field invariants.
    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.tool_id.trim().is_empty() {
            return Err(SchemaError::EmptyField("tool_id".into()));
        }
        for (name, value) in [
            ("input", &self.input),
            ("process", &self.process),
            ("output", &self.output),
        ] {
            if value.trim().is_empty() {
                return Err(SchemaError::EmptyField(name.into()));
            }
        }
        Ok(())
    }
}

/// User request: text plus optional opaque attachments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_tool_id: Option<String>,
}

impl Query {
    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.query_id.trim().is_empty() {
            return Err(SchemaError::EmptyField("query_id".into()));
        }
        if self.text.trim().is_empty() {
            return Err(SchemaError::EmptyField("text".into()));
        }
        for a in &self.attachments {
            if a.payload_ref.is_empty() {
                return Err(SchemaError::EmptyField("payload_ref".into()));
            }
        }
        modality_class(self)?;
        Ok(())
    }

    pub fn modality(&self) -> Result<Modality, SchemaError> {
        modality_class(self)
    }
}

/// Output format of a generated description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescFormat {
    Json,
    Nl,
}

impl DescFormat {
    pub fn label(&self) -> &'static str {
        match self {
            DescFormat::Json => "json",
            DescFormat::Nl => "nl",
        }
    }
}

impl std::str::FromStr for DescFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(DescFormat::Json),
            "nl" => Ok(DescFormat::Nl),
            other => Err(format!("unknown description format '{other}'")),
        }
    }
}

/// The five sanctioned candidate-generation decoding strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingStrategy {
    Greedy,
    Beam5,
    SampleT07,
    SampleT10,
    SampleBeam3,
}

impl DecodingStrategy {
    pub const ALL: [DecodingStrategy; 5] = [
        DecodingStrategy::Greedy,
        DecodingStrategy::Beam5,
        DecodingStrategy::SampleT07,
        DecodingStrategy::SampleT10,
        DecodingStrategy::SampleBeam3,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            DecodingStrategy::Greedy => "greedy",
            DecodingStrategy::Beam5 => "beam5",
            DecodingStrategy::SampleT07 => "sample_t07",
            DecodingStrategy::SampleT10 => "sample_t10",
            DecodingStrategy::SampleBeam3 => "sample_beam3",
        }
    }
}

/// A generated description of a query's task, with decoding provenance.
///
/// For NL format, `process` holds the full prose and `input`/`output` are
/// empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub format: DescFormat,
    pub input: String,
    pub process: String,
    pub output: String,
    pub strategy: DecodingStrategy,
    pub raw: String,
}

impl TaskDescription {
    pub fn validate(&self) -> Result<(), SchemaError> {
        match self.format {
            DescFormat::Json => {
                for (name, value) in [
                    ("input", &self.input),
                    ("process", &self.process),
                    ("output", &self.output),
                ] {
                    if value.trim().is_empty() {
                        return Err(SchemaError::EmptyField(name.into()));
                    }
                }
            }
            DescFormat::Nl => {
                if self.process.trim().is_empty() {
                    return Err(SchemaError::EmptyField("process".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("missing field \"{0}\"")]
    MissingField(String),
    #[error("empty field \"{0}\"")]
    EmptyField(String),
    #[error("unknown key \"{0}\"")]
    UnknownKey(String),
    #[error("wrong type for key \"{0}\" (expected string)")]
    WrongType(String),
    #[error("not a JSON object")]
    NotAnObject,
    #[error("invalid JSON: {0}")]
    InvalidJson(String),
    #[error("query mixes image and audio attachments")]
    MixedModality,
}

const BODY_KEYS: [&str; 3] = ["input", "process", "output"];

/// Validates a raw JSON object against the closed three-field schema.
///
/// Unknown top-level keys are rejected; field values are trimmed at the
/// boundaries but internal whitespace is preserved.
pub fn validate_tool(raw_json: &str) -> Result<DescriptionBody, SchemaError> {
    let value: serde_json::Value =
        serde_json::from_str(raw_json).map_err(|e| SchemaError::InvalidJson(e.to_string()))?;
    let obj = value.as_object().ok_or(SchemaError::NotAnObject)?;
    for key in obj.keys() {
        if !BODY_KEYS.contains(&key.as_str()) {
            return Err(SchemaError::UnknownKey(key.clone()));
        }
    }
    let mut fields = [String::new(), String::new(), String::new()];
    for (i, key) in BODY_KEYS.iter().enumerate() {
        let v = obj
            .get(*key)
            .ok_or_else(|| SchemaError::MissingField((*key).into()))?;
        let s = v
            .as_str()
            .ok_or_else(|| SchemaError::WrongType((*key).into()))?;
        let trimmed = s.trim();
        if trimmed.is_empty() {
            return Err(SchemaError::EmptyField((*key).into()));
        }
        fields[i] = trimmed.to_string();
    }
    let [input, process, output] = fields;
    Ok(DescriptionBody {
        input,
        process,
        output,
    })
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn canonical_body(input: &str, process: &str, output: &str) -> String {
    format!(
        "{{\"input\": {}, \"process\": {}, \"output\": {}}}",
        json_str(input),
        json_str(process),
        json_str(output)
    )
}

/// Deterministic single-line serialization of a tool description.
///
/// JSON format emits keys in the fixed order `input`, `process`, `output`;
/// NL format emits the `process` prose verbatim.
pub fn canonical_text_tool(d: &ToolDescription, format: DescFormat) -> String {
    match format {
        DescFormat::Json => canonical_body(&d.input, &d.process, &d.output),
        DescFormat::Nl => d.process.clone(),
    }
}

/// Canonical serialization of a description body (JSON format).
pub fn canonical_text_body(d: &DescriptionBody) -> String {
    canonical_body(&d.input, &d.process, &d.output)
}

/// Canonical serialization of a task description in its own format.
pub fn canonical_text_task(d: &TaskDescription) -> String {
    match d.format {
        DescFormat::Json => canonical_body(&d.input, &d.process, &d.output),
        DescFormat::Nl => d.process.clone(),
    }
}

/// Modality class of a query: `Text` iff no attachments, otherwise the kind
/// of its attachments. Mixed image+audio queries are rejected.
pub fn modality_class(q: &Query) -> Result<Modality, SchemaError> {
    let has_image = q
        .attachments
        .iter()
        .any(|a| a.kind == AttachmentKind::Image);
    let has_audio = q
        .attachments
        .iter()
        .any(|a| a.kind == AttachmentKind::Audio);
    match (has_image, has_audio) {
        (false, false) => Ok(Modality::Text),
        (true, false) => Ok(Modality::Image),
        (false, true) => Ok(Modality::Audio),
        (true, true) => Err(SchemaError::MixedModality),
    }
}
