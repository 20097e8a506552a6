//! Description generation: model cards to tool descriptions and queries to
//! task descriptions, through a chat-completion wire client. Prompt templates
//! are byte-frozen text assets; a deterministic mock generator stands in for
//! the remote model in tests and offline runs.

use crate::corpus::ToolCorpus;
use crate::embed::RetryPolicy;
use crate::tooldesc::{
    canonical_text_body, validate_tool, DecodingStrategy, DescFormat, DescriptionBody, Query,
    SchemaError, TaskDescription,
};
use crate::util::fnv1a64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("missing placeholder \"{0}\"")]
    MissingPlaceholder(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("no valid {format} description found after {} attempt(s)", .attempts.len())]
    Parse {
        format: &'static str,
        attempts: Vec<String>,
    },
    #[error("unknown tool \"{0}\"")]
    UnknownTool(String),
    #[error("attachment payload unreadable: {0}")]
    Attachment(String),
    #[error("schema error: {0}")]
    Schema(#[from] SchemaError),
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateName {
    JsonModelDescription,
    JsonInference,
    NlModelDescription,
    NlInference,
}

/// A versioned prompt asset with its declared placeholders.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: &'static str,
    pub placeholders: &'static [&'static str],
    pub in_context_examples: usize,
}

const JSON_MODEL_DESCRIPTION: &str = include_str!("../assets/prompts/json_model_description.txt");
const JSON_INFERENCE: &str = include_str!("../assets/prompts/json_inference.txt");
const NL_MODEL_DESCRIPTION: &str = include_str!("../assets/prompts/nl_model_description.txt");
const NL_INFERENCE: &str = include_str!("../assets/prompts/nl_inference.txt");

impl PromptTemplate {
    pub fn get(name: TemplateName) -> PromptTemplate {
        match name {
            TemplateName::JsonModelDescription => PromptTemplate {
                name,
                body: JSON_MODEL_DESCRIPTION,
                placeholders: &["model_card"],
                in_context_examples: 1,
            },
            TemplateName::JsonInference => PromptTemplate {
                name,
                body: JSON_INFERENCE,
                placeholders: &["query"],
                in_context_examples: 2,
            },
            TemplateName::NlModelDescription => PromptTemplate {
                name,
                body: NL_MODEL_DESCRIPTION,
                placeholders: &["model_card"],
                in_context_examples: 1,
            },
            TemplateName::NlInference => PromptTemplate {
                name,
                body: NL_INFERENCE,
                placeholders: &["query"],
                in_context_examples: 2,
            },
        }
    }

    pub fn model_description(format: DescFormat) -> PromptTemplate {
        Self::get(match format {
            DescFormat::Json => TemplateName::JsonModelDescription,
            DescFormat::Nl => TemplateName::NlModelDescription,
        })
    }

    pub fn inference(format: DescFormat) -> PromptTemplate {
        Self::get(match format {
            DescFormat::Json => TemplateName::JsonInference,
            DescFormat::Nl => TemplateName::NlInference,
        })
    }
}

/// Substitutes declared placeholders only; everything else in the asset stays
/// byte-identical. Extra args are ignored.
pub fn render_prompt(
    template: &PromptTemplate,
    args: &HashMap<String, String>,
) -> Result<String, GenError> {
    let mut out = template.body.to_string();
    for placeholder in template.placeholders {
        let value = args
            .get(*placeholder)
            .ok_or_else(|| GenError::MissingPlaceholder((*placeholder).to_string()))?;
        out = out.replace(&format!("{{{placeholder}}}"), value);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generation configuration
// ---------------------------------------------------------------------------

/// Decoding parameters; the five presets are the only sanctioned strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub strategy: DecodingStrategy,
    pub temperature: f64,
    pub num_beams: u32,
    pub seed: Option<u64>,
}

impl GenerationConfig {
    pub fn preset(strategy: DecodingStrategy, seed: Option<u64>) -> GenerationConfig {
        let (temperature, num_beams) = match strategy {
            DecodingStrategy::Greedy => (0.0, 1),
            DecodingStrategy::Beam5 => (0.0, 5),
            DecodingStrategy::SampleT07 => (0.7, 1),
            DecodingStrategy::SampleT10 => (1.0, 1),
            DecodingStrategy::SampleBeam3 => (1.0, 3),
        };
        GenerationConfig {
            strategy,
            temperature,
            num_beams,
            seed,
        }
    }

    pub fn all_presets(seed: Option<u64>) -> Vec<GenerationConfig> {
        DecodingStrategy::ALL
            .iter()
            .map(|&s| Self::preset(s, seed))
            .collect()
    }
}

/// Outcome of one generation attempt; exactly one of `parsed`/`parse_error`
/// is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub query_id: String,
    pub strategy: DecodingStrategy,
    pub raw_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<TaskDescription>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

// ---------------------------------------------------------------------------
// Chat wire client
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentPart {
    Text { text: String },
    Image { media_type: String, data: String },
    Audio { media_type: String, data: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_beams: Option<u32>,
}

pub trait ChatClient: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String, GenError>;
}

#[derive(Deserialize)]
struct ChatWireResponse {
    choices: Vec<ChatWireChoice>,
}

#[derive(Deserialize)]
struct ChatWireChoice {
    message: ChatWireMessage,
}

#[derive(Deserialize)]
struct ChatWireMessage {
    content: String,
}

/// HTTP chat client:
/// `POST {"model", "messages", "temperature", "seed"?}` ->
/// `{"choices": [{"message": {"content"}}]}`.
pub struct RemoteChatClient {
    endpoint: String,
    model_id: String,
    token: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl RemoteChatClient {
    pub fn new(endpoint: &str, model_id: &str, token: Option<String>) -> Self {
        RemoteChatClient {
            endpoint: endpoint.to_string(),
            model_id: model_id.to_string(),
            token,
            retry: RetryPolicy::default(),
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Builds from `RATATOOL_CHAT_URL`, `RATATOOL_CHAT_MODEL`, and
    /// `RATATOOL_CHAT_TOKEN`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("RATATOOL_CHAT_URL").ok()?;
        let model = std::env::var("RATATOOL_CHAT_MODEL").ok()?;
        let token = std::env::var("RATATOOL_CHAT_TOKEN").ok();
        Some(Self::new(&url, &model, token))
    }
}

impl ChatClient for RemoteChatClient {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GenError> {
        let mut last_err = String::new();
        for attempt in 0..self.retry.attempts {
            let mut builder = self.client.post(&self.endpoint).json(request);
            if let Some(token) = &self.token {
                builder = builder.bearer_auth(token);
            }
            match builder.send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        let parsed: ChatWireResponse = resp
                            .json()
                            .map_err(|e| GenError::Generation(e.to_string()))?;
                        return parsed
                            .choices
                            .into_iter()
                            .next()
                            .map(|c| c.message.content)
                            .ok_or_else(|| GenError::Generation("empty choices".into()));
                    }
                    let body = resp.text().unwrap_or_default();
                    last_err = format!("status {status}: {}", body.chars().take(200).collect::<String>());
                }
                Err(e) => last_err = e.to_string(),
            }
            if attempt + 1 < self.retry.attempts {
                std::thread::sleep(self.retry.backoff(attempt));
            }
        }
        Err(GenError::Generation(last_err))
    }
}

/// Replays a fixed sequence of responses and records every request.
pub struct ScriptedChatClient {
    pub responses: std::sync::Mutex<Vec<String>>,
    pub requests: std::sync::Mutex<Vec<ChatRequest>>,
    model: String,
}

impl ScriptedChatClient {
    pub fn new(responses: Vec<&str>) -> Self {
        ScriptedChatClient {
            responses: std::sync::Mutex::new(responses.into_iter().map(String::from).collect()),
            requests: std::sync::Mutex::new(Vec::new()),
            model: "scripted".into(),
        }
    }
}

impl ChatClient for ScriptedChatClient {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GenError> {
        self.requests.lock().unwrap().push(request.clone());
        let mut responses = self.responses.lock().unwrap();
        if responses.is_empty() {
            return Err(GenError::Generation("script exhausted".into()));
        }
        Ok(responses.remove(0))
    }
}

// ---------------------------------------------------------------------------
// JSON extraction and description generation
// ---------------------------------------------------------------------------

/// First balanced-brace object in `text`, respecting JSON string literals.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = bytes.iter().position(|&b| b == b'{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes[start..].iter().enumerate() {
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
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

const REPROMPT_SUFFIX: &str = "\n\nReturn only a valid JSON object.";

fn parse_response(raw: &str, format: DescFormat) -> Result<DescriptionBody, String> {
    match format {
        DescFormat::Json => {
            let object = extract_json_object(raw).ok_or("no JSON object in response")?;
            validate_tool(object).map_err(|e| e.to_string())
        }
        DescFormat::Nl => {
            let prose = raw.trim();
            if prose.is_empty() {
                return Err("empty response".into());
            }
            Ok(DescriptionBody {
                input: String::new(),
                process: prose.to_string(),
                output: String::new(),
            })
        }
    }
}

/// Draft description produced from a model card, before identity/modality
/// are attached.
#[derive(Debug, Clone)]
pub struct ToolDescriptionDraft {
    pub format: DescFormat,
    pub input: String,
    pub process: String,
    pub output: String,
    pub raw: String,
}

/// Converts a model card into a standardized description: render the matching
/// template, call the chat client, extract and validate. On parse failure one
/// automatic re-prompt is issued with a terse corrective instruction.
pub fn describe_tool(
    model_card: &str,
    format: DescFormat,
    client: &dyn ChatClient,
) -> Result<ToolDescriptionDraft, GenError> {
    if model_card.trim().is_empty() {
        return Err(GenError::Generation("empty model card".into()));
    }
    let template = PromptTemplate::model_description(format);
    let mut args = HashMap::new();
    args.insert("model_card".to_string(), model_card.to_string());
    let prompt = render_prompt(&template, &args)?;

    let mut attempts = Vec::new();
    for retry in 0..2 {
        let text = if retry == 0 {
            prompt.clone()
        } else {
            format!("{prompt}{REPROMPT_SUFFIX}")
        };
        let request = ChatRequest {
            model: client.model_id().to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: vec![ContentPart::Text { text }],
            }],
            temperature: 0.0,
            seed: None,
            num_beams: None,
        };
        let raw = client.complete(&request)?;
        match parse_response(&raw, format) {
            Ok(body) => {
                return Ok(ToolDescriptionDraft {
                    format,
                    input: body.input,
                    process: body.process,
                    output: body.output,
                    raw,
                })
            }
            Err(_) => attempts.push(raw),
        }
    }
    Err(GenError::Parse {
        format: match format {
            DescFormat::Json => "JSON",
            DescFormat::Nl => "NL",
        },
        attempts,
    })
}

fn attachment_parts(q: &Query) -> Result<Vec<ContentPart>, GenError> {
    let mut parts = Vec::new();
    for a in &q.attachments {
        let bytes = std::fs::read(&a.payload_ref)
            .map_err(|e| GenError::Attachment(format!("{}: {e}", a.payload_ref)))?;
        let data = base64::engine::general_purpose::STANDARD.encode(bytes);
        parts.push(match a.kind {
            crate::tooldesc::AttachmentKind::Image => ContentPart::Image {
                media_type: a.media_type.clone(),
                data,
            },
            crate::tooldesc::AttachmentKind::Audio => ContentPart::Audio {
                media_type: a.media_type.clone(),
                data,
            },
        });
    }
    Ok(parts)
}

/// Generates a task description for a query. Attachments are forwarded as
/// opaque base64 parts; parse failures are recorded in the result rather than
/// raised so batch generation can proceed.
pub fn describe_task(
    q: &Query,
    format: DescFormat,
    config: &GenerationConfig,
    client: &dyn ChatClient,
) -> Result<GenerationRecord, GenError> {
    let template = PromptTemplate::inference(format);
    let mut args = HashMap::new();
    args.insert("query".to_string(), q.text.clone());
    let prompt = render_prompt(&template, &args)?;
    let extra = attachment_parts(q)?;

    let mut attempts: Vec<String> = Vec::new();
    for retry in 0..2 {
        let text = if retry == 0 {
            prompt.clone()
        } else {
            format!("{prompt}{REPROMPT_SUFFIX}")
        };
        let mut content = vec![ContentPart::Text { text }];
        content.extend(extra.iter().cloned());
        let request = ChatRequest {
            model: client.model_id().to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content,
            }],
            temperature: config.temperature,
            seed: config.seed,
            num_beams: if config.num_beams > 1 {
                Some(config.num_beams)
            } else {
                None
            },
        };
        let raw = client.complete(&request)?;
        match parse_response(&raw, format) {
            Ok(body) => {
                return Ok(GenerationRecord {
                    query_id: q.query_id.clone(),
                    strategy: config.strategy,
                    raw_output: raw.clone(),
                    parsed: Some(TaskDescription {
                        format,
                        input: body.input,
                        process: body.process,
                        output: body.output,
                        strategy: config.strategy,
                        raw,
                    }),
                    parse_error: None,
                })
            }
            Err(e) => attempts.push(format!("{e}: {raw}")),
        }
    }
    Ok(GenerationRecord {
        query_id: q.query_id.clone(),
        strategy: config.strategy,
        raw_output: attempts.last().cloned().unwrap_or_default(),
        parsed: None,
        parse_error: Some(attempts.join(" | ")),
    })
}

// ---------------------------------------------------------------------------
// Mock generator
// ---------------------------------------------------------------------------

/// Anything that turns a query into a task description; implemented by the
/// chat-backed path and by [`MockGenerator`].
pub trait TaskGenerator: Send + Sync {
    fn generate(&self, q: &Query) -> Result<TaskDescription, GenError>;
}

/// Returns the ground-truth tool's description with a seeded fraction of word
/// tokens replaced by random corpus words. Noise 0 is a verbatim copy, so any
/// injective embedder retrieves the ground truth at rank 1.
pub fn mock_generate(
    q: &Query,
    corpus: &ToolCorpus,
    noise: f64,
    seed: u64,
) -> Result<TaskDescription, GenError> {
    let gt = q
        .gt_tool_id
        .as_deref()
        .ok_or_else(|| GenError::UnknownTool("<none>".into()))?;
    let tool = corpus
        .tool(gt)
        .ok_or_else(|| GenError::UnknownTool(gt.to_string()))?;

    // Per-query stream: stable under reordering and parallel evaluation.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(q.query_id.as_bytes()));

    let vocab: Vec<&str> = corpus
        .tools
        .iter()
        .flat_map(|t| {
            t.input
                .split_whitespace()
                .chain(t.process.split_whitespace())
                .chain(t.output.split_whitespace())
        })
        .collect();

    let mut scramble = |text: &str| -> String {
        let mut words: Vec<String> = text.split_whitespace().map(String::from).collect();
        let k = ((noise * words.len() as f64).round() as usize).min(words.len());
        let mut positions: Vec<usize> = (0..words.len()).collect();
        positions.shuffle(&mut rng);
        for &pos in positions.iter().take(k) {
            words[pos] = vocab[rng.gen_range(0..vocab.len())].to_string();
        }
        words.join(" ")
    };

    let body = DescriptionBody {
        input: scramble(&tool.input),
        process: scramble(&tool.process),
        output: scramble(&tool.output),
    };
    let raw = canonical_text_body(&body);
    Ok(TaskDescription {
        format: DescFormat::Json,
        input: body.input,
        process: body.process,
        output: body.output,
        strategy: DecodingStrategy::Greedy,
        raw,
    })
}

/// [`TaskGenerator`] wrapper around [`mock_generate`].
pub struct MockGenerator<'a> {
    pub corpus: &'a ToolCorpus,
    pub noise: f64,
    pub seed: u64,
}

impl<'a> TaskGenerator for MockGenerator<'a> {
    fn generate(&self, q: &Query) -> Result<TaskDescription, GenError> {
        mock_generate(q, self.corpus, self.noise, self.seed)
    }
}

/// Chat-backed [`TaskGenerator`].
pub struct ChatGenerator<'a> {
    pub client: &'a dyn ChatClient,
    pub format: DescFormat,
    pub config: GenerationConfig,
}

impl<'a> TaskGenerator for ChatGenerator<'a> {
    fn generate(&self, q: &Query) -> Result<TaskDescription, GenError> {
        let record = describe_task(q, self.format, &self.config, self.client)?;
        record.parsed.ok_or(GenError::Parse {
            format: self.format.label_static(),
            attempts: vec![record.raw_output],
        })
    }
}

impl DescFormat {
    fn label_static(&self) -> &'static str {
        match self {
            DescFormat::Json => "JSON",
            DescFormat::Nl => "NL",
        }
    }
}

/// Generates candidates for a query under every preset strategy, aggregating
/// records in strategy enumeration order.
pub fn generate_candidates(
    q: &Query,
    format: DescFormat,
    seed: Option<u64>,
    client: &dyn ChatClient,
) -> Result<Vec<GenerationRecord>, GenError> {
    GenerationConfig::all_presets(seed)
        .iter()
        .map(|cfg| describe_task(q, format, cfg, client))
        .collect()
}
