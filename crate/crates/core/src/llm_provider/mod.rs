//! Uniform chat-completion interface with tool calling.
//!
//! Two backends: a remote endpoint speaking the usual JSON chat-completion
//! wire, and a deterministic scripted transcript for offline runs. Token
//! accounting is a chars/4 heuristic supporting the 64k context contract.

mod remote;
mod scripted;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use remote::{HttpTransport, RemoteProvider, TransportError, UreqTransport};
pub use scripted::{ScriptedProvider, TranscriptEntry, TranscriptKey, WILDCARD_CONV_HASH};

pub const DEFAULT_MAX_CONTEXT_TOKENS: u64 = 65_536;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("context overflow: {used} tokens exceeds the {max} budget")]
    ContextOverflow { used: u64, max: u64 },
    #[error("provider timed out after {attempts} attempts")]
    ProviderTimeout { attempts: u32 },
    #[error("malformed tool call: {0}")]
    MalformedToolCall(String),
    #[error("transcript exhausted at step {step}")]
    TranscriptExhausted { step: u64 },
    #[error("transcript key mismatch at step {step}: conversation hash {conv_hash}")]
    TranscriptKeyMismatch { step: u64, conv_hash: String },
    #[error("http failure: {0}")]
    Http(String),
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into(), tool_call_id: None }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into(), tool_call_id: None }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into(), tool_call_id: None }
    }

    pub fn tool(content: impl Into<String>, tool_call_id: impl Into<String>) -> Self {
        Self {
            role: Role::Tool,
            content: content.into(),
            tool_call_id: Some(tool_call_id.into()),
        }
    }
}

/// A callable tool advertised to the model. `params_schema` is a
/// JSON-schema-style document used for structural validation of arguments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolDef {
    pub name: String,
    pub description: String,
    pub params_schema: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    pub arguments: Value,
}

/// One assistant turn: either plain text or a non-empty batch of tool calls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssistantTurn {
    Text(String),
    ToolCalls(Vec<ToolCall>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Remote,
    Scripted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub transcript_path: Option<std::path::PathBuf>,
    #[serde(default = "default_max_context_tokens")]
    pub max_context_tokens: u64,
    #[serde(default = "default_request_timeout_s")]
    pub request_timeout_s: f64,
    #[serde(default)]
    pub max_retries: u32,
}

fn default_max_context_tokens() -> u64 {
    DEFAULT_MAX_CONTEXT_TOKENS
}

fn default_request_timeout_s() -> f64 {
    60.0
}

/// Chat-completion surface shared by both provider kinds. `complete` performs
/// exactly one model turn; callers keep the conversation within
/// `max_context_tokens` (compacting first when needed).
pub trait ChatProvider: Send + Sync {
    fn complete(&self, messages: &[Message], tools: &[ToolDef])
        -> Result<AssistantTurn, ProviderError>;

    fn max_context_tokens(&self) -> u64 {
        DEFAULT_MAX_CONTEXT_TOKENS
    }
}

/// Builds a provider from a config document.
pub fn provider_from_config(
    config: &ProviderConfig,
) -> Result<std::sync::Arc<dyn ChatProvider>, ProviderError> {
    if config.max_context_tokens == 0 {
        return Err(ProviderError::Config(
            "max_context_tokens must be positive".into(),
        ));
    }
    match config.kind {
        ProviderKind::Scripted => {
            let path = config.transcript_path.as_ref().ok_or_else(|| {
                ProviderError::Config("scripted provider requires transcript_path".into())
            })?;
            Ok(std::sync::Arc::new(ScriptedProvider::from_file(path, config.max_context_tokens)?))
        }
        ProviderKind::Remote => Ok(std::sync::Arc::new(RemoteProvider::new(
            config.clone(),
            std::sync::Arc::new(UreqTransport),
        )?)),
    }
}

/// Deterministic token estimate: `ceil(total content chars / 4)` plus a fixed
/// overhead of 8 per message. Monotone in content length.
pub fn count_tokens_approx(messages: &[Message]) -> u64 {
    let chars: u64 = messages
        .iter()
        .map(|m| m.content.chars().count() as u64)
        .sum();
    chars.div_ceil(4) + 8 * messages.len() as u64
}

/// Stable hash of a rendered conversation, used as the scripted transcript
/// key. A changed prompt changes the hash and breaks replay loudly.
pub fn conversation_hash(messages: &[Message]) -> String {
    let mut hasher = Sha256::new();
    for message in messages {
        hasher.update(message.role.as_str().as_bytes());
        hasher.update([0x1f]);
        hasher.update(message.content.as_bytes());
        hasher.update([0x1f]);
        if let Some(id) = &message.tool_call_id {
            hasher.update(id.as_bytes());
        }
        hasher.update([0x1e]);
    }
    let digest = hasher.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..16].to_string()
}

/// Guards shared by both provider kinds: the context budget, and tool-name
/// uniqueness within the request.
pub(crate) fn check_context(messages: &[Message], max: u64) -> Result<(), ProviderError> {
    let used = count_tokens_approx(messages);
    if used > max {
        return Err(ProviderError::ContextOverflow { used, max });
    }
    Ok(())
}

pub(crate) fn check_tools(tools: &[ToolDef]) -> Result<(), ProviderError> {
    let mut seen = std::collections::BTreeSet::new();
    for tool in tools {
        if !seen.insert(tool.name.as_str()) {
            return Err(ProviderError::Config(format!(
                "duplicate tool name {:?} in request",
                tool.name
            )));
        }
    }
    Ok(())
}

/// Structural validation of a tool call against the advertised tools: the
/// name must be registered, the arguments must be an object, required
/// properties must be present and declared property types must match.
pub fn validate_tool_call(call: &ToolCall, tools: &[ToolDef]) -> Result<(), ProviderError> {
    let Some(def) = tools.iter().find(|t| t.name == call.name) else {
        return Err(ProviderError::MalformedToolCall(format!(
            "unknown tool {:?}",
            call.name
        )));
    };
    let Value::Object(args) = &call.arguments else {
        return Err(ProviderError::MalformedToolCall(format!(
            "arguments for {:?} must be an object",
            call.name
        )));
    };
    let schema = &def.params_schema;
    if let Some(Value::Array(required)) = schema.get("required") {
        for item in required {
            if let Value::String(name) = item {
                if !args.contains_key(name) {
                    return Err(ProviderError::MalformedToolCall(format!(
                        "tool {:?} missing required argument {name:?}",
                        call.name
                    )));
                }
            }
        }
    }
    if let Some(Value::Object(properties)) = schema.get("properties") {
        for (name, value) in args {
            let Some(prop) = properties.get(name) else {
                continue;
            };
            let Some(ty) = prop.get("type").and_then(Value::as_str) else {
                continue;
            };
            let ok = match ty {
                "string" => value.is_string(),
                "number" => value.is_number(),
                "integer" => value.is_i64() || value.is_u64(),
                "boolean" => value.is_boolean(),
                "array" => value.is_array(),
                "object" => value.is_object(),
                _ => true,
            };
            if !ok {
                return Err(ProviderError::MalformedToolCall(format!(
                    "tool {:?} argument {name:?} expects type {ty}",
                    call.name
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn validate_turn(
    turn: &AssistantTurn,
    tools: &[ToolDef],
) -> Result<(), ProviderError> {
    if let AssistantTurn::ToolCalls(calls) = turn {
        if calls.is_empty() {
            return Err(ProviderError::MalformedToolCall(
                "tool_calls turn carries no calls".into(),
            ));
        }
        for call in calls {
            validate_tool_call(call, tools)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn token_count_formula() {
        assert_eq!(count_tokens_approx(&[]), 0);
        assert_eq!(count_tokens_approx(&[Message::user("abcd")]), 9);
        assert_eq!(count_tokens_approx(&[Message::user("abcde")]), 10);
        assert_eq!(
            count_tokens_approx(&[Message::user("ab"), Message::user("cd")]),
            17
        );
    }

    #[test]
    fn token_count_is_monotone_in_content() {
        let short = count_tokens_approx(&[Message::user("hello")]);
        let long = count_tokens_approx(&[Message::user("hellohello")]);
        assert!(long >= short);
    }

    #[test]
    fn conversation_hash_is_stable_and_sensitive() {
        let a = vec![Message::system("s"), Message::user("u")];
        assert_eq!(conversation_hash(&a), conversation_hash(&a));
        let b = vec![Message::system("s"), Message::user("v")];
        assert_ne!(conversation_hash(&a), conversation_hash(&b));
    }

    fn search_tool() -> ToolDef {
        ToolDef {
            name: "search".into(),
            description: "keyword search".into(),
            params_schema: json!({
                "type": "object",
                "properties": {
                    "query": {"type": "string"},
                    "top_k": {"type": "integer"}
                },
                "required": ["query"]
            }),
        }
    }

    #[test]
    fn tool_call_validation() {
        let tools = [search_tool()];
        let ok = ToolCall {
            id: "c1".into(),
            name: "search".into(),
            arguments: json!({"query": "ted prize", "top_k": 5}),
        };
        assert!(validate_tool_call(&ok, &tools).is_ok());

        let missing = ToolCall {
            id: "c2".into(),
            name: "search".into(),
            arguments: json!({"top_k": 5}),
        };
        assert!(matches!(
            validate_tool_call(&missing, &tools),
            Err(ProviderError::MalformedToolCall(_))
        ));

        let wrong_type = ToolCall {
            id: "c3".into(),
            name: "search".into(),
            arguments: json!({"query": 7}),
        };
        assert!(matches!(
            validate_tool_call(&wrong_type, &tools),
            Err(ProviderError::MalformedToolCall(_))
        ));

        let unknown = ToolCall {
            id: "c4".into(),
            name: "teleport".into(),
            arguments: json!({}),
        };
        assert!(matches!(
            validate_tool_call(&unknown, &tools),
            Err(ProviderError::MalformedToolCall(_))
        ));
    }
}
