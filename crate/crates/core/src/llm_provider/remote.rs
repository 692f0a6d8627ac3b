//! Remote chat-completion backend with retry-on-transient and exponential
//! backoff. The HTTP layer sits behind a trait so tests can inject failing
//! transports.

use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    check_context, check_tools, validate_turn, AssistantTurn, ChatProvider, Message,
    ProviderConfig, ProviderError, ToolCall, ToolDef,
};

#[derive(Debug, Clone)]
pub enum TransportError {
    /// Worth retrying: connection failures, 5xx, 429.
    Transient(String),
    /// Not worth retrying: 4xx, protocol violations.
    Fatal(String),
    Timeout,
}

pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportError>;
}

/// Blocking HTTP transport over ureq.
pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportError> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let mut request = agent.post(url).set("content-type", "application/json");
        if let Some(key) = api_key {
            request = request.set("authorization", &format!("Bearer {key}"));
        }
        match request.send_string(&body.to_string()) {
            Ok(response) => response
                .into_json::<Value>()
                .map_err(|e| TransportError::Fatal(format!("response parse: {e}"))),
            Err(ureq::Error::Status(code, response)) => {
                let text = response.into_string().unwrap_or_default();
                if code >= 500 || code == 429 {
                    Err(TransportError::Transient(format!("status {code}: {text}")))
                } else {
                    Err(TransportError::Fatal(format!("status {code}: {text}")))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(TransportError::Transient(t.to_string())),
        }
    }
}

/// Stateless remote provider: two instances built from the same config are
/// interchangeable mid-run.
pub struct RemoteProvider {
    config: ProviderConfig,
    transport: Arc<dyn HttpTransport>,
    backoff_base: Duration,
}

impl RemoteProvider {
    pub fn new(
        config: ProviderConfig,
        transport: Arc<dyn HttpTransport>,
    ) -> Result<Self, ProviderError> {
        if config.base_url.is_none() {
            return Err(ProviderError::Config("remote provider requires base_url".into()));
        }
        Ok(Self {
            config,
            transport,
            backoff_base: Duration::from_millis(250),
        })
    }

    /// Shrinks the retry backoff; used by tests injecting failing transports.
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn api_key(&self) -> Option<String> {
        self.config
            .api_key_env
            .as_ref()
            .and_then(|name| std::env::var(name).ok())
    }

    fn request_body(&self, messages: &[Message], tools: &[ToolDef]) -> Value {
        let rendered: Vec<Value> = messages
            .iter()
            .map(|m| {
                let mut obj = json!({
                    "role": m.role.as_str(),
                    "content": m.content,
                });
                if let Some(id) = &m.tool_call_id {
                    obj["tool_call_id"] = json!(id);
                }
                obj
            })
            .collect();
        let rendered_tools: Vec<Value> = tools
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.params_schema,
                    }
                })
            })
            .collect();
        // Temperature 0: the sampling setup is unspecified upstream, so the
        // most reproducible setting wins.
        json!({
            "model": self.config.model.clone().unwrap_or_default(),
            "messages": rendered,
            "tools": rendered_tools,
            "temperature": 0.0,
        })
    }
}

fn parse_turn(response: &Value) -> Result<AssistantTurn, ProviderError> {
    let message = response
        .pointer("/choices/0/message")
        .ok_or_else(|| ProviderError::Http("response carries no choices".into()))?;
    if let Some(Value::Array(calls)) = message.get("tool_calls") {
        let mut parsed = Vec::new();
        for call in calls {
            let id = call
                .get("id")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            let name = call
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| {
                    ProviderError::MalformedToolCall("tool call without a name".into())
                })?
                .to_string();
            let raw_args = call.pointer("/function/arguments").cloned().unwrap_or(json!({}));
            let arguments = match raw_args {
                Value::String(s) => serde_json::from_str(&s).map_err(|e| {
                    ProviderError::MalformedToolCall(format!("arguments parse: {e}"))
                })?,
                other => other,
            };
            parsed.push(ToolCall { id, name, arguments });
        }
        return Ok(AssistantTurn::ToolCalls(parsed));
    }
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok(AssistantTurn::Text(content))
}

impl ChatProvider for RemoteProvider {
    fn complete(
        &self,
        messages: &[Message],
        tools: &[ToolDef],
    ) -> Result<AssistantTurn, ProviderError> {
        check_context(messages, self.config.max_context_tokens)?;
        check_tools(tools)?;
        let url = format!(
            "{}/chat/completions",
            self.config
                .base_url
                .as_deref()
                .unwrap_or_default()
                .trim_end_matches('/')
        );
        let body = self.request_body(messages, tools);
        let timeout = Duration::from_secs_f64(self.config.request_timeout_s);
        let api_key = self.api_key();

        let attempts = 1 + self.config.max_retries;
        let mut timed_out = false;
        let mut last_transient = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
            }
            match self
                .transport
                .post_json(&url, api_key.as_deref(), &body, timeout)
            {
                Ok(response) => {
                    let turn = parse_turn(&response)?;
                    validate_turn(&turn, tools)?;
                    return Ok(turn);
                }
                Err(TransportError::Timeout) => timed_out = true,
                Err(TransportError::Transient(reason)) => last_transient = reason,
                Err(TransportError::Fatal(reason)) => return Err(ProviderError::Http(reason)),
            }
        }
        if timed_out {
            Err(ProviderError::ProviderTimeout { attempts })
        } else {
            Err(ProviderError::Http(format!(
                "transient failures exhausted {attempts} attempts: {last_transient}"
            )))
        }
    }

    fn max_context_tokens(&self) -> u64 {
        self.config.max_context_tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_provider::ProviderKind;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn remote_config(max_retries: u32) -> ProviderConfig {
        ProviderConfig {
            kind: ProviderKind::Remote,
            base_url: Some("http://localhost:1/v1".into()),
            api_key_env: None,
            model: Some("test-model".into()),
            transcript_path: None,
            max_context_tokens: 1024,
            request_timeout_s: 1.0,
            max_retries,
        }
    }

    struct CountingTransport {
        calls: AtomicU32,
        error: fn() -> TransportError,
    }

    impl HttpTransport for CountingTransport {
        fn post_json(
            &self,
            _url: &str,
            _api_key: Option<&str>,
            _body: &Value,
            _timeout: Duration,
        ) -> Result<Value, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Err((self.error)())
        }
    }

    #[test]
    fn retries_are_bounded_by_config() {
        let transport = Arc::new(CountingTransport {
            calls: AtomicU32::new(0),
            error: || TransportError::Transient("boom".into()),
        });
        let provider = RemoteProvider::new(remote_config(3), transport.clone())
            .unwrap()
            .with_backoff_base(Duration::from_millis(1));
        let err = provider.complete(&[Message::user("q")], &[]).unwrap_err();
        assert!(matches!(err, ProviderError::Http(_)));
        assert_eq!(transport.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn timeout_surfaces_after_retries() {
        let transport = Arc::new(CountingTransport {
            calls: AtomicU32::new(0),
            error: || TransportError::Timeout,
        });
        let provider = RemoteProvider::new(remote_config(1), transport.clone())
            .unwrap()
            .with_backoff_base(Duration::from_millis(1));
        let err = provider.complete(&[Message::user("q")], &[]).unwrap_err();
        assert!(matches!(err, ProviderError::ProviderTimeout { attempts: 2 }));
        assert_eq!(transport.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn fatal_errors_do_not_retry() {
        let transport = Arc::new(CountingTransport {
            calls: AtomicU32::new(0),
            error: || TransportError::Fatal("bad request".into()),
        });
        let provider = RemoteProvider::new(remote_config(5), transport.clone())
            .unwrap()
            .with_backoff_base(Duration::from_millis(1));
        assert!(provider.complete(&[Message::user("q")], &[]).is_err());
        assert_eq!(transport.calls.load(Ordering::SeqCst), 1);
    }

    struct CannedTransport(Value);

    impl HttpTransport for CannedTransport {
        fn post_json(
            &self,
            _url: &str,
            _api_key: Option<&str>,
            _body: &Value,
            _timeout: Duration,
        ) -> Result<Value, TransportError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn parses_text_and_tool_call_responses() {
        let text = json!({"choices": [{"message": {"content": "hello"}}]});
        let provider = RemoteProvider::new(remote_config(0), Arc::new(CannedTransport(text)))
            .unwrap();
        assert_eq!(
            provider.complete(&[Message::user("q")], &[]).unwrap(),
            AssistantTurn::Text("hello".into())
        );

        // OpenAI-style string-encoded arguments are decoded.
        let call = json!({"choices": [{"message": {"tool_calls": [
            {"id": "c1", "function": {"name": "search", "arguments": "{\"query\":\"x\"}"}}
        ]}}]});
        let tools = [ToolDef {
            name: "search".into(),
            description: String::new(),
            params_schema: json!({"type": "object", "required": ["query"]}),
        }];
        let provider = RemoteProvider::new(remote_config(0), Arc::new(CannedTransport(call)))
            .unwrap();
        let turn = provider.complete(&[Message::user("q")], &tools).unwrap();
        match turn {
            AssistantTurn::ToolCalls(calls) => {
                assert_eq!(calls[0].name, "search");
                assert_eq!(calls[0].arguments, json!({"query": "x"}));
            }
            other => panic!("expected tool calls, got {other:?}"),
        }
    }

    #[test]
    fn providers_from_same_config_are_interchangeable() {
        let response = json!({"choices": [{"message": {"content": "ok"}}]});
        let a = RemoteProvider::new(remote_config(0), Arc::new(CannedTransport(response.clone())))
            .unwrap();
        let b = RemoteProvider::new(remote_config(0), Arc::new(CannedTransport(response)))
            .unwrap();
        let messages = [Message::user("q")];
        let first = a.complete(&messages, &[]).unwrap();
        let second = b.complete(&messages, &[]).unwrap();
        assert_eq!(first, second);
    }
}
