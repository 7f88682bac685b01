use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use super::config::RoleConfig;
use super::gateway::{Backend, ChatMessage, TransportError};

/// Chat-completions backend speaking the common `{"model", "messages"}` JSON shape.
#[derive(Default)]
pub struct HttpBackend {
    agents: Mutex<HashMap<u64, ureq::Agent>>,
}

impl HttpBackend {
    pub fn new() -> Self {
        Self::default()
    }

    fn agent(&self, timeout_secs: u64) -> ureq::Agent {
        let mut agents = self.agents.lock().unwrap_or_else(|p| p.into_inner());
        agents
            .entry(timeout_secs)
            .or_insert_with(|| {
                ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_secs(timeout_secs.max(1))))
                    .http_status_as_error(false)
                    .build()
                    .into()
            })
            .clone()
    }
}

pub(crate) fn request_body(role: &RoleConfig, messages: &[ChatMessage]) -> Value {
    let messages: Vec<Value> = messages
        .iter()
        .map(|m| json!({"role": m.speaker.as_str(), "content": m.text}))
        .collect();
    json!({
        "model": role.model,
        "messages": messages,
        "temperature": role.temperature,
    })
}

/// Pulls `choices[0].message.content` out of a chat-completions response.
pub(crate) fn response_text(body: &str) -> Result<String, TransportError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| TransportError::fatal(format!("response is not JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| TransportError::fatal("response has no choices[0].message.content"))
}

fn retryable_status(status: u16) -> bool {
    matches!(status, 408 | 429) || status >= 500
}

impl Backend for HttpBackend {
    fn send(&self, role: &RoleConfig, messages: &[ChatMessage]) -> Result<String, TransportError> {
        if role.endpoint.is_empty() {
            return Err(TransportError::fatal(format!("role `{}` has no endpoint", role.name)));
        }
        let mut request = self
            .agent(role.timeout_secs)
            .post(&role.endpoint)
            .header("Content-Type", "application/json");
        if let Some(var) = &role.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| TransportError::fatal(format!("environment variable `{var}` is not set")))?;
            request = request.header(role.auth_header.as_str(), format!("{}{}", role.auth_prefix, key));
        }
        for (k, v) in &role.headers {
            request = request.header(k.as_str(), v.as_str());
        }
        let body = request_body(role, messages).to_string();
        let mut response = request
            .send(body)
            .map_err(|e| TransportError::retryable(format!("transport: {e}")))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::retryable(format!("reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(TransportError {
                message: format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()),
                status: Some(status),
                retryable: retryable_status(status),
            });
        }
        response_text(&text)
    }
}
