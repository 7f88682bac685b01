use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::RoleConfig;
use super::gateway::{fingerprint, Backend, ChatExchange, ChatMessage, TransportError};
use crate::error::{QkgError, Result};

/// What the mock does for a request no script entry covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MissPolicy {
    #[default]
    Error,
    Default(String),
}

/// Substring rule: matches when the role agrees (if given), every `contains`
/// needle occurs somewhere in the conversation, and every `last_contains`
/// needle occurs in the final message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub role: Option<String>,
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub last_contains: Vec<String>,
    pub response: String,
}

impl MockRule {
    fn matches(&self, role: &str, messages: &[ChatMessage]) -> bool {
        if self.role.as_deref().is_some_and(|r| r != role) {
            return false;
        }
        let all = || messages.iter().map(|m| m.text.as_str());
        let last = messages.last().map(|m| m.text.as_str()).unwrap_or("");
        self.contains.iter().all(|n| all().any(|t| t.contains(n.as_str())))
            && self.last_contains.iter().all(|n| last.contains(n.as_str()))
    }
}

/// On-disk script format for the mock backend.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub fingerprints: HashMap<String, String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub miss: MissPolicy,
}

impl MockScript {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QkgError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| QkgError::Config(format!("{}: {e}", path.display())))
    }

    /// Script that replays the successful responses of a run log.
    pub fn from_run_log(exchanges: &[ChatExchange]) -> Self {
        let fingerprints = exchanges
            .iter()
            .filter_map(|x| x.response.as_ref().map(|r| (x.fingerprint.clone(), r.clone())))
            .collect();
        MockScript {
            fingerprints,
            ..Default::default()
        }
    }
}

type Responder = Box<dyn Fn(&str, &[ChatMessage]) -> Option<String> + Send + Sync>;

/// Deterministic scripted backend. Lookup order: fingerprint table,
/// responder function, per-role queue, substring rules, miss policy.
#[derive(Default)]
pub struct MockBackend {
    script: MockScript,
    responder: Option<Responder>,
    queues: Mutex<HashMap<String, VecDeque<String>>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend {
            script,
            ..Default::default()
        }
    }

    pub fn from_fingerprints(map: HashMap<String, String>, miss: MissPolicy) -> Self {
        Self::new(MockScript {
            fingerprints: map,
            rules: Vec::new(),
            miss,
        })
    }

    pub fn with_responder(
        mut self,
        f: impl Fn(&str, &[ChatMessage]) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.responder = Some(Box::new(f));
        self
    }

    /// Responses handed out in order to successive requests for `role`.
    pub fn with_queue<I, S>(self, role: &str, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.queues
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .entry(role.to_string())
            .or_default()
            .extend(responses.into_iter().map(Into::into));
        self
    }

    pub fn with_rule(mut self, rule: MockRule) -> Self {
        self.script.rules.push(rule);
        self
    }

    pub fn with_miss(mut self, miss: MissPolicy) -> Self {
        self.script.miss = miss;
        self
    }

    pub fn lookup(&self, role: &str, messages: &[ChatMessage]) -> std::result::Result<String, String> {
        let fp = fingerprint(role, messages);
        if let Some(text) = self.script.fingerprints.get(&fp) {
            return Ok(text.clone());
        }
        if let Some(text) = self.responder.as_ref().and_then(|f| f(role, messages)) {
            return Ok(text);
        }
        if let Some(text) = self
            .queues
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get_mut(role)
            .and_then(VecDeque::pop_front)
        {
            return Ok(text);
        }
        if let Some(rule) = self.script.rules.iter().find(|r| r.matches(role, messages)) {
            return Ok(rule.response.clone());
        }
        match &self.script.miss {
            MissPolicy::Default(text) => Ok(text.clone()),
            MissPolicy::Error => Err(QkgError::MockMiss(fp).to_string()),
        }
    }
}

impl Backend for MockBackend {
    fn send(&self, role: &RoleConfig, messages: &[ChatMessage]) -> std::result::Result<String, TransportError> {
        self.lookup(&role.name, messages).map_err(TransportError::fatal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msgs() -> Vec<ChatMessage> {
        vec![ChatMessage::user("hello")]
    }

    #[test]
    fn fingerprint_hit() {
        let fp = fingerprint("reasoner", &msgs());
        let mock = MockBackend::from_fingerprints([(fp, "X".to_string())].into(), MissPolicy::Error);
        assert_eq!(mock.lookup("reasoner", &msgs()).unwrap(), "X");
    }

    #[test]
    fn miss_with_error_policy_is_deterministic() {
        let mock = MockBackend::default();
        let a = mock.lookup("reasoner", &msgs()).unwrap_err();
        let b = mock.lookup("reasoner", &msgs()).unwrap_err();
        assert_eq!(a, b);
        assert!(a.contains(&fingerprint("reasoner", &msgs())));
    }

    #[test]
    fn miss_with_default_policy() {
        let mock = MockBackend::default().with_miss(MissPolicy::Default("fallback".into()));
        assert_eq!(mock.lookup("x", &msgs()).unwrap(), "fallback");
    }

    #[test]
    fn queue_then_rule() {
        let mock = MockBackend::default()
            .with_queue("validator", ["one"])
            .with_rule(MockRule {
                role: Some("validator".into()),
                contains: vec!["hel".into()],
                last_contains: vec![],
                response: "rule".into(),
            });
        assert_eq!(mock.lookup("validator", &msgs()).unwrap(), "one");
        assert_eq!(mock.lookup("validator", &msgs()).unwrap(), "rule");
        assert!(mock.lookup("reasoner", &msgs()).is_err());
    }

    #[test]
    fn script_file_format() {
        let script: MockScript = serde_json::from_str(
            r#"{"fingerprints": {}, "rules": [{"role": "reasoner", "contains": ["Q1"], "response": "r"}], "miss": {"default": "d"}}"#,
        )
        .unwrap();
        assert_eq!(script.miss, MissPolicy::Default("d".into()));
        let mock = MockBackend::new(script);
        assert_eq!(mock.lookup("reasoner", &[ChatMessage::user("Q1")]).unwrap(), "r");
        assert_eq!(mock.lookup("reasoner", &[ChatMessage::user("Q2")]).unwrap(), "d");
    }
}
