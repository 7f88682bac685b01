use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{GatewayConfig, RoleConfig};
use crate::error::{QkgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::System => "system",
            Speaker::User => "user",
            Speaker::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub speaker: Speaker,
    pub text: String,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage {
            speaker: Speaker::System,
            text: text.into(),
        }
    }
    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage {
            speaker: Speaker::User,
            text: text.into(),
        }
    }
    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage {
            speaker: Speaker::Assistant,
            text: text.into(),
        }
    }
}

/// Stable request fingerprint: SHA-256 over the role name and the message texts.
pub fn fingerprint(role: &str, messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(role.as_bytes());
    for m in messages {
        hasher.update([0x1f]);
        hasher.update(m.text.as_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub message: String,
    pub status: Option<u16>,
    pub retryable: bool,
}

impl TransportError {
    pub fn retryable(message: impl Into<String>) -> Self {
        TransportError {
            message: message.into(),
            status: None,
            retryable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        TransportError {
            message: message.into(),
            status: None,
            retryable: false,
        }
    }
}

/// Performs one request/response exchange. Retries and logging live in [`Gateway`].
pub trait Backend: Send + Sync {
    fn send(&self, role: &RoleConfig, messages: &[ChatMessage]) -> std::result::Result<String, TransportError>;
}

/// One logged request, successful or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub role: String,
    pub model: String,
    pub fingerprint: String,
    pub messages: Vec<ChatMessage>,
    pub response: Option<String>,
    pub error: Option<String>,
    pub attempts: u32,
    #[serde(default)]
    pub attempt_errors: Vec<String>,
    pub prompt_chars: usize,
    pub response_chars: usize,
    pub latency_ms: u64,
}

/// Append-only, internally synchronized log of exchanges.
#[derive(Default)]
pub struct RunLog {
    memory: Option<Mutex<Vec<ChatExchange>>>,
    sink: Option<Mutex<BufWriter<File>>>,
}

impl RunLog {
    pub fn disabled() -> Self {
        RunLog::default()
    }

    pub fn in_memory() -> Self {
        RunLog {
            memory: Some(Mutex::new(Vec::new())),
            sink: None,
        }
    }

    /// Appends JSONL lines to `path` (created if missing).
    pub fn to_file(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| QkgError::io(path, e))?;
        Ok(RunLog {
            memory: None,
            sink: Some(Mutex::new(BufWriter::new(file))),
        })
    }

    pub fn append(&self, exchange: ChatExchange) {
        if let Some(sink) = &self.sink {
            let mut w = sink.lock().unwrap_or_else(|p| p.into_inner());
            let write = serde_json::to_writer(&mut *w, &exchange)
                .map_err(std::io::Error::other)
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush());
            if let Err(e) = write {
                log::warn!("failed to append to run log: {e}");
            }
        }
        if let Some(mem) = &self.memory {
            mem.lock().unwrap_or_else(|p| p.into_inner()).push(exchange);
        }
    }

    /// Exchanges held in memory (empty for file-only logs).
    pub fn exchanges(&self) -> Vec<ChatExchange> {
        self.memory
            .as_ref()
            .map(|m| m.lock().unwrap_or_else(|p| p.into_inner()).clone())
            .unwrap_or_default()
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<ChatExchange>> {
        let file = File::open(path).map_err(|e| QkgError::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| QkgError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| QkgError::Schema {
                line: i + 1,
                field: "exchange".into(),
                message: e.to_string(),
            })?);
        }
        Ok(out)
    }
}

struct Admission {
    slots: Mutex<usize>,
    freed: Condvar,
}

struct AdmissionGuard<'a>(&'a Admission);

impl Admission {
    fn new(n: usize) -> Self {
        Admission {
            slots: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn enter(&self) -> AdmissionGuard<'_> {
        let mut slots = self.slots.lock().unwrap_or_else(|p| p.into_inner());
        while *slots == 0 {
            slots = self.freed.wait(slots).unwrap_or_else(|p| p.into_inner());
        }
        *slots -= 1;
        AdmissionGuard(self)
    }
}

impl Drop for AdmissionGuard<'_> {
    fn drop(&mut self) {
        *self.0.slots.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    config: GatewayConfig,
    backend: Arc<dyn Backend>,
    admission: HashMap<String, Admission>,
    log: RunLog,
}

impl Gateway {
    pub fn new(config: GatewayConfig, backend: Arc<dyn Backend>) -> Self {
        let admission = config
            .roles
            .iter()
            .map(|(name, role)| (name.clone(), Admission::new(role.max_parallel)))
            .collect();
        Gateway {
            config,
            backend,
            admission,
            log: RunLog::disabled(),
        }
    }

    pub fn with_log(mut self, log: RunLog) -> Self {
        self.log = log;
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn has_role(&self, role: &str) -> bool {
        self.config.roles.contains_key(role)
    }

    pub fn run_log(&self) -> &RunLog {
        &self.log
    }

    /// Sends `messages` to the model behind `role`, retrying transport and
    /// 5xx failures with exponential backoff. Every call is logged.
    pub fn complete(&self, role: &str, messages: &[ChatMessage]) -> Result<String> {
        let cfg = self.config.role(role)?;
        let _slot = self.admission.get(role).map(Admission::enter);

        let started = Instant::now();
        let max_attempts = cfg.max_retries + 1;
        let mut attempt_errors = Vec::new();
        let mut outcome: std::result::Result<String, String> = Err(String::new());
        let mut attempts = 0;
        while attempts < max_attempts {
            if attempts > 0 && cfg.backoff_ms > 0 {
                let factor = 1u64 << (attempts - 1).min(16);
                std::thread::sleep(Duration::from_millis(cfg.backoff_ms.saturating_mul(factor)));
            }
            attempts += 1;
            match self.backend.send(cfg, messages) {
                Ok(text) => {
                    outcome = Ok(text);
                    break;
                }
                Err(err) => {
                    log::debug!("role {role} attempt {attempts} failed: {}", err.message);
                    attempt_errors.push(err.message.clone());
                    outcome = Err(err.message);
                    if !err.retryable {
                        break;
                    }
                }
            }
        }

        let prompt_chars = messages.iter().map(|m| m.text.len()).sum();
        let (response, error) = match &outcome {
            Ok(text) => (Some(text.clone()), None),
            Err(e) => (None, Some(e.clone())),
        };
        self.log.append(ChatExchange {
            role: role.to_string(),
            model: cfg.model.clone(),
            fingerprint: fingerprint(role, messages),
            messages: messages.to_vec(),
            response_chars: response.as_ref().map_or(0, String::len),
            response,
            error,
            attempts,
            attempt_errors,
            prompt_chars,
            latency_ms: started.elapsed().as_millis() as u64,
        });

        outcome.map_err(|last_error| QkgError::RetriesExhausted {
            role: role.to_string(),
            attempts,
            last_error,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
        retryable: bool,
    }

    impl Backend for Flaky {
        fn send(&self, _: &RoleConfig, _: &[ChatMessage]) -> std::result::Result<String, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(TransportError {
                    message: "HTTP 500".into(),
                    status: Some(500),
                    retryable: self.retryable,
                })
            } else {
                Ok("ok".into())
            }
        }
    }

    fn gateway(failures: usize, retries: u32, retryable: bool) -> (Gateway, Arc<Flaky>) {
        let backend = Arc::new(Flaky {
            failures,
            calls: AtomicUsize::new(0),
            retryable,
        });
        let mut cfg = GatewayConfig::mock_roles(&["reasoner"]);
        cfg.roles.get_mut("reasoner").unwrap().max_retries = retries;
        let gw = Gateway::new(cfg, backend.clone()).with_log(RunLog::in_memory());
        (gw, backend)
    }

    #[test]
    fn two_failures_then_success_with_three_retries() {
        let (gw, backend) = gateway(2, 3, true);
        assert_eq!(gw.complete("reasoner", &[ChatMessage::user("q")]).unwrap(), "ok");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
        let log = gw.run_log().exchanges();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].attempts, 3);
        assert_eq!(log[0].attempt_errors.len(), 2);
    }

    #[test]
    fn zero_retries_fails_after_one_attempt() {
        let (gw, backend) = gateway(5, 0, true);
        match gw.complete("reasoner", &[ChatMessage::user("q")]) {
            Err(QkgError::RetriesExhausted {
                attempts, last_error, ..
            }) => {
                assert_eq!(attempts, 1);
                assert!(last_error.contains("500"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert_eq!(gw.run_log().exchanges()[0].response, None);
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let (gw, backend) = gateway(5, 3, false);
        assert!(gw.complete("reasoner", &[ChatMessage::user("q")]).is_err());
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn unknown_role() {
        let (gw, _) = gateway(0, 0, true);
        assert!(matches!(gw.complete("validator", &[]), Err(QkgError::UnknownRole(_))));
    }

    #[test]
    fn fingerprint_is_stable_and_role_sensitive() {
        let m = [ChatMessage::system("a"), ChatMessage::user("b")];
        assert_eq!(fingerprint("r", &m), fingerprint("r", &m));
        assert_ne!(fingerprint("r", &m), fingerprint("s", &m));
        assert_ne!(fingerprint("r", &m), fingerprint("r", &[ChatMessage::user("ab")]));
        assert_eq!(fingerprint("r", &m).len(), 64);
    }

    #[test]
    fn admission_bounds_concurrency() {
        struct Slow {
            active: AtomicUsize,
            peak: AtomicUsize,
        }
        impl Backend for Slow {
            fn send(&self, _: &RoleConfig, _: &[ChatMessage]) -> std::result::Result<String, TransportError> {
                let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(10));
                self.active.fetch_sub(1, Ordering::SeqCst);
                Ok(String::new())
            }
        }
        let backend = Arc::new(Slow {
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let mut cfg = GatewayConfig::mock_roles(&["validator"]);
        cfg.roles.get_mut("validator").unwrap().max_parallel = 2;
        let gw = Gateway::new(cfg, backend.clone());
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| gw.complete("validator", &[]).unwrap());
            }
        });
        assert!(backend.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn file_log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let (gw0, _) = gateway(0, 0, true);
        let gw = Gateway::new(gw0.config.clone(), gw0.backend.clone()).with_log(RunLog::to_file(&path).unwrap());
        gw.complete("reasoner", &[ChatMessage::user("x")]).unwrap();
        let log = RunLog::read_jsonl(&path).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].response.as_deref(), Some("ok"));
    }
}
