use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QkgError, Result};

pub const ROLE_REASONER: &str = "reasoner";
pub const ROLE_VALIDATOR: &str = "validator";
pub const ROLE_ANNOTATOR: &str = "annotator";
pub const ROLE_PATIENT_CONTEXT: &str = "patient-context-llm";

fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    3
}
fn default_parallel() -> usize {
    4
}
fn default_backoff() -> u64 {
    500
}
fn default_auth_header() -> String {
    "Authorization".into()
}
fn default_auth_prefix() -> String {
    "Bearer ".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    /// Filled from the map key when loaded from YAML.
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub temperature: f64,
    /// Initial backoff; doubles after every failed attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
}

impl RoleConfig {
    pub fn new(name: &str) -> Self {
        RoleConfig {
            name: name.to_string(),
            endpoint: String::new(),
            model: String::new(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_parallel: default_parallel(),
            temperature: 0.0,
            backoff_ms: default_backoff(),
            auth_header: default_auth_header(),
            auth_prefix: default_auth_prefix(),
            headers: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_parallel < 1 {
            return Err(QkgError::Config(format!(
                "role `{}`: max_parallel must be >= 1",
                self.name
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(QkgError::Config(format!("role `{}`: invalid temperature", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default)]
    pub roles: BTreeMap<String, RoleConfig>,
}

impl GatewayConfig {
    /// Role table with default settings and no endpoint, for mock-backed runs.
    pub fn mock_roles(names: &[&str]) -> Self {
        let mut cfg = GatewayConfig::default();
        for name in names {
            let mut role = RoleConfig::new(name);
            role.backoff_ms = 0;
            cfg.roles.insert(name.to_string(), role);
        }
        cfg
    }

    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let mut cfg: GatewayConfig = serde_yaml::from_str(text).map_err(|e| QkgError::Config(e.to_string()))?;
        cfg.normalize()?;
        Ok(cfg)
    }

    pub fn from_yaml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QkgError::io(path, e))?;
        Self::from_yaml_str(&text)
    }

    /// Copies map keys into `name` and validates every role.
    pub fn normalize(&mut self) -> Result<()> {
        for (key, role) in self.roles.iter_mut() {
            role.name = key.clone();
            role.validate()?;
        }
        Ok(())
    }

    pub fn role(&self, name: &str) -> Result<&RoleConfig> {
        self.roles
            .get(name)
            .ok_or_else(|| QkgError::UnknownRole(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yaml_roles_pick_up_names_and_defaults() {
        let cfg = GatewayConfig::from_yaml_str(
            "roles:\n  reasoner:\n    endpoint: http://localhost:9/v1/chat/completions\n    model: haiku\n    api_key_env: REASONER_KEY\n    max_retries: 0\n  patient-context-llm:\n    model: m\n",
        )
        .unwrap();
        let r = cfg.role("reasoner").unwrap();
        assert_eq!(r.name, "reasoner");
        assert_eq!(r.max_retries, 0);
        assert_eq!(r.max_parallel, 4);
        assert_eq!(r.temperature, 0.0);
        assert_eq!(cfg.role(ROLE_PATIENT_CONTEXT).unwrap().timeout_secs, 120);
        assert!(cfg.role("validator").is_err());
    }

    #[test]
    fn zero_parallel_rejected() {
        assert!(GatewayConfig::from_yaml_str("roles:\n  reasoner:\n    max_parallel: 0\n").is_err());
    }
}
