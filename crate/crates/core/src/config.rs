//! Run configuration and per-run manifests.
//!
//! Values resolve in three layers: command-line overrides, then `QKG_*`
//! environment variables, then the YAML file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{QkgError, Result};
use crate::llm::{GatewayConfig, RoleConfig, ROLE_REASONER, ROLE_VALIDATOR};
use crate::pipeline::EvalMode;
use crate::validator::DEFAULT_TURN_BUDGET;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METADATA_FILE: &str = "metadata.json";

fn default_workers() -> usize {
    4
}
fn default_turn_budget() -> u32 {
    DEFAULT_TURN_BUDGET
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}
fn default_reasoner() -> String {
    ROLE_REASONER.into()
}
fn default_validator() -> String {
    ROLE_VALIDATOR.into()
}
fn default_mode() -> EvalMode {
    EvalMode::Qkg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub roles: BTreeMap<String, RoleConfig>,
    #[serde(default = "default_reasoner")]
    pub reasoner_role: String,
    #[serde(default = "default_validator")]
    pub validator_role: String,
    #[serde(default)]
    pub context_role: Option<String>,
    #[serde(default = "default_mode")]
    pub mode: EvalMode,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub graph: Option<PathBuf>,
    #[serde(default)]
    pub constraints: Option<PathBuf>,
    /// Scripted responses; when set no network backend is used.
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_turn_budget")]
    pub turn_budget: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_yaml::from_str("{}").expect("defaults deserialize")
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub mode: Option<EvalMode>,
    pub dataset: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub constraints: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub workers: Option<usize>,
    pub turn_budget: Option<u32>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn env_parse<T: std::str::FromStr>(env: &dyn Fn(&str) -> Option<String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match env(key) {
        Some(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| QkgError::Config(format!("{key}={v}: {e}"))),
        _ => Ok(None),
    }
}

impl RunConfig {
    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_yaml::from_str(text).map_err(|e| QkgError::Config(e.to_string()))?;
        cfg.gateway_config()?;
        for (key, role) in cfg.roles.iter_mut() {
            role.name = key.clone();
        }
        Ok(cfg)
    }

    pub fn from_yaml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QkgError::io(path, e))?;
        Self::from_yaml_str(&text)
    }

    /// Layers environment values and then overrides over `self`.
    pub fn layered(mut self, env: &dyn Fn(&str) -> Option<String>, cli: &ConfigOverrides) -> Result<Self> {
        let env_path = |k: &str| env(k).filter(|v| !v.trim().is_empty()).map(PathBuf::from);
        if let Some(m) = env_parse::<EvalMode>(env, "QKG_MODE")? {
            self.mode = m;
        }
        if let Some(w) = env_parse(env, "QKG_WORKERS")? {
            self.workers = w;
        }
        if let Some(t) = env_parse(env, "QKG_TURN_BUDGET")? {
            self.turn_budget = t;
        }
        if let Some(s) = env_parse(env, "QKG_SEED")? {
            self.seed = s;
        }
        for (key, slot) in [
            ("QKG_DATASET", &mut self.dataset),
            ("QKG_GRAPH", &mut self.graph),
            ("QKG_CONSTRAINTS", &mut self.constraints),
            ("QKG_MOCK_SCRIPT", &mut self.mock_script),
        ] {
            if let Some(p) = env_path(key) {
                *slot = Some(p);
            }
        }
        if let Some(p) = env_path("QKG_OUTPUT_DIR") {
            self.output_dir = p;
        }

        if let Some(m) = cli.mode {
            self.mode = m;
        }
        if let Some(w) = cli.workers {
            self.workers = w;
        }
        if let Some(t) = cli.turn_budget {
            self.turn_budget = t;
        }
        if let Some(s) = cli.seed {
            self.seed = s;
        }
        for (value, slot) in [
            (&cli.dataset, &mut self.dataset),
            (&cli.graph, &mut self.graph),
            (&cli.constraints, &mut self.constraints),
            (&cli.mock_script, &mut self.mock_script),
        ] {
            if value.is_some() {
                slot.clone_from(value);
            }
        }
        if let Some(o) = &cli.output_dir {
            self.output_dir = o.clone();
        }
        self.validate()?;
        Ok(self)
    }

    /// File (if any), then process environment, then overrides.
    pub fn resolve(file: Option<&Path>, cli: &ConfigOverrides) -> Result<Self> {
        let base = match file {
            Some(p) => Self::from_yaml_file(p)?,
            None => RunConfig::default(),
        };
        base.layered(&|k| std::env::var(k).ok(), cli)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers < 1 {
            return Err(QkgError::Config("workers must be >= 1".into()));
        }
        if self.turn_budget < 1 {
            return Err(QkgError::Config("turn_budget must be >= 1".into()));
        }
        Ok(())
    }

    /// Fails on the first configured path that does not exist.
    pub fn check_paths(&self) -> Result<()> {
        for (name, p) in [
            ("dataset", &self.dataset),
            ("graph", &self.graph),
            ("constraints", &self.constraints),
            ("mock_script", &self.mock_script),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(QkgError::Config(format!("{name} path {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn gateway_config(&self) -> Result<GatewayConfig> {
        let mut g = GatewayConfig {
            roles: self.roles.clone(),
        };
        g.normalize()?;
        Ok(g)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut reader = BufReader::new(File::open(path).map_err(|e| QkgError::io(path, e))?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(|e| QkgError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub name: String,
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub modules: BTreeMap<String, String>,
    pub config_hash: Option<String>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
}

pub fn module_versions() -> BTreeMap<String, String> {
    let v = env!("CARGO_PKG_VERSION").to_string();
    [
        "kg-store",
        "subgraph-extract",
        "constraint-annotations",
        "patient-context",
        "llm-gateway",
        "validator-agent",
        "pipeline-eval",
        "analysis-stats",
        "dataset-builder",
    ]
    .iter()
    .map(|m| (m.to_string(), v.clone()))
    .collect()
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&RunConfig>) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            modules: module_versions(),
            config_hash: config.map(RunConfig::hash),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::metadata(path).map_err(|e| QkgError::io(path, e))?.len();
        self.inputs.push(InputDigest {
            name: name.to_string(),
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
            bytes,
        });
        Ok(())
    }

    pub fn add_output(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    /// Writes the manifest and a metadata sidecar holding the wall-clock
    /// timestamp, so the manifest itself stays reproducible.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| QkgError::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| QkgError::io(&path, e))?;
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = dir.join(METADATA_FILE);
        let text = serde_json::to_string_pretty(&serde_json::json!({"written_unix_secs": secs}))?;
        std::fs::write(&meta, text + "\n").map_err(|e| QkgError::io(&meta, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| QkgError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn precedence_cli_env_file() {
        let file = RunConfig::from_yaml_str("mode: kg\nworkers: 2\nturn_budget: 7\noutput_dir: from_file\n").unwrap();
        let env: HashMap<&str, &str> = HashMap::from([("QKG_WORKERS", "3"), ("QKG_OUTPUT_DIR", "from_env")]);
        let lookup = |k: &str| env.get(k).map(|v| v.to_string());
        let cli = ConfigOverrides {
            workers: Some(9),
            ..Default::default()
        };
        let cfg = file.layered(&lookup, &cli).unwrap();
        assert_eq!(cfg.workers, 9);
        assert_eq!(cfg.output_dir, PathBuf::from("from_env"));
        assert_eq!(cfg.turn_budget, 7);
        assert_eq!(cfg.mode, EvalMode::Kg);
    }

    #[test]
    fn defaults_and_bad_env() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.turn_budget, DEFAULT_TURN_BUDGET);
        assert_eq!(cfg.mode, EvalMode::Qkg);
        let bad = |k: &str| (k == "QKG_WORKERS").then(|| "many".to_string());
        assert!(RunConfig::default().layered(&bad, &ConfigOverrides::default()).is_err());
        let zero = ConfigOverrides {
            workers: Some(0),
            ..Default::default()
        };
        assert!(RunConfig::default().layered(&|_| None, &zero).is_err());
    }

    #[test]
    fn roles_named_from_keys() {
        let cfg = RunConfig::from_yaml_str("roles:\n  reasoner:\n    model: m\n").unwrap();
        assert_eq!(cfg.roles["reasoner"].name, "reasoner");
        assert!(cfg.gateway_config().unwrap().role("reasoner").is_ok());
    }

    #[test]
    fn manifest_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "abc").unwrap();
        let cfg = RunConfig::default();
        let write = |out: &Path| {
            let mut m = RunManifest::new("run-eval", Some(&cfg));
            m.add_input("dataset", &input).unwrap();
            m.write(out).unwrap();
            std::fs::read(out.join(MANIFEST_FILE)).unwrap()
        };
        let a = write(&dir.path().join("a"));
        let b = write(&dir.path().join("b"));
        assert_eq!(a, b);
        let m = RunManifest::read(&dir.path().join("a")).unwrap();
        assert_eq!(
            m.inputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(dir.path().join("a").join(METADATA_FILE).exists());
    }
}
