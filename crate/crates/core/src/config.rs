//! `task.yaml`: the six-section task definition, dotlist overrides, and path resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{Direction, HeartbeatAction};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid task config: {0}")]
    Parse(String),
    #[error("unknown config path `{0}`")]
    UnknownPath(String),
    #[error("override `{0}` must have the form key=value")]
    MalformedOverride(String),
    #[error("cannot apply `{path}`: {reason}")]
    BadValue { path: String, reason: String },
    #[error("invalid task config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskSection,
    pub grader: GraderSection,
    #[serde(default)]
    pub agents: AgentsSection,
    #[serde(default)]
    pub workspace: WorkspaceSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub sharing: SharingSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub files: Vec<String>,
    /// Files or directories copied into the repository root before agents start.
    #[serde(default)]
    pub seed: Vec<PathBuf>,
    #[serde(default)]
    pub tips: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraderSection {
    #[serde(default = "default_timeout", alias = "timeout_seconds")]
    pub timeout: u64,
    pub direction: Direction,
    #[serde(default)]
    pub args: serde_json::Map<String, Value>,
    /// Extra grader artifacts copied next to the grader executable.
    #[serde(default)]
    pub private: Vec<PathBuf>,
    #[serde(default = "default_grader_command")]
    pub command: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsSection {
    #[serde(default = "default_count")]
    pub count: u32,
    #[serde(default = "default_runtime")]
    pub runtime: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_max_turns")]
    pub max_turns: u32,
    #[serde(default)]
    pub heartbeat: Vec<HeartbeatAction>,
    #[serde(default)]
    pub research: bool,
    /// Program file for the scripted runtime.
    #[serde(default)]
    pub script: Option<PathBuf>,
    /// Replacement instruction template.
    #[serde(default)]
    pub instructions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceSection {
    #[serde(default = "default_results_dir")]
    pub results_dir: PathBuf,
    #[serde(default)]
    pub repo_path: Option<PathBuf>,
    #[serde(default)]
    pub setup: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub verbose: bool,
    #[serde(default)]
    pub ui: bool,
    #[serde(default)]
    pub tmux: bool,
    /// Seconds between monitoring-loop scans.
    #[serde(default = "default_poll_interval")]
    pub poll_interval: f64,
    /// Seconds to wait at each shutdown stage.
    #[serde(default = "default_stage_timeout")]
    pub stage_timeout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharingSection {
    #[serde(default = "yes")]
    pub attempts: bool,
    #[serde(default = "yes")]
    pub notes: bool,
    #[serde(default = "yes")]
    pub skills: bool,
}

fn default_timeout() -> u64 {
    300
}
fn default_grader_command() -> PathBuf {
    PathBuf::from("eval/grader.sh")
}
fn default_count() -> u32 {
    1
}
fn default_runtime() -> String {
    "claude_code".into()
}
fn default_max_turns() -> u32 {
    200
}
fn default_results_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_poll_interval() -> f64 {
    5.0
}
fn default_stage_timeout() -> f64 {
    10.0
}
fn yes() -> bool {
    true
}

impl Default for AgentsSection {
    fn default() -> Self {
        Self {
            count: default_count(),
            runtime: default_runtime(),
            model: String::new(),
            max_turns: default_max_turns(),
            heartbeat: Vec::new(),
            research: false,
            script: None,
            instructions: None,
        }
    }
}

impl Default for WorkspaceSection {
    fn default() -> Self {
        Self { results_dir: default_results_dir(), repo_path: None, setup: Vec::new() }
    }
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            verbose: false,
            ui: false,
            tmux: false,
            poll_interval: default_poll_interval(),
            stage_timeout: default_stage_timeout(),
        }
    }
}

impl Default for SharingSection {
    fn default() -> Self {
        Self { attempts: true, notes: true, skills: true }
    }
}

impl TaskConfig {
    /// Parse YAML text without resolving relative paths.
    pub fn from_yaml_str(text: &str) -> Result<Self, ConfigError> {
        serde_yaml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Load a task file, apply `key=value` overrides, resolve relative paths
    /// against the file's directory, and validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let path = if path.is_dir() { path.join("task.yaml") } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read { path: path.clone(), source })?;
        let mut cfg = Self::from_yaml_str(&text)?;
        cfg.apply_overrides(overrides)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let base = std::path::absolute(&base).unwrap_or(base);
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reload a config previously written by [`TaskConfig::save`] (paths already absolute).
    pub fn load_resolved(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let cfg = Self::from_yaml_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_yaml::to_string(self).map_err(std::io::Error::other)?;
        crate::hub::write_atomic(path, text.as_bytes())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.task.seed.iter_mut().for_each(fix);
        self.grader.private.iter_mut().for_each(fix);
        fix(&mut self.grader.command);
        fix(&mut self.workspace.results_dir);
        if let Some(p) = self.workspace.repo_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.agents.script.as_mut() {
            fix(p);
        }
        if let Some(p) = self.agents.instructions.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.task.name.trim().is_empty() {
            return Err(ConfigError::Invalid("task.name must not be empty".into()));
        }
        if self.agents.count == 0 {
            return Err(ConfigError::Invalid("agents.count must be at least 1".into()));
        }
        if self.grader.timeout == 0 {
            return Err(ConfigError::Invalid("grader.timeout must be positive".into()));
        }
        if self.agents.max_turns == 0 {
            return Err(ConfigError::Invalid("agents.max_turns must be positive".into()));
        }
        if self.run.poll_interval.is_nan() || self.run.poll_interval <= 0.0 || self.run.stage_timeout.is_nan() || self.run.stage_timeout < 0.0 {
            return Err(ConfigError::Invalid("run.poll_interval and run.stage_timeout must be positive".into()));
        }
        for a in &self.agents.heartbeat {
            if a.every == 0 {
                return Err(ConfigError::Invalid(format!("heartbeat action `{}` needs every >= 1", a.name)));
            }
        }
        Ok(())
    }

    /// Agent identifiers `agent-1 .. agent-N`.
    pub fn agent_ids(&self) -> Vec<String> {
        (1..=self.agents.count).map(|i| format!("agent-{i}")).collect()
    }

    pub fn task_slug(&self) -> String {
        slugify(&self.task.name)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut tree = serde_json::to_value(&*self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| ConfigError::MalformedOverride(item.clone()))?;
            set_dotted(&mut tree, key.trim(), raw)?;
        }
        *self = serde_json::from_value(tree).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(())
    }
}

/// Parse a dotlist into `(path, value)` pairs without applying them.
pub fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    items
        .iter()
        .map(|item| {
            item.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| ConfigError::MalformedOverride(item.clone()))
        })
        .collect()
}

fn set_dotted(tree: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::UnknownPath(key.to_string()));
    }
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        // grader.args is a free-form map; everything else must already exist.
        let open_map = i == 2 && parts[0] == "grader" && parts[1] == "args";
        let obj = node.as_object_mut().ok_or_else(|| ConfigError::UnknownPath(key.to_string()))?;
        if !obj.contains_key(*part) {
            if open_map && last {
                obj.insert(part.to_string(), Value::Null);
            } else {
                return Err(ConfigError::UnknownPath(key.to_string()));
            }
        }
        let child = obj.get_mut(*part).expect("present");
        if last {
            *child = coerce(child, raw).map_err(|reason| ConfigError::BadValue { path: key.to_string(), reason })?;
            return Ok(());
        }
        node = child;
    }
    unreachable!("loop returns on the last segment")
}

fn coerce(existing: &Value, raw: &str) -> Result<Value, String> {
    let raw_trim = raw.trim();
    match existing {
        Value::Bool(_) => match raw_trim.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" | "on" => Ok(Value::Bool(true)),
            "false" | "no" | "0" | "off" => Ok(Value::Bool(false)),
            _ => Err(format!("expected a boolean, got `{raw}`")),
        },
        Value::Number(n) => {
            if n.is_f64() {
                raw_trim.parse::<f64>().map(Value::from).map_err(|_| format!("expected a number, got `{raw}`"))
            } else if let Ok(i) = raw_trim.parse::<i64>() {
                Ok(Value::from(i))
            } else {
                raw_trim.parse::<f64>().map(Value::from).map_err(|_| format!("expected an integer, got `{raw}`"))
            }
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Null | Value::Array(_) | Value::Object(_) => {
            serde_yaml::from_str::<Value>(raw).map_err(|e| e.to_string())
        }
    }
}

pub fn slugify(name: &str) -> String {
    let mut out = String::new();
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    let trimmed = out.trim_matches('-');
    if trimmed.is_empty() {
        "task".into()
    } else {
        trimmed.to_string()
    }
}
