//! Heartbeat interventions: trigger math, prompt rendering, and the on-disk
//! configs agents and operators can edit while a run is live.
//!
//! Interval actions fire when the scope-selected counter is a multiple of
//! `every`. Plateau actions fire once the non-improving streak reaches
//! `every`, then stay quiet until the streak grows by another `every`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionScope, AgentState, Attempt, HeartbeatAction, TriggerKind};
use crate::templates::{self, TemplateError};

pub const GLOBAL_FILE: &str = "global.json";
pub const PROTECTED: [&str; 2] = ["reflect", "consolidate"];

#[derive(Debug, Error)]
pub enum HeartbeatError {
    #[error("`{0}` is a protected heartbeat action and cannot be removed")]
    Protected(String),
    #[error("no heartbeat action named `{0}`")]
    UnknownAction(String),
    #[error("heartbeat action `{0}` needs every >= 1")]
    InvalidEvery(String),
    #[error("heartbeat action name must be a non-empty identifier, got `{0}`")]
    InvalidName(String),
    #[error("no prompt template for heartbeat action `{0}`")]
    NoTemplate(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("heartbeat config {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("heartbeat config {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub fn is_protected(name: &str) -> bool {
    PROTECTED.contains(&name)
}

/// One scope's actions. Agent-scope files overlay the global file by name;
/// `removed` masks global actions for that agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartbeatConfig {
    pub actions: Vec<HeartbeatAction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed: Vec<String>,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        let mut reflect = HeartbeatAction::new("reflect", 1, TriggerKind::Interval, ActionScope::Local);
        reflect.protected = true;
        let mut consolidate = HeartbeatAction::new("consolidate", 10, TriggerKind::Interval, ActionScope::Global);
        consolidate.protected = true;
        let pivot = HeartbeatAction::new("pivot", 5, TriggerKind::Plateau, ActionScope::Local);
        Self { actions: vec![reflect, consolidate, pivot], removed: Vec::new() }
    }
}

impl HeartbeatConfig {
    pub fn empty() -> Self {
        Self { actions: Vec::new(), removed: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&HeartbeatAction> {
        self.actions.iter().find(|a| a.name == name)
    }

    pub fn load(path: &Path) -> Result<Self, HeartbeatError> {
        let text = fs::read_to_string(path).map_err(|source| HeartbeatError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| HeartbeatError::Malformed { path: path.to_path_buf(), reason: e.to_string() })?;
        cfg.normalize();
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), HeartbeatError> {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        crate::hub::write_atomic(path, text.as_bytes())
            .map_err(|source| HeartbeatError::Io { path: path.to_path_buf(), source })
    }

    fn normalize(&mut self) {
        for a in &mut self.actions {
            if is_protected(&a.name) {
                a.protected = true;
            }
        }
    }

    /// Add `action`, or replace the action of the same name in place.
    pub fn set_action(&mut self, mut action: HeartbeatAction) -> Result<(), HeartbeatError> {
        validate_action(&action)?;
        if is_protected(&action.name) {
            action.protected = true;
        }
        self.removed.retain(|n| n != &action.name);
        match self.actions.iter_mut().find(|a| a.name == action.name) {
            Some(slot) => *slot = action,
            None => self.actions.push(action),
        }
        Ok(())
    }

    /// Delete a non-protected action. `mask` records the name in `removed`
    /// so an inherited global action is hidden too.
    pub fn remove_action(&mut self, name: &str, mask: bool) -> Result<(), HeartbeatError> {
        if is_protected(name) || self.get(name).is_some_and(|a| a.protected) {
            return Err(HeartbeatError::Protected(name.to_string()));
        }
        let before = self.actions.len();
        self.actions.retain(|a| a.name != name);
        let found = self.actions.len() != before;
        if mask {
            if !self.removed.iter().any(|n| n == name) {
                self.removed.push(name.to_string());
            }
        } else if !found {
            return Err(HeartbeatError::UnknownAction(name.to_string()));
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// Global actions overlaid by an agent's actions (by name), minus masked names.
    pub fn overlay(global: &HeartbeatConfig, agent: Option<&HeartbeatConfig>) -> HeartbeatConfig {
        let Some(agent) = agent else { return global.clone() };
        let mut actions: Vec<HeartbeatAction> = global
            .actions
            .iter()
            .filter(|a| !agent.removed.contains(&a.name))
            .map(|a| agent.get(&a.name).cloned().unwrap_or_else(|| a.clone()))
            .collect();
        for a in &agent.actions {
            if !actions.iter().any(|x| x.name == a.name) {
                actions.push(a.clone());
            }
        }
        HeartbeatConfig { actions, removed: Vec::new() }
    }
}

fn validate_action(action: &HeartbeatAction) -> Result<(), HeartbeatError> {
    let ok_name = !action.name.is_empty()
        && action.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if !ok_name {
        return Err(HeartbeatError::InvalidName(action.name.clone()));
    }
    if action.every == 0 {
        return Err(HeartbeatError::InvalidEvery(action.name.clone()));
    }
    Ok(())
}

/// Update `agent` with `just_completed` and return the actions due, in config order.
pub fn due_actions(
    actions: &[HeartbeatAction],
    agent: &mut AgentState,
    global_eval_count: u64,
    just_completed: &Attempt,
) -> Vec<HeartbeatAction> {
    agent.observe(just_completed);
    let streak = agent.evals_since_improvement;
    let gate = agent.plateau_cooldown_until;
    let mut next_gate = gate;
    let mut due = Vec::new();
    for action in actions {
        if action.every == 0 {
            continue;
        }
        let fire = match action.trigger {
            TriggerKind::Interval => {
                let counter = match action.scope {
                    ActionScope::Local => agent.local_eval_count,
                    ActionScope::Global => global_eval_count,
                };
                counter > 0 && counter % action.every == 0
            }
            TriggerKind::Plateau => {
                let fire = streak >= action.every && streak >= gate;
                if fire {
                    next_gate = next_gate.max(streak + action.every);
                }
                fire
            }
        };
        if fire {
            due.push(action.clone());
        }
    }
    agent.plateau_cooldown_until = next_gate;
    due
}

pub fn builtin_template(name: &str) -> Option<&'static str> {
    match name {
        "reflect" => Some(templates::HEARTBEAT_REFLECT),
        "consolidate" => Some(templates::HEARTBEAT_CONSOLIDATE),
        "pivot" => Some(templates::HEARTBEAT_PIVOT),
        _ => None,
    }
}

pub fn render_heartbeat(action: &HeartbeatAction, shared_dir: &str, agent_id: &str) -> Result<String, HeartbeatError> {
    let template = action
        .prompt
        .as_deref()
        .or_else(|| builtin_template(&action.name))
        .ok_or_else(|| HeartbeatError::NoTemplate(action.name.clone()))?;
    Ok(templates::render(template, &[("shared_dir", shared_dir), ("agent_id", agent_id)])?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigScope {
    Global,
    Agent(String),
}

/// The `heartbeat/` directory of a hub.
#[derive(Debug, Clone)]
pub struct HeartbeatStore {
    dir: PathBuf,
}

impl HeartbeatStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, scope: &ConfigScope) -> PathBuf {
        match scope {
            ConfigScope::Global => self.dir.join(GLOBAL_FILE),
            ConfigScope::Agent(id) => self.dir.join(format!("{id}.json")),
        }
    }

    /// A missing global file reads as the defaults; a missing agent file as an empty overlay.
    pub fn load(&self, scope: &ConfigScope) -> Result<HeartbeatConfig, HeartbeatError> {
        let path = self.path(scope);
        match HeartbeatConfig::load(&path) {
            Err(HeartbeatError::Io { source, .. }) if source.kind() == io::ErrorKind::NotFound => Ok(match scope {
                ConfigScope::Global => HeartbeatConfig::default(),
                ConfigScope::Agent(_) => HeartbeatConfig::empty(),
            }),
            other => other,
        }
    }

    pub fn effective(&self, agent_id: &str) -> Result<HeartbeatConfig, HeartbeatError> {
        let global = self.load(&ConfigScope::Global)?;
        let agent = self.load(&ConfigScope::Agent(agent_id.to_string()))?;
        Ok(HeartbeatConfig::overlay(&global, Some(&agent)))
    }

    /// View used by the CLI: the effective config for an agent, or the global file.
    pub fn view(&self, scope: &ConfigScope) -> Result<HeartbeatConfig, HeartbeatError> {
        match scope {
            ConfigScope::Global => self.load(scope),
            ConfigScope::Agent(id) => self.effective(id),
        }
    }

    /// Write the global config (defaults overlaid with task overrides) and an empty overlay per agent.
    pub fn seed(&self, agents: &[String], overrides: &[HeartbeatAction]) -> Result<(), HeartbeatError> {
        fs::create_dir_all(&self.dir).map_err(|source| HeartbeatError::Io { path: self.dir.clone(), source })?;
        let mut global = HeartbeatConfig::default();
        for a in overrides {
            global.set_action(a.clone())?;
        }
        global.save(&self.path(&ConfigScope::Global))?;
        for id in agents {
            let path = self.path(&ConfigScope::Agent(id.clone()));
            if !path.exists() {
                HeartbeatConfig::empty().save(&path)?;
            }
        }
        Ok(())
    }

    pub fn set(&self, scope: &ConfigScope, action: HeartbeatAction) -> Result<HeartbeatConfig, HeartbeatError> {
        let mut cfg = self.load(scope)?;
        cfg.set_action(action)?;
        cfg.save(&self.path(scope))?;
        self.view(scope)
    }

    pub fn remove(&self, scope: &ConfigScope, name: &str) -> Result<HeartbeatConfig, HeartbeatError> {
        let mut cfg = self.load(scope)?;
        match scope {
            ConfigScope::Global => cfg.remove_action(name, false)?,
            ConfigScope::Agent(_) => {
                if self.view(scope)?.get(name).is_none() {
                    return Err(HeartbeatError::UnknownAction(name.to_string()));
                }
                cfg.remove_action(name, true)?;
            }
        }
        cfg.save(&self.path(scope))?;
        self.view(scope)
    }

    pub fn reset(&self, scope: &ConfigScope) -> Result<HeartbeatConfig, HeartbeatError> {
        let mut cfg = self.load(scope)?;
        cfg.reset();
        cfg.save(&self.path(scope))?;
        self.view(scope)
    }
}
