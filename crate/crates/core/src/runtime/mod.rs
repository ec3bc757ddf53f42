//! The agent-runtime contract. The manager only ever talks to
//! [`RuntimeAdapter`]; concrete runtimes are looked up by name.

pub mod scripted;

use std::path::{Path, PathBuf};
use std::process::Child;

use thiserror::Error;

use crate::process::{signal_pid, SIGINT};
use crate::workspace::RUNTIME_DIRNAME;

pub use scripted::ScriptedRuntime;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("unknown agent runtime `{0}` (available: scripted)")]
    UnknownRuntime(String),
    #[error("failed to launch agent: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("session `{0}` does not exist in this worktree")]
    UnknownSession(String),
    #[error("invalid agent program {path}: {reason}")]
    Program { path: PathBuf, reason: String },
}

/// Everything a runtime needs to start an agent in its worktree.
#[derive(Debug, Clone)]
pub struct SpawnContext {
    pub agent_id: String,
    pub worktree: PathBuf,
    pub model: String,
    pub max_turns: u32,
    /// Program file for runtimes that replay a script instead of calling a model.
    pub program: Option<PathBuf>,
}

pub trait RuntimeAdapter: Send + Sync {
    fn name(&self) -> &str;

    /// File the runtime reads its standing instructions from, relative to the worktree.
    fn instruction_filename(&self) -> &str;

    fn spawn(&self, ctx: &SpawnContext, prompt: &str) -> Result<Child, RuntimeError>;

    /// Continue a previous session. Fails with `UnknownSession` if the session is not on this machine.
    fn resume(&self, ctx: &SpawnContext, session_id: &str, prompt: &str) -> Result<Child, RuntimeError>;

    /// Ask the agent to stop at its next safe point. Only the agent process is signalled,
    /// never its children (a running grader finishes).
    fn interrupt(&self, pid: u32) -> bool {
        signal_pid(pid, SIGINT)
    }

    /// Latest session id recorded in an agent log.
    fn session_id_of(&self, log: &Path) -> Option<String>;

    fn session_exists(&self, ctx: &SpawnContext, session_id: &str) -> bool;

    fn log_path(&self, worktree: &Path) -> PathBuf {
        worktree.join(RUNTIME_DIRNAME).join("agent.ndjson")
    }
}

/// Look up a runtime by its config name. `exe` is the binary that hosts helper subcommands.
pub fn adapter_for(name: &str, exe: &Path) -> Result<Box<dyn RuntimeAdapter>, RuntimeError> {
    match name {
        "scripted" => Ok(Box::new(ScriptedRuntime::new(exe))),
        other => Err(RuntimeError::UnknownRuntime(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_runtime_is_named() {
        let err = adapter_for("claude_code", Path::new("/bin/true")).err().unwrap();
        assert!(err.to_string().contains("claude_code"));
        assert_eq!(adapter_for("scripted", Path::new("/bin/true")).unwrap().name(), "scripted");
    }
}
