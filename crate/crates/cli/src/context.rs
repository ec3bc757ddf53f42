//! Working out which run and which agent a command is about.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use coral_core::workspace::{find_worktree_context, latest_run, RunLayout};
use coral_core::{Attempt, Hub, TaskConfig};

/// Who is asking: an agent inside its worktree, or the operator naming a run.
pub enum Ctx {
    Agent { layout: RunLayout, config: TaskConfig, worktree: PathBuf, agent_id: String },
    Operator { layout: RunLayout, config: TaskConfig },
}

impl Ctx {
    pub fn layout(&self) -> &RunLayout {
        match self {
            Ctx::Agent { layout, .. } | Ctx::Operator { layout, .. } => layout,
        }
    }

    pub fn hub(&self) -> &Hub {
        &self.layout().hub
    }

    pub fn config(&self) -> &TaskConfig {
        match self {
            Ctx::Agent { config, .. } | Ctx::Operator { config, .. } => config,
        }
    }

    pub fn agent_id(&self) -> Option<&str> {
        match self {
            Ctx::Agent { agent_id, .. } => Some(agent_id),
            Ctx::Operator { .. } => None,
        }
    }

    /// Agents see other agents' attempts only when the run shares them.
    pub fn visible_attempts(&self) -> Result<Vec<Attempt>> {
        let all = self.hub().attempts()?;
        Ok(match self {
            Ctx::Agent { agent_id, config, .. } if !config.sharing.attempts => {
                all.into_iter().filter(|a| &a.agent_id == agent_id).collect()
            }
            _ => all,
        })
    }

    /// Strip non-public feedback for agent-facing output.
    pub fn redact(&self, mut attempt: Attempt) -> Attempt {
        if matches!(self, Ctx::Agent { .. }) && !attempt.feedback_public {
            attempt.feedback = attempt.visible_feedback().to_string();
        }
        attempt
    }
}

fn cwd() -> Result<PathBuf> {
    std::env::current_dir().context("cannot read the current directory")
}

fn open_run(run_dir: &Path) -> Result<(RunLayout, TaskConfig)> {
    let layout = RunLayout::open(run_dir)?;
    let config = layout.config()?;
    Ok((layout, config))
}

/// Context for commands an agent runs from its worktree.
pub fn agent() -> Result<Ctx> {
    let found = find_worktree_context(&cwd()?)
        .ok_or_else(|| anyhow!("not inside an agent worktree (no .coral_dir / .coral_agent_id found)"))?;
    let hub = Hub::open(&found.hub_root).with_context(|| format!("breadcrumb points at {}", found.hub_root.display()))?;
    let (layout, config) = open_run(&hub.run_dir())?;
    Ok(Ctx::Agent { layout, config, worktree: found.worktree, agent_id: found.agent_id })
}

/// Read-only context: an explicit run dir (operator) or the enclosing worktree (agent).
pub fn query(run: Option<&Path>) -> Result<Ctx> {
    match run {
        Some(dir) => {
            let (layout, config) = open_run(dir)?;
            Ok(Ctx::Operator { layout, config })
        }
        None => agent(),
    }
}

/// Run directory for orchestration commands: `--run`, the latest run of `-c`, or the enclosing worktree's run.
pub fn run_dir(run: Option<&Path>, config: Option<&Path>) -> Result<PathBuf> {
    if let Some(dir) = run {
        return Ok(dir.to_path_buf());
    }
    if let Some(path) = config {
        let cfg = TaskConfig::load(path, &[])?;
        return latest_run(&cfg).ok_or_else(|| anyhow!("no runs found for task `{}`", cfg.task.name));
    }
    if let Some(found) = find_worktree_context(&cwd()?) {
        return Ok(Hub::open(&found.hub_root)?.run_dir());
    }
    bail!("no run given: pass --run DIR or -c TASK.yaml, or run inside an agent worktree")
}
