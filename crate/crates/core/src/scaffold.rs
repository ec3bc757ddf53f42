//! `coral init`: a starter task directory.

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScaffoldError {
    #[error("{0} exists and is not empty")]
    NotEmpty(PathBuf),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub const TASK_TEMPLATE: &str = r#"# Task definition for coral.

task:
  # Human-readable name; also used for the results directory.
  name: my-task
  # What the agents should achieve. Shown verbatim in their instructions.
  description: |
    Describe the problem, the files to edit, and what a good solution looks like.
  # Seed files or directories copied into the repository before agents start.
  seed:
    - seed

grader:
  # Executable run in each candidate's worktree. Its last stdout line is either
  # a number or {"scores": [{"name": ..., "value": ..., "weight": ...}], "feedback": ..., "is_public": true}.
  command: eval/grader.sh
  # "maximize" or "minimize".
  direction: maximize
  # Seconds before the grader is killed and the attempt recorded as a timeout.
  timeout: 300
  # Passed to the grader as JSON in CORAL_ARGS.
  args: {}

agents:
  # Number of concurrent agents, each in its own worktree.
  count: 1
  runtime: claude_code
  model: ""
  max_turns: 200
  # Extra or replacement heartbeat actions, e.g.
  # - {name: reflect, every: 3, trigger: interval, scope: local}
  heartbeat: []

workspace:
  # Runs are created under <results_dir>/<task name>/<timestamp>/.
  results_dir: results
  # Existing git repository to clone; omit to start from an empty one.
  # repo_path: ../my-repo
  # Shell commands run once in the fresh clone.
  setup: []

run:
  verbose: false
  ui: false
  # Seconds between scans of the attempt ledger.
  poll_interval: 5
  # Seconds to wait at each shutdown stage.
  stage_timeout: 10

sharing:
  # Which parts of the shared memory agents can see.
  attempts: true
  notes: true
  skills: true
"#;

pub const GRADER_STUB: &str = r#"#!/bin/sh
# Grade the code in $CORAL_CODEBASE and print the score as the last line.
# Task arguments arrive as JSON in $CORAL_ARGS; private files live in $CORAL_PRIVATE_DIR/eval.
echo "grader not implemented" >&2
exit 1
"#;

/// Write `task.yaml`, `eval/grader.sh` and `seed/` into `dir`.
pub fn scaffold(dir: &Path) -> Result<Vec<PathBuf>, ScaffoldError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ScaffoldError::Io { path, source }
    };
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() {
            return Err(ScaffoldError::NotEmpty(dir.to_path_buf()));
        }
    } else if dir.exists() {
        return Err(ScaffoldError::NotEmpty(dir.to_path_buf()));
    }
    let task = dir.join("task.yaml");
    let eval = dir.join("eval");
    let grader = eval.join("grader.sh");
    let seed = dir.join("seed");
    fs::create_dir_all(&eval).map_err(io_err(&eval))?;
    fs::create_dir_all(&seed).map_err(io_err(&seed))?;
    fs::write(&task, TASK_TEMPLATE).map_err(io_err(&task))?;
    fs::write(&grader, GRADER_STUB).map_err(io_err(&grader))?;
    fs::set_permissions(&grader, fs::Permissions::from_mode(0o755)).map_err(io_err(&grader))?;
    Ok(vec![task, eval, seed])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskConfig;

    #[test]
    fn template_parses_with_all_sections() {
        let cfg = TaskConfig::from_yaml_str(TASK_TEMPLATE).unwrap();
        assert_eq!(cfg.task.name, "my-task");
        for section in ["task:", "grader:", "agents:", "workspace:", "run:", "sharing:"] {
            assert!(TASK_TEMPLATE.lines().any(|l| l == section), "{section}");
        }
    }

    #[test]
    fn refuses_non_empty_dir() {
        let t = tempfile::tempdir().unwrap();
        fs::write(t.path().join("x"), "").unwrap();
        assert!(matches!(scaffold(t.path()), Err(ScaffoldError::NotEmpty(_))));
        let fresh = t.path().join("new");
        assert_eq!(scaffold(&fresh).unwrap().len(), 3);
        assert!(fresh.join("eval/grader.sh").is_file());
    }
}
