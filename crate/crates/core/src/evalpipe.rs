//! The evaluation pipeline: commit, grade in a child process, classify,
//! record, checkpoint, count.

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use thiserror::Error;

use crate::config::TaskConfig;
use crate::hub::{Hub, HubError};
use crate::model::{determine_status, now_timestamp, Attempt, AttemptStatus, GraderOutcome, Score, ScoreBundle};
use crate::process::{signal_group, SIGKILL};
use crate::vcs::{self, VcsError};
use crate::workspace::{self, WorkspaceError};

const STDERR_TAIL_BYTES: usize = 2000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("eval message must not be empty")]
    EmptyMessage,
    #[error(transparent)]
    Vcs(#[from] VcsError),
    #[error(transparent)]
    Hub(#[from] HubError),
}

#[derive(Debug, Clone)]
pub struct GraderInvocation {
    pub command: PathBuf,
    pub codebase: PathBuf,
    pub private_dir: PathBuf,
    pub args: serde_json::Map<String, serde_json::Value>,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct BundleDoc {
    scores: Vec<Score>,
    #[serde(default)]
    feedback: String,
    #[serde(default = "yes")]
    is_public: bool,
}

fn yes() -> bool {
    true
}

/// Parse the last non-empty stdout line: a bare number or a score document.
pub fn parse_grader_output(stdout: &str) -> Result<ScoreBundle, String> {
    let line = stdout
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| "grader printed nothing".to_string())?;
    if let Ok(v) = line.parse::<f64>() {
        return Ok(ScoreBundle::single(v));
    }
    let doc: BundleDoc = serde_json::from_str(line).map_err(|e| format!("unparsable grader output `{line}`: {e}"))?;
    ScoreBundle::new(doc.scores, doc.feedback, doc.is_public).map_err(|e| e.to_string())
}

fn tail(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    let text = text.trim();
    if text.len() <= STDERR_TAIL_BYTES {
        return text.to_string();
    }
    let mut start = text.len() - STDERR_TAIL_BYTES;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    text[start..].to_string()
}

fn drain<R: Read + Send + 'static>(r: Option<R>) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut r) = r {
            let _ = r.read_to_end(&mut buf);
        }
        buf
    })
}

/// Run the grader in its own process group under a hard timeout.
pub fn host_grader(inv: &GraderInvocation) -> GraderOutcome {
    let args = serde_json::Value::Object(inv.args.clone()).to_string();
    let spawned = Command::new(&inv.command)
        .current_dir(&inv.codebase)
        .env("CORAL_CODEBASE", &inv.codebase)
        .env("CORAL_PRIVATE_DIR", &inv.private_dir)
        .env("CORAL_ARGS", args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn();
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => {
            return GraderOutcome::Crashed {
                exit_code: None,
                stderr_tail: format!("cannot launch grader {}: {e}", inv.command.display()),
            }
        }
    };
    let pgid = child.id();
    let out = drain(child.stdout.take());
    let err = drain(child.stderr.take());
    let deadline = Instant::now() + inv.timeout;
    let mut poll = Duration::from_millis(1);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if Instant::now() >= deadline => break None,
            Ok(None) => {
                thread::sleep(poll);
                poll = (poll * 2).min(Duration::from_millis(20));
            }
            Err(_) => break None,
        }
    };
    // Reap stragglers either way so nothing keeps the pipes open.
    signal_group(pgid, SIGKILL);
    let Some(status) = status else {
        let _ = child.wait();
        return GraderOutcome::TimedOut;
    };
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();
    if !status.success() {
        return GraderOutcome::Crashed { exit_code: status.code(), stderr_tail: tail(&stderr) };
    }
    match parse_grader_output(&String::from_utf8_lossy(&stdout)) {
        Ok(bundle) => GraderOutcome::Graded(bundle),
        Err(reason) => {
            let mut stderr_tail = tail(&stderr);
            if !stderr_tail.is_empty() {
                stderr_tail.push('\n');
            }
            stderr_tail.push_str(&reason);
            GraderOutcome::Crashed { exit_code: status.code(), stderr_tail }
        }
    }
}

/// Where the hub keeps the task's grader executable.
pub fn grader_path(hub: &Hub, config: &TaskConfig) -> PathBuf {
    let name = config.grader.command.file_name().map(PathBuf::from).unwrap_or_else(|| config.grader.command.clone());
    hub.eval_dir().join(name)
}

/// Outcome of one `run_eval`, with context for the agent-facing report.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub attempt: Attempt,
    /// This agent's best score before the attempt.
    pub previous_best: Option<f64>,
    pub eval_count: u64,
}

fn outcome_feedback(outcome: &GraderOutcome, timeout: Duration) -> (String, bool) {
    match outcome {
        GraderOutcome::Graded(b) => (b.feedback.clone(), b.is_public),
        GraderOutcome::Crashed { exit_code, stderr_tail } => {
            let code = exit_code.map(|c| c.to_string()).unwrap_or_else(|| "none".into());
            let mut text = format!("grader crashed (exit code {code})");
            if !stderr_tail.is_empty() {
                text.push_str(": ");
                text.push_str(stderr_tail);
            }
            (text, true)
        }
        GraderOutcome::TimedOut => (format!("grader timed out after {}s", timeout.as_secs_f64()), true),
    }
}

/// Commit the worktree, grade it, and append the attempt to the ledger.
pub fn run_eval(
    agent_id: &str,
    worktree: &Path,
    message: &str,
    config: &TaskConfig,
    hub: &Hub,
) -> Result<EvalReport, EvalError> {
    if message.trim().is_empty() {
        return Err(EvalError::EmptyMessage);
    }
    let parent = vcs::head(worktree)?;
    let mut commit = vcs::commit_all_as(worktree, message, agent_id)?;
    // Same tree, parent, author, message and second would reuse a recorded hash.
    while hub.attempt_path(&commit.hash).exists() {
        let nonce: u64 = rand::random();
        commit = vcs::amend_message(worktree, &format!("{}\n\nCoral-Nonce: {nonce:016x}", message.trim()))?;
    }
    let direction = config.grader.direction;
    let timeout = Duration::from_secs(config.grader.timeout);

    let graded = (|| -> Result<(GraderOutcome, Option<f64>), String> {
        let command = grader_path(hub, config);
        if !command.is_file() {
            return Err(format!("grader not found in private/eval: {}", command.file_name().unwrap_or_default().to_string_lossy()));
        }
        let outcome = host_grader(&GraderInvocation {
            command,
            codebase: worktree.to_path_buf(),
            private_dir: hub.private_dir(),
            args: config.grader.args.clone(),
            timeout,
        });
        let prev = hub.agent_best(agent_id, direction).map_err(|e| e.to_string())?;
        Ok((outcome, prev))
    })();
    let (status, score, feedback, feedback_public, previous_best) = match graded {
        Ok((outcome, prev)) => {
            let status = determine_status(direction, prev, &outcome);
            let score = match &outcome {
                GraderOutcome::Graded(b) if status.is_graded() => Some(b.aggregate),
                _ => None,
            };
            let (feedback, public) = outcome_feedback(&outcome, timeout);
            (status, score, feedback, public, prev)
        }
        Err(infra) => (AttemptStatus::Crashed, None, format!("infrastructure error: {infra}"), true, None),
    };
    // Attempt files are immutable once written, so the digest is taken first.
    let knowledge_checkpoint = match hub.checkpoint_knowledge() {
        Ok(c) => Some(c.digest),
        Err(e) => {
            tracing::warn!("knowledge checkpoint failed: {e}");
            None
        }
    };
    let attempt = Attempt {
        commit_hash: commit.hash,
        agent_id: agent_id.to_string(),
        title: message.trim().to_string(),
        score,
        status,
        parent_hash: parent.map(|p| p.hash),
        timestamp: now_timestamp(),
        feedback,
        knowledge_checkpoint,
        feedback_public,
        extra: Default::default(),
    };
    hub.record_attempt(&attempt)?;
    let eval_count = hub.increment_eval_count()?;
    Ok(EvalReport { attempt, previous_best, eval_count })
}

/// Result of a dry run of the grader against the seed code.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ValidationOutcome {
    Graded { score: f64, feedback: String },
    Crashed { feedback: String },
    TimedOut,
    SetupError { error: String },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ValidationReport {
    #[serde(flatten)]
    pub outcome: ValidationOutcome,
    pub elapsed_seconds: f64,
}

impl ValidationReport {
    pub fn is_graded(&self) -> bool {
        matches!(self.outcome, ValidationOutcome::Graded { .. })
    }
}

/// Build a throwaway single-agent run and evaluate the untouched seed once.
pub fn validate_task(config: &TaskConfig) -> ValidationReport {
    let started = Instant::now();
    let outcome = (|| -> Result<ValidationOutcome, String> {
        let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = config.clone();
        cfg.workspace.results_dir = scratch.path().to_path_buf();
        cfg.agents.count = 1;
        cfg.validate().map_err(|e| e.to_string())?;
        if !config.grader.command.is_file() {
            return Err(format!("grader not found: {}", config.grader.command.display()));
        }
        let layout = workspace::create_run(&cfg).map_err(|e: WorkspaceError| e.to_string())?;
        let wt = layout.agent_dir("agent-1");
        let report = run_eval("agent-1", &wt, "validate seed", &cfg, &layout.hub).map_err(|e| e.to_string())?;
        let a = report.attempt;
        Ok(match a.status {
            AttemptStatus::Timeout => ValidationOutcome::TimedOut,
            AttemptStatus::Crashed => ValidationOutcome::Crashed { feedback: a.feedback },
            _ => ValidationOutcome::Graded { score: a.score.unwrap_or(f64::NAN), feedback: a.feedback },
        })
    })();
    ValidationReport {
        outcome: outcome.unwrap_or_else(|error| ValidationOutcome::SetupError { error }),
        elapsed_seconds: started.elapsed().as_secs_f64(),
    }
}
