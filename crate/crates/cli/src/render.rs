//! Plain-text output. Column order is stable; scripts should prefer `--format json`.

use std::fmt::Write;

use coral_core::evalpipe::{ValidationOutcome, ValidationReport};
use coral_core::manager::format_score;
use coral_core::workspace::RunSummary;
use coral_core::{Attempt, HeartbeatAction, StatusReport};

fn score(s: Option<f64>) -> String {
    s.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
}

fn time(a: &Attempt) -> String {
    a.timestamp.format("%Y-%m-%d %H:%M:%S").to_string()
}

pub fn eval_report(a: &Attempt, previous_best: Option<f64>, eval_count: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Commit: {}", a.commit_hash);
    let _ = writeln!(s, "Status: {}", a.status);
    let _ = writeln!(s, "Score: {} (your previous best: {})", score(a.score), format_score(previous_best));
    if !a.feedback.trim().is_empty() {
        let _ = writeln!(s, "Feedback: {}", a.feedback.trim());
    }
    let _ = writeln!(s, "Eval count: {eval_count}");
    s
}

pub fn leaderboard(rows: &[Attempt], recent: bool) -> String {
    let mut s = String::new();
    if rows.is_empty() {
        s.push_str("no attempts yet\n");
        return s;
    }
    let _ = writeln!(s, "{:<4} {:<8} {:>14} {:<9} {:<10} {:<19} TITLE", if recent { "#" } else { "RANK" }, "HASH", "SCORE", "STATUS", "AGENT", "TIME");
    for (i, a) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:<4} {:<8} {:>14} {:<9} {:<10} {:<19} {}",
            i + 1,
            a.short_hash(),
            score(a.score),
            a.status.as_str(),
            a.agent_id,
            time(a),
            a.title
        );
    }
    s
}

pub fn attempt_detail(a: &Attempt) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Commit:    {}", a.commit_hash);
    let _ = writeln!(s, "Parent:    {}", a.parent_hash.as_deref().unwrap_or("-"));
    let _ = writeln!(s, "Agent:     {}", a.agent_id);
    let _ = writeln!(s, "Title:     {}", a.title);
    let _ = writeln!(s, "Status:    {}", a.status);
    let _ = writeln!(s, "Score:     {}", score(a.score));
    let _ = writeln!(s, "Time:      {}", coral_core::model::format_timestamp(&a.timestamp));
    if let Some(k) = &a.knowledge_checkpoint {
        let _ = writeln!(s, "Knowledge: {k}");
    }
    if !a.feedback.trim().is_empty() {
        let _ = writeln!(s, "Feedback:\n{}", a.feedback.trim_end());
    }
    s
}

pub fn runs(runs: &[RunSummary]) -> String {
    let mut s = String::new();
    if runs.is_empty() {
        s.push_str("no runs found\n");
        return s;
    }
    let _ = writeln!(s, "{:<20} {:<20} {:>6} {:>8} {:>14} {:<5} DIR", "TASK", "STARTED", "AGENTS", "ATTEMPTS", "BEST", "LIVE");
    for r in runs {
        let _ = writeln!(
            s,
            "{:<20} {:<20} {:>6} {:>8} {:>14} {:<5} {}",
            r.task,
            r.started,
            r.agents,
            r.attempts,
            score(r.best_score),
            if r.live { "yes" } else { "no" },
            r.run_dir.display()
        );
    }
    s
}

pub fn status(r: &StatusReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Run: {}", r.run_dir.display());
    let _ = writeln!(s, "Task: {} ({})", r.task, r.direction);
    let _ = writeln!(s, "Manager: {}", if r.manager_alive { "running" } else { "not running" });
    let _ = writeln!(s, "Agents: {}/{} running", r.running(), r.agents.len());
    for a in &r.agents {
        let _ = writeln!(
            s,
            "  {:<10} {:<5} pid {:<8} evals {:<5} best {}",
            a.agent_id,
            if a.alive { "alive" } else { "dead" },
            a.pid.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
            a.evals,
            score(a.best_score)
        );
    }
    let _ = writeln!(s, "Eval count: {}", r.eval_count);
    let _ = writeln!(s, "Attempts: {}", r.attempts);
    if !r.leaderboard.is_empty() {
        s.push_str("Leaderboard:\n");
        s.push_str(&leaderboard(&r.leaderboard, false));
    }
    s
}

pub fn heartbeat(actions: &[HeartbeatAction]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>5} {:<9} {:<7} PROTECTED", "NAME", "EVERY", "TRIGGER", "SCOPE");
    for a in actions {
        let trigger = serde_json::to_value(a.trigger).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let scope = serde_json::to_value(a.scope).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(s, "{:<14} {:>5} {:<9} {:<7} {}", a.name, a.every, trigger, scope, if a.protected { "yes" } else { "no" });
    }
    s
}

pub fn validation(r: &ValidationReport) -> String {
    let head = match &r.outcome {
        ValidationOutcome::Graded { score, feedback } if feedback.trim().is_empty() => format!("graded: score {score}"),
        ValidationOutcome::Graded { score, feedback } => format!("graded: score {score}\nfeedback: {}", feedback.trim()),
        ValidationOutcome::Crashed { feedback } => format!("grader error: {}", feedback.trim()),
        ValidationOutcome::TimedOut => "grader timed out".to_string(),
        ValidationOutcome::SetupError { error } => format!("setup error: {error}"),
    };
    format!("{head}\nelapsed: {:.2}s\n", r.elapsed_seconds)
}
