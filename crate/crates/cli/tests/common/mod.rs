//! Task fixtures and helpers for driving the `coral` binary.
#![allow(dead_code)]

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use coral_core::workspace::{self, RunLayout};
use coral_core::TaskConfig;

pub const SECRET: &str = "PRIVATE-MARKER-7f3a";

/// Grades `solution.txt`: a number scores itself; a few words trigger failure modes.
pub fn grader_script() -> String {
    format!(
        r#"#!/bin/sh
v=$(cat "$CORAL_CODEBASE/solution.txt" 2>/dev/null)
case "$v" in
  crash) echo "no solution file" >&2; exit 1 ;;
  hang) sleep 30 ;;
  secret) echo '{{"scores":[{{"name":"s","value":1}}],"feedback":"hidden tests {SECRET}","is_public":false}}' ;;
  *) echo "$v" ;;
esac
"#
    )
}

pub struct Task {
    pub tmp: tempfile::TempDir,
    pub dir: PathBuf,
}

impl Task {
    /// A task dir with `seed/solution.txt`, an executable grader and `task.yaml`.
    pub fn new(direction: &str, seed: &str, extra: &str) -> Task {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("task");
        fs::create_dir_all(dir.join("eval")).unwrap();
        fs::create_dir_all(dir.join("seed")).unwrap();
        fs::write(dir.join("seed/solution.txt"), seed).unwrap();
        let g = dir.join("eval/grader.sh");
        fs::write(&g, grader_script()).unwrap();
        fs::set_permissions(&g, fs::Permissions::from_mode(0o755)).unwrap();
        fs::write(
            dir.join("task.yaml"),
            format!(
                "task:\n  name: Kernel Builder\n  description: Make it fast.\n  seed: [seed]\ngrader:\n  direction: {direction}\n  timeout: 1\n{extra}"
            ),
        )
        .unwrap();
        Task { tmp, dir }
    }

    pub fn yaml(&self) -> PathBuf {
        self.dir.join("task.yaml")
    }

    /// Write a scripted-agent program next to the task and return its path.
    pub fn program(&self, yaml: &str) -> PathBuf {
        let p = self.dir.join("program.yaml");
        fs::write(&p, yaml).unwrap();
        p
    }

    pub fn config(&self, overrides: &[&str]) -> TaskConfig {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        TaskConfig::load(&self.yaml(), &o).unwrap()
    }

    /// Create a run without launching agents.
    pub fn create_run(&self, overrides: &[&str]) -> RunLayout {
        workspace::create_run(&self.config(overrides)).unwrap()
    }
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_coral")
}

pub fn coral(cwd: &Path, args: &[&str]) -> Output {
    Command::new(bin()).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

pub fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

pub fn err(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, got:\n{}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8(out.stderr.clone()).unwrap()
}

pub fn json(out: &Output) -> serde_json::Value {
    serde_json::from_str(&ok(out)).unwrap()
}

pub fn write_solution(wt: &Path, v: &str) {
    fs::write(wt.join("solution.txt"), v).unwrap();
}

/// `coral eval --format json` from inside a worktree.
pub fn eval(wt: &Path, msg: &str) -> serde_json::Value {
    json(&coral(wt, &["--format", "json", "eval", "-m", msg]))
}

/// `coral start` in the background; returns the child and its run dir.
pub struct Started {
    pub child: Child,
    pub run_dir: PathBuf,
}

impl Started {
    pub fn layout(&self) -> RunLayout {
        RunLayout::open(&self.run_dir).unwrap()
    }

    /// Wait for the manager to exit on its own (after `coral stop` or a signal).
    pub fn wait(&mut self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.child.try_wait().unwrap().is_some() {
                return true;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        false
    }
}

impl Drop for Started {
    fn drop(&mut self) {
        if self.child.try_wait().ok().flatten().is_none() {
            let _ = coral(&self.run_dir, &["stop", "--run", self.run_dir.to_str().unwrap()]);
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

fn read_run_dir(child: &mut Child) -> PathBuf {
    use std::io::{BufRead, BufReader};
    let stdout = child.stdout.take().unwrap();
    let mut reader = BufReader::new(stdout);
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let dir = line.trim().strip_prefix("run dir: ").unwrap_or_else(|| panic!("unexpected first line: {line:?}"));
    // keep draining so the manager never blocks on a full pipe
    std::thread::spawn(move || {
        let mut sink = String::new();
        while reader.read_line(&mut sink).map(|n| n > 0).unwrap_or(false) {
            sink.clear();
        }
    });
    PathBuf::from(dir)
}

pub fn start(task: &Task, overrides: &[&str]) -> Started {
    let yaml = task.yaml();
    let mut args = vec!["start", "-c", yaml.to_str().unwrap()];
    args.extend_from_slice(overrides);
    spawn_manager(&task.dir, &args)
}

pub fn resume(run_dir: &Path) -> Started {
    spawn_manager(run_dir, &["resume", "--run", run_dir.to_str().unwrap()])
}

fn spawn_manager(cwd: &Path, args: &[&str]) -> Started {
    let log = fs::File::create(cwd.join(format!("manager-{}.err", std::process::id()))).ok();
    let mut child = Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "info")
        .stdout(Stdio::piped())
        .stderr(log.map(Stdio::from).unwrap_or_else(Stdio::null))
        .spawn()
        .unwrap();
    let run_dir = read_run_dir(&mut child);
    Started { child, run_dir }
}

pub fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(25));
    }
    f()
}

/// Prompt texts an agent's session log recorded, in order.
pub fn prompts(wt: &Path) -> Vec<String> {
    events(wt, "prompt").into_iter().map(|p| p["text"].as_str().unwrap_or_default().to_string()).collect()
}

pub fn events(wt: &Path, kind: &str) -> Vec<serde_json::Value> {
    coral_core::runtime::scripted::read_events(&coral_core::runtime::scripted::log_path(wt))
        .into_iter()
        .filter(|e| e.kind == kind)
        .map(|e| e.payload)
        .collect()
}
