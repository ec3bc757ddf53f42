//! A deterministic stand-in for a coding agent: replays a YAML program of
//! file writes, CLI calls and sleeps, logs everything as NDJSON, and keeps a
//! resumable session on disk.
//!
//! ```yaml
//! program:
//!   repeat: 3
//!   finish: idle          # or `exit`
//!   steps:
//!     - write_file: {path: solution.txt, content: "{iter}"}
//!     - invoke_cli: [eval, -m, "try {iter}"]
//!     - sleep: 50
//! agents:
//!   agent-2:
//!     steps: [exit]
//! ```
//!
//! Placeholders in step text: `{agent_id}`, `{iter}` (1-based pass over the
//! steps) and `{step}` (0-based position in the whole run).

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{RuntimeAdapter, RuntimeError, SpawnContext};
use crate::hub::write_atomic;
use crate::workspace::RUNTIME_DIRNAME;

/// Name of the hidden subcommand of the `coral` binary that runs a scripted agent.
pub const AGENT_SUBCOMMAND: &str = "__scripted-agent";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    WriteFile { path: String, content: String },
    InvokeCli(Vec<String>),
    Sleep(u64),
    Exit,
    IgnoreSignals(bool),
}

impl Step {
    fn kind(&self) -> &'static str {
        match self {
            Step::WriteFile { .. } => "write_file",
            Step::InvokeCli(_) => "invoke_cli",
            Step::Sleep(_) => "sleep",
            Step::Exit => "exit",
            Step::IgnoreSignals(_) => "ignore_signals",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Finish {
    /// Stay alive waiting for signals, like an interactive session with nothing to do.
    #[default]
    Idle,
    Exit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Program {
    pub steps: Vec<Step>,
    #[serde(default = "one")]
    pub repeat: u32,
    #[serde(default)]
    pub finish: Finish,
}

fn one() -> u32 {
    1
}

impl Program {
    pub fn total_steps(&self) -> usize {
        self.steps.len() * self.repeat as usize
    }

    /// The step at flat position `i`, with its 1-based pass number.
    pub fn step_at(&self, i: usize) -> Option<(&Step, usize)> {
        if i >= self.total_steps() {
            return None;
        }
        Some((&self.steps[i % self.steps.len()], i / self.steps.len() + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramFile {
    pub program: Program,
    #[serde(default)]
    pub agents: BTreeMap<String, Program>,
}

impl ProgramFile {
    pub fn load(path: &Path) -> Result<Self, RuntimeError> {
        let bad = |reason: String| RuntimeError::Program { path: path.to_path_buf(), reason };
        let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let file = Self::parse(&text).map_err(bad)?;
        for p in std::iter::once(&file.program).chain(file.agents.values()) {
            if p.steps.is_empty() {
                return Err(bad("a program needs at least one step".into()));
            }
        }
        Ok(file)
    }

    /// Steps use the plain `{kind: args}` map form, so the YAML is read
    /// as a generic tree first and then decoded.
    pub fn parse(text: &str) -> Result<Self, String> {
        let tree: Value = serde_yaml::from_str(text).map_err(|e| e.to_string())?;
        serde_json::from_value(tree).map_err(|e| e.to_string())
    }

    pub fn for_agent(&self, agent_id: &str) -> &Program {
        self.agents.get(agent_id).unwrap_or(&self.program)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub next_step: usize,
    #[serde(default)]
    pub ignore_signals: bool,
}

/// One line of the agent log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub ts: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub payload: Value,
}

pub fn runtime_dir(worktree: &Path) -> PathBuf {
    worktree.join(RUNTIME_DIRNAME)
}

pub fn log_path(worktree: &Path) -> PathBuf {
    runtime_dir(worktree).join("agent.ndjson")
}

pub fn session_path(worktree: &Path, session_id: &str) -> PathBuf {
    runtime_dir(worktree).join("sessions").join(format!("{session_id}.json"))
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Parse an NDJSON log, skipping torn or foreign lines.
pub fn read_events(log: &Path) -> Vec<Event> {
    fs::read_to_string(log)
        .map(|text| text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
        .unwrap_or_default()
}

/// The session id of the most recent `session` event.
pub fn session_id_from_log(log: &Path) -> Option<String> {
    read_events(log)
        .iter()
        .rev()
        .find(|e| e.kind == "session")
        .and_then(|e| e.payload.get("session_id")?.as_str().map(str::to_string))
}

#[derive(Debug, Clone)]
pub struct ScriptedRuntime {
    exe: PathBuf,
}

impl ScriptedRuntime {
    pub fn new(exe: &Path) -> Self {
        Self { exe: exe.to_path_buf() }
    }

    fn launch(&self, ctx: &SpawnContext, session: Option<&str>, prompt: &str) -> Result<Child, RuntimeError> {
        let program = ctx.program.as_ref().ok_or_else(|| RuntimeError::Program {
            path: PathBuf::new(),
            reason: "the scripted runtime needs agents.script".into(),
        })?;
        ProgramFile::load(program)?;
        let dir = runtime_dir(&ctx.worktree);
        fs::create_dir_all(&dir)?;
        let out = OpenOptions::new().create(true).append(true).open(dir.join("agent.out"))?;
        let mut cmd = Command::new(&self.exe);
        cmd.arg(AGENT_SUBCOMMAND)
            .arg("--worktree")
            .arg(&ctx.worktree)
            .arg("--program")
            .arg(program)
            .arg("--agent-id")
            .arg(&ctx.agent_id)
            .arg("--max-turns")
            .arg(ctx.max_turns.to_string())
            .arg("--prompt")
            .arg(prompt);
        if let Some(s) = session {
            cmd.arg("--session").arg(s);
        }
        Ok(cmd
            .current_dir(&ctx.worktree)
            .stdin(Stdio::null())
            .stdout(out.try_clone()?)
            .stderr(out)
            .process_group(0)
            .spawn()?)
    }
}

impl RuntimeAdapter for ScriptedRuntime {
    fn name(&self) -> &str {
        "scripted"
    }

    fn instruction_filename(&self) -> &str {
        crate::workspace::INSTRUCTIONS_FILE
    }

    fn spawn(&self, ctx: &SpawnContext, prompt: &str) -> Result<Child, RuntimeError> {
        self.launch(ctx, None, prompt)
    }

    fn resume(&self, ctx: &SpawnContext, session_id: &str, prompt: &str) -> Result<Child, RuntimeError> {
        if !self.session_exists(ctx, session_id) {
            return Err(RuntimeError::UnknownSession(session_id.to_string()));
        }
        self.launch(ctx, Some(session_id), prompt)
    }

    fn session_id_of(&self, log: &Path) -> Option<String> {
        session_id_from_log(log)
    }

    fn session_exists(&self, ctx: &SpawnContext, session_id: &str) -> bool {
        valid_session_id(session_id) && session_path(&ctx.worktree, session_id).is_file()
    }
}

/// Arguments of the hidden agent subcommand.
#[derive(Debug, Clone)]
pub struct AgentArgs {
    pub worktree: PathBuf,
    pub program: PathBuf,
    pub agent_id: String,
    pub max_turns: u32,
    pub session: Option<String>,
    pub prompt: String,
}

struct Runner {
    args: AgentArgs,
    exe: PathBuf,
    log: PathBuf,
    state: SessionState,
    sigint: Arc<AtomicBool>,
    sigterm: Arc<AtomicBool>,
}

enum Control {
    Continue,
    Stop(&'static str),
}

impl Runner {
    fn emit(&self, kind: &str, payload: Value) {
        let event = Event { ts: crate::model::format_timestamp(&crate::model::now_timestamp()), kind: kind.into(), payload };
        let mut line = serde_json::to_string(&event).expect("event serializes");
        line.push('\n');
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(&self.log) {
            let _ = f.write_all(line.as_bytes());
        }
    }

    fn save(&self) {
        let path = session_path(&self.args.worktree, &self.state.session_id);
        let text = serde_json::to_string_pretty(&self.state).expect("state serializes");
        if let Err(e) = write_atomic(&path, text.as_bytes()) {
            eprintln!("cannot save session: {e}");
        }
    }

    /// React to any pending signal; cooperative agents stop, stubborn ones log and carry on.
    fn check_signals(&mut self) -> Control {
        for (flag, name) in [(&self.sigint, "SIGINT"), (&self.sigterm, "SIGTERM")] {
            if flag.swap(false, Ordering::SeqCst) {
                let ignored = self.state.ignore_signals;
                self.emit("signal", json!({"signal": name, "ignored": ignored}));
                if !ignored {
                    return Control::Stop("signal");
                }
            }
        }
        Control::Continue
    }

    fn sleep(&mut self, ms: u64) -> Control {
        let mut left = Duration::from_millis(ms);
        while !left.is_zero() {
            if let Control::Stop(r) = self.check_signals() {
                return Control::Stop(r);
            }
            let slice = left.min(Duration::from_millis(10));
            std::thread::sleep(slice);
            left -= slice;
        }
        self.check_signals()
    }

    fn run_step(&mut self, step: &Step, iter: usize) -> Result<Value, String> {
        let index = self.state.next_step.to_string();
        let iter = iter.to_string();
        let fields = [("agent_id", self.args.agent_id.as_str()), ("iter", iter.as_str()), ("step", index.as_str())];
        let fill = |s: &str| crate::templates::render(s, &fields).map_err(|e| e.to_string());
        match step {
            Step::WriteFile { path, content } => {
                let target = self.args.worktree.join(fill(path)?);
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent).map_err(|e| e.to_string())?;
                }
                fs::write(&target, fill(content)?).map_err(|e| e.to_string())?;
                Ok(json!({"path": target}))
            }
            Step::InvokeCli(args) => {
                let args: Vec<String> = args.iter().map(|a| fill(a)).collect::<Result<_, _>>()?;
                let out = Command::new(&self.exe)
                    .args(&args)
                    .current_dir(&self.args.worktree)
                    .stdin(Stdio::null())
                    .output()
                    .map_err(|e| e.to_string())?;
                Ok(json!({
                    "args": args,
                    "exit_code": out.status.code(),
                    "stdout": String::from_utf8_lossy(&out.stdout),
                    "stderr": String::from_utf8_lossy(&out.stderr),
                }))
            }
            Step::Sleep(ms) => Ok(json!({"ms": ms})),
            Step::Exit => Ok(Value::Null),
            Step::IgnoreSignals(on) => {
                self.state.ignore_signals = *on;
                Ok(json!({"ignore_signals": on}))
            }
        }
    }
}

/// Entry point of the hidden subcommand. `exe` is the CLI used for `invoke_cli` steps.
pub fn run_agent(args: AgentArgs, exe: &Path) -> Result<i32, RuntimeError> {
    let sigint = Arc::new(AtomicBool::new(false));
    let sigterm = Arc::new(AtomicBool::new(false));
    signal_hook::flag::register(signal_hook::consts::SIGINT, Arc::clone(&sigint))?;
    signal_hook::flag::register(signal_hook::consts::SIGTERM, Arc::clone(&sigterm))?;

    let file = ProgramFile::load(&args.program)?;
    let program = file.for_agent(&args.agent_id).clone();
    fs::create_dir_all(runtime_dir(&args.worktree).join("sessions"))?;

    let (state, resumed) = match &args.session {
        Some(sid) => {
            let path = session_path(&args.worktree, sid);
            let text = fs::read_to_string(&path)
                .ok()
                .filter(|_| valid_session_id(sid))
                .ok_or_else(|| RuntimeError::UnknownSession(sid.clone()))?;
            let state: SessionState =
                serde_json::from_str(&text).map_err(|_| RuntimeError::UnknownSession(sid.clone()))?;
            (state, true)
        }
        None => {
            let sid = format!("s-{:016x}", rand::thread_rng().gen::<u64>());
            (SessionState { session_id: sid, next_step: 0, ignore_signals: false }, false)
        }
    };
    let mut runner = Runner {
        log: log_path(&args.worktree),
        exe: exe.to_path_buf(),
        args,
        state,
        sigint,
        sigterm,
    };
    runner.save();
    runner.emit("session", json!({"session_id": runner.state.session_id, "resumed": resumed}));
    runner.emit("prompt", json!({"text": runner.args.prompt}));

    let mut turns = 0u32;
    loop {
        if let Control::Stop(reason) = runner.check_signals() {
            runner.save();
            runner.emit("exit", json!({"reason": reason}));
            return Ok(0);
        }
        let Some((step, iter)) = program.step_at(runner.state.next_step).map(|(s, i)| (s.clone(), i)) else {
            match program.finish {
                Finish::Exit => {
                    runner.emit("exit", json!({"reason": "finished"}));
                    return Ok(0);
                }
                Finish::Idle => {
                    if let Control::Stop(reason) = runner.sleep(50) {
                        runner.emit("exit", json!({"reason": reason}));
                        return Ok(0);
                    }
                    continue;
                }
            }
        };
        if turns >= runner.args.max_turns {
            runner.emit("max_turns", json!({"turns": turns}));
            runner.emit("exit", json!({"reason": "max_turns"}));
            return Ok(0);
        }
        let index = runner.state.next_step;
        let result = runner.run_step(&step, iter);
        let interrupted = match &step {
            Step::Sleep(ms) => matches!(runner.sleep(*ms), Control::Stop(_)),
            _ => false,
        };
        runner.state.next_step += 1;
        turns += 1;
        runner.save();
        match result {
            Ok(payload) => runner.emit("step", json!({"index": index, "kind": step.kind(), "result": payload})),
            Err(error) => runner.emit("step", json!({"index": index, "kind": step.kind(), "error": error})),
        }
        if interrupted {
            runner.emit("exit", json!({"reason": "signal"}));
            return Ok(0);
        }
        if step == Step::Exit {
            runner.emit("exit", json!({"reason": "program"}));
            return Ok(0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn program_yaml_round_trip() {
        let text = r#"
program:
  repeat: 2
  steps:
    - write_file: {path: a.txt, content: "{iter}"}
    - invoke_cli: [eval, -m, "try {iter}"]
    - sleep: 10
    - ignore_signals: true
    - exit
agents:
  agent-2:
    finish: exit
    steps: [exit]
"#;
        let f = ProgramFile::parse(text).unwrap();
        assert_eq!(f.program.total_steps(), 10);
        assert_eq!(f.program.steps[2], Step::Sleep(10));
        assert_eq!(f.program.steps[4], Step::Exit);
        assert_eq!(f.program.step_at(6).unwrap().1, 2);
        assert!(f.program.step_at(10).is_none());
        assert_eq!(f.for_agent("agent-2").finish, Finish::Exit);
        assert_eq!(f.for_agent("agent-7").finish, Finish::Idle);
    }

    #[test]
    fn session_id_comes_from_last_session_event() {
        let t = tempfile::tempdir().unwrap();
        let log = t.path().join("log.ndjson");
        fs::write(
            &log,
            concat!(
                r#"{"ts":"x","type":"session","payload":{"session_id":"s-1","resumed":false}}"#,
                "\n",
                "garbage\n",
                r#"{"ts":"x","type":"session","payload":{"session_id":"s-2","resumed":true}}"#,
                "\n",
                r#"{"ts":"x","type":"step","payload":{}}"#,
                "\n"
            ),
        )
        .unwrap();
        assert_eq!(session_id_from_log(&log).as_deref(), Some("s-2"));
        assert_eq!(session_id_from_log(&t.path().join("missing")), None);
    }

    #[test]
    fn session_ids_must_be_plain() {
        assert!(valid_session_id("s-00ff"));
        assert!(!valid_session_id("../x"));
        assert!(!valid_session_id(""));
    }
}
