//! Agent lifecycle: spawn, watch the ledger, deliver heartbeats, restart the
//! dead, and shut down in three stages.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Child;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::config::TaskConfig;
use crate::heartbeat::{due_actions, render_heartbeat, HeartbeatConfig, HeartbeatError};
use crate::hub::{HubError, LeaderboardQuery};
use crate::model::{Attempt, AgentState, Direction};
use crate::process::{pid_alive, signal_group, signal_pid, SIGINT, SIGKILL, SIGTERM};
use crate::runtime::{adapter_for, RuntimeAdapter, RuntimeError, SpawnContext};
use crate::templates::{self, direction_phrase, TemplateError};
use crate::workspace::{self, shared_dir, RunLayout, WorkspaceError, WorkspaceOptions};

/// Slice used while waiting, so signals and exits are noticed promptly.
const SLICE: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error(transparent)]
    Heartbeat(#[from] HeartbeatError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("run is already managed by live process {0}")]
    AlreadyRunning(u32),
    #[error("invalid run configuration: {0}")]
    Config(String),
}

pub fn kickoff_prompt(instruction_file: &str) -> String {
    format!("Read {instruction_file} in your working directory and start working on the task.")
}

pub const RESTART_PROMPT: &str = "Your previous session ended. Continue working on the task from where you left off.";
pub const RESUME_PROMPT: &str = "The run has been resumed. Continue working on the task from where you left off.";

pub fn format_score(score: Option<f64>) -> String {
    match score {
        Some(s) => s.to_string(),
        None => "none yet".into(),
    }
}

/// The block that tells an agent how one of its evals went.
pub fn eval_result_block(attempt: &Attempt) -> String {
    let mut s = String::from("## Evaluation result\n");
    s.push_str(&format!("Commit: {} ({})\n", attempt.short_hash(), attempt.title));
    s.push_str(&format!("Status: {}\n", attempt.status));
    s.push_str(&format!("Score: {}\n", attempt.score.map(|v| v.to_string()).unwrap_or_else(|| "-".into())));
    if attempt.feedback_public && !attempt.feedback.trim().is_empty() {
        s.push_str(&format!("Feedback: {}\n", attempt.feedback.trim()));
    }
    s
}

/// Eval result followed by each due heartbeat, in config order.
pub fn combined_prompt(attempt: &Attempt, due: &[crate::model::HeartbeatAction], shared: &str) -> Result<String, HeartbeatError> {
    let mut parts = vec![eval_result_block(attempt).trim_end().to_string()];
    for action in due {
        parts.push(render_heartbeat(action, shared, &attempt.agent_id)?.trim_end().to_string());
    }
    Ok(parts.join("\n\n"))
}

/// Five-point summary for an agent whose session could not be restored.
pub fn orientation_prompt(
    agent_id: &str,
    attempt_count: usize,
    direction: Direction,
    best: Option<f64>,
    shared: &str,
) -> Result<String, TemplateError> {
    templates::render(templates::ORIENTATION, &[
        ("agent_id", agent_id),
        ("attempt_count", &attempt_count.to_string()),
        ("score_direction", direction_phrase(direction)),
        ("best_score", &format_score(best)),
        ("shared_dir", shared),
    ])
}

fn global_best(attempts: &[Attempt], direction: Direction) -> Option<f64> {
    attempts
        .iter()
        .filter(|a| a.status.is_graded())
        .filter_map(|a| a.score)
        .filter(|s| s.is_finite())
        .min_by(|a, b| direction.cmp_best_first(*a, *b))
}

fn check_runtime(config: &TaskConfig, exe: &Path) -> Result<Box<dyn RuntimeAdapter>, ManagerError> {
    let adapter = adapter_for(&config.agents.runtime, exe)?;
    if adapter.name() == "scripted" && config.agents.script.is_none() {
        return Err(ManagerError::Config("agents.script is required with the scripted runtime".into()));
    }
    Ok(adapter)
}

struct Pending {
    prompt: String,
    since: Instant,
}

struct AgentSlot {
    ctx: SpawnContext,
    state: AgentState,
    child: Option<Child>,
    pending: Option<Pending>,
    queued: Vec<String>,
    latest_result: Option<String>,
    last_start: Instant,
    restarts: u64,
}

impl AgentSlot {
    fn pid(&self) -> Option<u32> {
        self.child.as_ref().map(Child::id)
    }

    /// True once the child has exited (and is reaped).
    fn exited(&mut self) -> bool {
        match self.child.as_mut() {
            None => true,
            Some(c) => !matches!(c.try_wait(), Ok(None)),
        }
    }
}

/// One live run under supervision.
pub struct Manager {
    layout: RunLayout,
    config: TaskConfig,
    adapter: Box<dyn RuntimeAdapter>,
    agents: Vec<AgentSlot>,
    seen: HashSet<String>,
    global_count: u64,
    poll: Duration,
    stage_timeout: Duration,
    sessions: BTreeMap<String, String>,
}

impl Manager {
    /// Create the run directory, install workspaces and spawn every agent.
    pub fn start(config: &TaskConfig, exe: &Path) -> Result<Self, ManagerError> {
        let adapter = check_runtime(config, exe)?;
        let layout = workspace::create_run_with(config, &WorkspaceOptions {
            instruction_file: adapter.instruction_filename().to_string(),
        })?;
        let run_dir = layout.run_dir.clone();
        let mut mgr = Self::assemble(layout, config.clone(), adapter);
        let prompt = kickoff_prompt(mgr.adapter.instruction_filename());
        let spawned = (0..mgr.agents.len()).try_for_each(|i| {
            let child = mgr.adapter.spawn(&mgr.agents[i].ctx, &prompt)?;
            mgr.agents[i].child = Some(child);
            Ok::<_, ManagerError>(())
        });
        if let Err(e) = spawned.and_then(|_| mgr.write_pids()) {
            for slot in &mut mgr.agents {
                if let Some(mut c) = slot.child.take() {
                    signal_group(c.id(), SIGKILL);
                    let _ = c.wait();
                }
            }
            let _ = std::fs::remove_dir_all(&run_dir);
            return Err(e);
        }
        Ok(mgr)
    }

    /// Take over an existing run: restore sessions where possible, orient the rest.
    pub fn resume(run_dir: &Path, exe: &Path) -> Result<Self, ManagerError> {
        let layout = RunLayout::open(run_dir)?;
        if let Some(pid) = layout.hub.read_manager_pid().filter(|p| pid_alive(*p) && *p != std::process::id()) {
            return Err(ManagerError::AlreadyRunning(pid));
        }
        let config = layout.config()?;
        let adapter = check_runtime(&config, exe)?;
        let sessions = layout.hub.load_sessions()?;
        let mut mgr = Self::assemble(layout, config, adapter);
        mgr.sessions = sessions;
        mgr.replay_ledger()?;

        let attempts = mgr.layout.hub.attempts()?;
        let best = global_best(&attempts, mgr.config.grader.direction);
        for i in 0..mgr.agents.len() {
            let ctx = mgr.agents[i].ctx.clone();
            let restored = match mgr.sessions.get(&ctx.agent_id) {
                Some(sid) if mgr.adapter.session_exists(&ctx, sid) => mgr.adapter.resume(&ctx, sid, RESUME_PROMPT).ok(),
                _ => None,
            };
            let child = match restored {
                Some(c) => c,
                None => {
                    let shared = shared_dir(&ctx.worktree).display().to_string();
                    let prompt =
                        orientation_prompt(&ctx.agent_id, attempts.len(), mgr.config.grader.direction, best, &shared)?;
                    mgr.adapter.spawn(&ctx, &prompt)?
                }
            };
            mgr.agents[i].child = Some(child);
        }
        mgr.write_pids()?;
        Ok(mgr)
    }

    fn assemble(layout: RunLayout, config: TaskConfig, adapter: Box<dyn RuntimeAdapter>) -> Self {
        let agents = layout
            .agent_ids()
            .into_iter()
            .map(|id| AgentSlot {
                ctx: SpawnContext {
                    worktree: layout.agent_dir(&id),
                    agent_id: id.clone(),
                    model: config.agents.model.clone(),
                    max_turns: config.agents.max_turns,
                    program: config.agents.script.clone(),
                },
                state: AgentState::new(id),
                child: None,
                pending: None,
                queued: Vec::new(),
                latest_result: None,
                last_start: Instant::now(),
                restarts: 0,
            })
            .collect();
        Self {
            poll: Duration::from_secs_f64(config.run.poll_interval.max(0.01)),
            stage_timeout: Duration::from_secs_f64(config.run.stage_timeout.max(0.0)),
            layout,
            config,
            adapter,
            agents,
            seen: HashSet::new(),
            global_count: 0,
            sessions: BTreeMap::new(),
        }
    }

    /// Rebuild counters from attempts already on disk without delivering anything.
    fn replay_ledger(&mut self) -> Result<(), ManagerError> {
        let store = self.layout.heartbeat_store();
        for attempt in self.layout.hub.attempts()? {
            self.seen.insert(attempt.commit_hash.clone());
            self.global_count += 1;
            if let Some(slot) = self.agents.iter_mut().find(|s| s.ctx.agent_id == attempt.agent_id) {
                let cfg = store.effective(&attempt.agent_id).unwrap_or_default();
                due_actions(&cfg.actions, &mut slot.state, self.global_count, &attempt);
                slot.latest_result = Some(eval_result_block(&attempt));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> &RunLayout {
        &self.layout
    }

    pub fn run_dir(&self) -> &Path {
        &self.layout.run_dir
    }

    pub fn agent_state(&self, agent_id: &str) -> Option<&AgentState> {
        self.agents.iter().find(|s| s.ctx.agent_id == agent_id).map(|s| &s.state)
    }

    pub fn restarts(&self, agent_id: &str) -> Option<u64> {
        self.agents.iter().find(|s| s.ctx.agent_id == agent_id).map(|s| s.restarts)
    }

    pub fn global_count(&self) -> u64 {
        self.global_count
    }

    fn write_pids(&self) -> Result<(), ManagerError> {
        self.layout.hub.write_manager_pid(std::process::id())?;
        let pids: Vec<Option<u32>> = self.agents.iter().map(AgentSlot::pid).collect();
        self.layout.hub.write_agent_pids(&pids)?;
        Ok(())
    }

    /// Supervise until `stop` is raised, then shut every agent down.
    pub fn run(&mut self, stop: &AtomicBool) -> Result<(), ManagerError> {
        while !stop.load(Ordering::SeqCst) {
            self.tick();
            let next = Instant::now() + self.poll;
            while Instant::now() < next && !stop.load(Ordering::SeqCst) {
                std::thread::sleep(SLICE.min(next.saturating_duration_since(Instant::now())));
                self.service_agents();
            }
        }
        self.shutdown();
        Ok(())
    }

    /// One monitoring pass: ingest new attempts, then service every agent.
    pub fn tick(&mut self) {
        if let Err(e) = self.scan_attempts() {
            tracing::warn!("attempt scan failed: {e}");
        }
        self.service_agents();
    }

    fn scan_attempts(&mut self) -> Result<(), ManagerError> {
        let mut fresh = Vec::new();
        for path in self.layout.hub.attempt_files()? {
            let Some(hash) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            if self.seen.contains(hash) {
                continue;
            }
            match crate::hub::Hub::read_attempt_file(&path) {
                Ok(a) => fresh.push(a),
                Err(e) => tracing::warn!("{e}"),
            }
        }
        fresh.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.commit_hash.cmp(&b.commit_hash)));
        let store = self.layout.heartbeat_store();
        for attempt in fresh {
            self.seen.insert(attempt.commit_hash.clone());
            self.global_count += 1;
            let Some(slot) = self.agents.iter_mut().find(|s| s.ctx.agent_id == attempt.agent_id) else { continue };
            let cfg = store.effective(&attempt.agent_id).unwrap_or_else(|e| {
                tracing::warn!("heartbeat config for {}: {e}; using defaults", attempt.agent_id);
                HeartbeatConfig::default()
            });
            let due = due_actions(&cfg.actions, &mut slot.state, self.global_count, &attempt);
            slot.latest_result = Some(eval_result_block(&attempt));
            if due.is_empty() {
                continue;
            }
            let shared = shared_dir(&slot.ctx.worktree).display().to_string();
            match combined_prompt(&attempt, &due, &shared) {
                Ok(p) => slot.queued.push(p),
                Err(e) => tracing::warn!("cannot render heartbeat for {}: {e}", attempt.agent_id),
            }
        }
        Ok(())
    }

    fn service_agents(&mut self) {
        let mut changed = false;
        for i in 0..self.agents.len() {
            changed |= self.service(i);
        }
        if changed {
            if let Err(e) = self.write_pids() {
                tracing::warn!("cannot update pid files: {e}");
            }
        }
    }

    /// Returns true if the agent's process changed.
    fn service(&mut self, i: usize) -> bool {
        let exited = self.agents[i].exited();
        if let Some(pending) = &self.agents[i].pending {
            if !exited && pending.since.elapsed() < self.stage_timeout {
                return false;
            }
            if !exited {
                tracing::warn!("{} ignored the interrupt; killing it", self.agents[i].ctx.agent_id);
                self.kill(i);
            }
            let pending = self.agents[i].pending.take().expect("checked above");
            let mut prompt = pending.prompt;
            let queued = std::mem::take(&mut self.agents[i].queued);
            if !queued.is_empty() {
                prompt = std::iter::once(prompt).chain(queued).collect::<Vec<_>>().join("\n\n");
            }
            self.relaunch(i, &prompt, false);
            return true;
        }
        if exited {
            if self.agents[i].last_start.elapsed() < self.poll {
                return false;
            }
            let slot = &mut self.agents[i];
            let mut parts = vec![RESTART_PROMPT.to_string()];
            let queued = std::mem::take(&mut slot.queued);
            if queued.is_empty() {
                parts.extend(slot.latest_result.iter().map(|r| r.trim_end().to_string()));
            } else {
                parts.extend(queued);
            }
            self.relaunch(i, &parts.join("\n\n"), true);
            return true;
        }
        if !self.agents[i].queued.is_empty() {
            let prompt = std::mem::take(&mut self.agents[i].queued).join("\n\n");
            self.deliver_intervention(i, prompt);
        }
        false
    }

    /// Interrupt a live agent; it is resumed with `prompt` once it has stopped.
    fn deliver_intervention(&mut self, i: usize, prompt: String) {
        let slot = &mut self.agents[i];
        let pid = slot.pid().unwrap_or(0);
        if !self.adapter.interrupt(pid) {
            // Dead already: the restart path will carry the prompt.
            slot.queued.insert(0, prompt);
            return;
        }
        slot.pending = Some(Pending { prompt, since: Instant::now() });
    }

    /// Kill only the agent process; an eval it launched runs to completion and is recorded.
    fn kill(&mut self, i: usize) {
        if let Some(child) = self.agents[i].child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }

    /// Resume the agent's latest session with `prompt`, or start it fresh.
    fn relaunch(&mut self, i: usize, prompt: &str, restart: bool) {
        let ctx = self.agents[i].ctx.clone();
        let log = self.adapter.log_path(&ctx.worktree);
        let resumed = match self.adapter.session_id_of(&log) {
            Some(sid) => match self.adapter.resume(&ctx, &sid, prompt) {
                Ok(c) => Some(c),
                Err(e) => {
                    tracing::warn!("cannot resume {} ({e}); starting fresh", ctx.agent_id);
                    None
                }
            },
            None => None,
        };
        let child = match resumed {
            Some(c) => Ok(c),
            None => {
                let fresh = format!("{}\n\n{prompt}", kickoff_prompt(self.adapter.instruction_filename()));
                self.adapter.spawn(&ctx, &fresh)
            }
        };
        let slot = &mut self.agents[i];
        slot.last_start = Instant::now();
        match child {
            Ok(c) => {
                if restart {
                    slot.restarts += 1;
                    tracing::info!("restarted {} (pid {})", ctx.agent_id, c.id());
                }
                slot.child = Some(c);
            }
            Err(e) => {
                tracing::warn!("failed to launch {}: {e}; retrying next tick", ctx.agent_id);
                slot.queued.insert(0, prompt.to_string());
                slot.child = None;
            }
        }
    }

    fn record_sessions(&mut self) {
        for slot in &self.agents {
            let log = self.adapter.log_path(&slot.ctx.worktree);
            if let Some(sid) = self.adapter.session_id_of(&log) {
                self.sessions.insert(slot.ctx.agent_id.clone(), sid);
            }
        }
        if let Err(e) = self.layout.hub.save_sessions(&self.sessions) {
            tracing::warn!("cannot save sessions: {e}");
        }
    }

    /// Interrupt, then terminate, then kill, waiting `stage_timeout` between stages.
    pub fn shutdown(&mut self) {
        let stages: [(i32, bool); 3] = [(SIGINT, false), (SIGTERM, false), (SIGKILL, true)];
        for (sig, group) in stages {
            let mut any = false;
            for slot in &mut self.agents {
                if slot.exited() {
                    continue;
                }
                let pid = slot.pid().expect("live agent has a child");
                any = true;
                if group {
                    signal_group(pid, sig);
                } else {
                    signal_pid(pid, sig);
                }
            }
            if !any {
                break;
            }
            let deadline = Instant::now() + self.stage_timeout;
            while Instant::now() < deadline && self.agents.iter_mut().any(|s| !s.exited()) {
                std::thread::sleep(Duration::from_millis(20));
            }
            self.record_sessions();
        }
        for slot in &mut self.agents {
            if let Some(mut c) = slot.child.take() {
                let _ = c.wait();
            }
        }
        self.record_sessions();
        self.layout.hub.remove_pid_files();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StopReport {
    pub manager_signalled: bool,
    /// Agent processes that had to be stopped directly (no live manager).
    pub orphans_stopped: usize,
    pub survivors: Vec<u32>,
}

/// Stop a run from outside: signal its manager, or clean up orphans if the manager is gone.
pub fn stop_run(run_dir: &Path, stage_timeout: Duration) -> Result<StopReport, ManagerError> {
    let layout = RunLayout::open(run_dir)?;
    let hub = &layout.hub;
    let mut report = StopReport::default();
    if let Some(pid) = hub.read_manager_pid().filter(|p| pid_alive(*p)) {
        report.manager_signalled = signal_pid(pid, SIGTERM);
        let patience = stage_timeout * 3 + Duration::from_secs(5);
        if crate::process::wait_gone(pid, patience) {
            return Ok(report);
        }
        tracing::warn!("manager {pid} did not exit; killing it");
        signal_pid(pid, SIGKILL);
        crate::process::wait_gone(pid, Duration::from_secs(2));
    }
    let mut live: Vec<u32> = hub.read_agent_pids().into_iter().filter(|p| pid_alive(*p)).collect();
    report.orphans_stopped = live.len();
    for (sig, group) in [(SIGINT, false), (SIGTERM, false), (SIGKILL, true)] {
        if live.is_empty() {
            break;
        }
        for &pid in &live {
            if group {
                signal_group(pid, sig);
            } else {
                signal_pid(pid, sig);
            }
        }
        let deadline = Instant::now() + stage_timeout;
        while Instant::now() < deadline && live.iter().any(|p| pid_alive(*p)) {
            std::thread::sleep(Duration::from_millis(20));
        }
        live.retain(|p| pid_alive(*p));
    }
    report.survivors = live;
    if hub.manager_pid_path().exists() || hub.agent_pids_path().exists() || report.orphans_stopped > 0 {
        let mut sessions = hub.load_sessions()?;
        for id in layout.agent_ids() {
            let log = crate::runtime::scripted::log_path(&layout.agent_dir(&id));
            if let Some(sid) = crate::runtime::scripted::session_id_from_log(&log) {
                sessions.insert(id, sid);
            }
        }
        hub.save_sessions(&sessions)?;
    }
    hub.remove_pid_files();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentStatus {
    pub agent_id: String,
    pub pid: Option<u32>,
    pub alive: bool,
    pub evals: u64,
    pub best_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusReport {
    pub run_dir: PathBuf,
    pub task: String,
    pub direction: Direction,
    pub manager_alive: bool,
    pub agents: Vec<AgentStatus>,
    pub eval_count: u64,
    pub attempts: usize,
    pub leaderboard: Vec<Attempt>,
}

impl StatusReport {
    pub fn running(&self) -> usize {
        self.agents.iter().filter(|a| a.alive).count()
    }
}

/// Liveness, per-agent counts and the top of the leaderboard.
pub fn status(run_dir: &Path, top: usize) -> Result<StatusReport, ManagerError> {
    let layout = RunLayout::open(run_dir)?;
    let config = layout.config()?;
    let hub = &layout.hub;
    let attempts = hub.attempts()?;
    let pids = hub.read_agent_pids();
    let direction = config.grader.direction;
    let agents = layout
        .agent_ids()
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let pid = pids.get(i).copied().filter(|p| *p != 0);
            let mine: Vec<&Attempt> = attempts.iter().filter(|a| a.agent_id == id).collect();
            AgentStatus {
                alive: pid.is_some_and(pid_alive),
                pid,
                evals: mine.len() as u64,
                best_score: mine
                    .iter()
                    .filter(|a| a.status.is_graded())
                    .filter_map(|a| a.score)
                    .min_by(|a, b| direction.cmp_best_first(*a, *b)),
                agent_id: id,
            }
        })
        .collect();
    Ok(StatusReport {
        run_dir: layout.run_dir.clone(),
        task: config.task.name.clone(),
        direction,
        manager_alive: hub.read_manager_pid().is_some_and(pid_alive),
        agents,
        eval_count: hub.eval_count()?,
        attempts: attempts.len(),
        leaderboard: crate::hub::rank_attempts(&attempts, direction, &LeaderboardQuery { n: top, ..Default::default() }),
    })
}
