//! Per-run directory tree: a clone of the task repository, one worktree per
//! agent on its own branch, hub symlinks, breadcrumbs, and the rendered
//! instruction file.
//!
//! ```text
//! results/<task>/<timestamp>/
//! |-- .coral/          hub
//! |-- repo/            per-run clone
//! `-- agents/
//!     `-- agent-1/     worktree on branch coral/agent-1
//!         |-- .coral/notes -> <hub>/public/notes
//!         |-- .coral/skills -> <hub>/public/skills
//!         |-- .coral_dir
//!         |-- .coral_agent_id
//!         `-- CORAL.md
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;

use thiserror::Error;

use crate::config::TaskConfig;
use crate::heartbeat::{HeartbeatError, HeartbeatStore};
use crate::hub::{copy_tree, Hub, HubError};
use crate::templates::{self, InstructionFields, InstructionKind, TemplateError};
use crate::vcs::{self, VcsError};

pub const HUB_DIRNAME: &str = ".coral";
pub const HUB_BREADCRUMB: &str = ".coral_dir";
pub const AGENT_BREADCRUMB: &str = ".coral_agent_id";
/// Directory inside each worktree that holds the hub symlinks.
pub const SHARED_DIRNAME: &str = ".coral";
/// Directory inside each worktree reserved for the agent runtime (logs, sessions).
pub const RUNTIME_DIRNAME: &str = ".coral_runtime";
pub const INSTRUCTIONS_FILE: &str = "CORAL.md";
pub const BRANCH_PREFIX: &str = "coral/";

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error(transparent)]
    Vcs(#[from] VcsError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Heartbeat(#[from] HeartbeatError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("setup command `{command}` failed: {output}")]
    Setup { command: String, output: String },
    #[error("seed file not found: {0}")]
    MissingSeed(PathBuf),
    #[error("not a run directory: {0}")]
    NotARun(PathBuf),
    #[error("invalid task config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone)]
pub struct RunLayout {
    pub run_dir: PathBuf,
    pub hub: Hub,
    pub repo: PathBuf,
    pub agent_dirs: BTreeMap<String, PathBuf>,
}

impl RunLayout {
    /// Open an existing run directory.
    pub fn open(run_dir: &Path) -> Result<Self, WorkspaceError> {
        let run_dir = std::path::absolute(run_dir).map_err(io_err(run_dir))?;
        let hub = Hub::open(&run_dir.join(HUB_DIRNAME)).map_err(|_| WorkspaceError::NotARun(run_dir.clone()))?;
        let mut agent_dirs = BTreeMap::new();
        if let Ok(entries) = fs::read_dir(run_dir.join("agents")) {
            for e in entries.flatten() {
                if e.path().join(AGENT_BREADCRUMB).is_file() {
                    agent_dirs.insert(e.file_name().to_string_lossy().into_owned(), e.path());
                }
            }
        }
        Ok(Self { repo: run_dir.join("repo"), run_dir, hub, agent_dirs })
    }

    pub fn agent_dir(&self, agent_id: &str) -> PathBuf {
        self.run_dir.join("agents").join(agent_id)
    }

    pub fn config(&self) -> Result<TaskConfig, WorkspaceError> {
        TaskConfig::load_resolved(&self.hub.config_path()).map_err(|e| WorkspaceError::Config(e.to_string()))
    }

    pub fn base_commit(&self) -> Result<String, WorkspaceError> {
        let p = self.hub.base_commit_path();
        Ok(fs::read_to_string(&p).map_err(io_err(&p))?.trim().to_string())
    }

    pub fn heartbeat_store(&self) -> HeartbeatStore {
        HeartbeatStore::new(self.hub.heartbeat_dir())
    }

    /// Agent ids in numeric order (`agent-2` before `agent-10`).
    pub fn agent_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.agent_dirs.keys().cloned().collect();
        ids.sort_by_key(|id| agent_sort_key(id));
        ids
    }
}

pub fn agent_sort_key(id: &str) -> (u64, String) {
    let n = id.rsplit('-').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
    (n, id.to_string())
}

/// Where the worktree's shared-memory symlinks live; rendered as `{shared_dir}`.
pub fn shared_dir(worktree: &Path) -> PathBuf {
    worktree.join(SHARED_DIRNAME)
}

#[derive(Debug, Clone)]
pub struct WorkspaceOptions {
    /// File name the agent runtime reads its instructions from.
    pub instruction_file: String,
}

impl Default for WorkspaceOptions {
    fn default() -> Self {
        Self { instruction_file: INSTRUCTIONS_FILE.into() }
    }
}

fn unique_run_dir(config: &TaskConfig) -> PathBuf {
    let parent = config.workspace.results_dir.join(config.task_slug());
    let stamp = chrono::Local::now().format("%Y-%m-%d_%H%M%S").to_string();
    let mut candidate = parent.join(&stamp);
    let mut n = 2;
    while candidate.exists() {
        candidate = parent.join(format!("{stamp}-{n}"));
        n += 1;
    }
    candidate
}

pub fn create_run(config: &TaskConfig) -> Result<RunLayout, WorkspaceError> {
    create_run_with(config, &WorkspaceOptions::default())
}

/// Build the whole run tree: hub, clone, seeds, setup, worktrees.
pub fn create_run_with(config: &TaskConfig, opts: &WorkspaceOptions) -> Result<RunLayout, WorkspaceError> {
    let run_dir = unique_run_dir(config);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let result = populate_run(&run_dir, config, opts);
    if result.is_err() {
        let _ = fs::remove_dir_all(&run_dir);
    }
    result
}

fn populate_run(run_dir: &Path, config: &TaskConfig, opts: &WorkspaceOptions) -> Result<RunLayout, WorkspaceError> {
    let run_dir = std::path::absolute(run_dir).map_err(io_err(run_dir))?;
    let mut private = vec![config.grader.command.clone()];
    private.extend(config.grader.private.iter().cloned());
    let hub = Hub::init(&run_dir.join(HUB_DIRNAME), &private)?;
    config.save(&hub.config_path()).map_err(io_err(&hub.config_path()))?;

    let repo = run_dir.join("repo");
    match &config.workspace.repo_path {
        Some(src) => vcs::clone_local(src, &repo)?,
        None => vcs::init_repo(&repo)?,
    }
    for seed in &config.task.seed {
        if !seed.exists() {
            return Err(WorkspaceError::MissingSeed(seed.clone()));
        }
        if seed.is_dir() {
            for e in fs::read_dir(seed).map_err(io_err(seed))? {
                let e = e.map_err(io_err(seed))?;
                copy_tree(&e.path(), &repo.join(e.file_name())).map_err(io_err(&e.path()))?;
            }
        } else {
            let name = seed.file_name().ok_or_else(|| WorkspaceError::MissingSeed(seed.clone()))?;
            copy_tree(seed, &repo.join(name)).map_err(io_err(seed))?;
        }
    }
    for cmd in &config.workspace.setup {
        run_setup(&repo, cmd)?;
    }
    install_ignore_guard(&repo, &opts.instruction_file)?;
    let base = vcs::commit_all(&repo, "coral: seed")?;
    let base_path = hub.base_commit_path();
    crate::hub::write_atomic(&base_path, format!("{}\n", base.hash).as_bytes()).map_err(io_err(&base_path))?;

    let store = HeartbeatStore::new(hub.heartbeat_dir());
    store.seed(&config.agent_ids(), &config.agents.heartbeat)?;

    let mut layout = RunLayout { run_dir, hub, repo, agent_dirs: BTreeMap::new() };
    for id in config.agent_ids() {
        let dir = install_agent_workspace(&layout, &id, config, opts)?;
        layout.agent_dirs.insert(id, dir);
    }
    Ok(layout)
}

fn run_setup(repo: &Path, cmd: &str) -> Result<(), WorkspaceError> {
    let out = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .current_dir(repo)
        .output()
        .map_err(|e| WorkspaceError::Setup { command: cmd.to_string(), output: e.to_string() })?;
    if !out.status.success() {
        let mut output = String::from_utf8_lossy(&out.stdout).into_owned();
        output.push_str(&String::from_utf8_lossy(&out.stderr));
        return Err(WorkspaceError::Setup {
            command: cmd.to_string(),
            output: format!("{} ({})", output.trim(), out.status),
        });
    }
    Ok(())
}

fn guard_entries(instruction_file: &str) -> Vec<String> {
    let mut v = vec![
        format!("{SHARED_DIRNAME}/"),
        HUB_BREADCRUMB.to_string(),
        AGENT_BREADCRUMB.to_string(),
        format!("{RUNTIME_DIRNAME}/"),
        INSTRUCTIONS_FILE.to_string(),
    ];
    if instruction_file != INSTRUCTIONS_FILE {
        v.push(instruction_file.to_string());
    }
    v
}

/// Keep the hub links, breadcrumbs and runtime files out of version control,
/// both via a committed `.gitignore` and the shared `info/exclude`.
fn install_ignore_guard(repo: &Path, instruction_file: &str) -> Result<(), WorkspaceError> {
    let entries = guard_entries(instruction_file);
    let gitignore = repo.join(".gitignore");
    let existing = fs::read_to_string(&gitignore).unwrap_or_default();
    let missing: Vec<&String> = entries.iter().filter(|e| !existing.lines().any(|l| l.trim() == e.as_str())).collect();
    if !missing.is_empty() {
        let mut text = existing.clone();
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str("# coral workspace guard\n");
        for e in missing {
            text.push_str(e);
            text.push('\n');
        }
        fs::write(&gitignore, text).map_err(io_err(&gitignore))?;
    }
    let common = vcs::git(repo, &["rev-parse", "--git-common-dir"])?;
    let common = repo.join(common.trim());
    let exclude = common.join("info").join("exclude");
    fs::create_dir_all(exclude.parent().expect("has parent")).map_err(io_err(&exclude))?;
    let mut text = fs::read_to_string(&exclude).unwrap_or_default();
    for e in &entries {
        if !text.lines().any(|l| l.trim() == e) {
            text.push_str(e);
            text.push('\n');
        }
    }
    fs::write(&exclude, text).map_err(io_err(&exclude))
}

#[cfg(unix)]
fn symlink(target: &Path, link: &Path) -> io::Result<()> {
    std::os::unix::fs::symlink(target, link)
}

/// Create the agent's worktree and everything inside it that is not code.
pub fn install_agent_workspace(
    layout: &RunLayout,
    agent_id: &str,
    config: &TaskConfig,
    opts: &WorkspaceOptions,
) -> Result<PathBuf, WorkspaceError> {
    let wt = layout.agent_dir(agent_id);
    if let Some(parent) = wt.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let base = layout.base_commit()?;
    vcs::git(
        &layout.repo,
        &["worktree".as_ref(), "add".as_ref(), "-q".as_ref(), "-b".as_ref(), format!("{BRANCH_PREFIX}{agent_id}").as_ref(), wt.as_os_str(), base.as_ref()],
    )?;

    let shared = shared_dir(&wt);
    fs::create_dir_all(&shared).map_err(io_err(&shared))?;
    let hub = &layout.hub;
    let links: [(&str, PathBuf, bool); 4] = [
        ("notes", hub.notes_dir(), config.sharing.notes),
        ("skills", hub.skills_dir(), config.sharing.skills),
        ("attempts", hub.attempts_dir(), config.sharing.attempts),
        ("heartbeat", hub.heartbeat_dir(), true),
    ];
    for (name, target, enabled) in links {
        if enabled {
            let link = shared.join(name);
            symlink(&target, &link).map_err(io_err(&link))?;
        }
    }

    let crumb = wt.join(HUB_BREADCRUMB);
    fs::write(&crumb, format!("{}\n", hub.root().display())).map_err(io_err(&crumb))?;
    let crumb = wt.join(AGENT_BREADCRUMB);
    fs::write(&crumb, format!("{agent_id}\n")).map_err(io_err(&crumb))?;

    let custom = match &config.agents.instructions {
        Some(p) => Some(fs::read_to_string(p).map_err(io_err(p))?),
        None => None,
    };
    let shared_str = shared.display().to_string();
    let description = if config.task.description.trim().is_empty() { &config.task.name } else { &config.task.description };
    let text = templates::render_instructions(
        InstructionKind::for_agent_count(config.agents.count),
        custom.as_deref(),
        &InstructionFields {
            task_name: &config.task.name,
            task_description: description.trim_end(),
            score_direction: templates::direction_phrase(config.grader.direction),
            shared_dir: &shared_str,
            agent_id,
        },
    )?;
    let canonical = wt.join(INSTRUCTIONS_FILE);
    fs::write(&canonical, text).map_err(io_err(&canonical))?;
    if opts.instruction_file != INSTRUCTIONS_FILE {
        let link = wt.join(&opts.instruction_file);
        symlink(Path::new(INSTRUCTIONS_FILE), &link).map_err(io_err(&link))?;
    }
    fs::create_dir_all(wt.join(RUNTIME_DIRNAME)).map_err(io_err(&wt))?;
    Ok(wt)
}

/// Breadcrumb context discovered from inside a worktree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorktreeContext {
    pub worktree: PathBuf,
    pub hub_root: PathBuf,
    pub agent_id: String,
}

/// Walk up from `start` to the nearest directory carrying both breadcrumbs.
pub fn find_worktree_context(start: &Path) -> Option<WorktreeContext> {
    let start = std::path::absolute(start).ok()?;
    for dir in start.ancestors() {
        let hub = dir.join(HUB_BREADCRUMB);
        let agent = dir.join(AGENT_BREADCRUMB);
        if hub.is_file() && agent.is_file() {
            let hub_root = PathBuf::from(fs::read_to_string(&hub).ok()?.trim());
            let agent_id = fs::read_to_string(&agent).ok()?.trim().to_string();
            if agent_id.is_empty() {
                return None;
            }
            return Some(WorktreeContext { worktree: dir.to_path_buf(), hub_root, agent_id });
        }
    }
    None
}

/// Summary row for `coral runs`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub task: String,
    pub started: String,
    pub agents: usize,
    pub attempts: usize,
    pub best_score: Option<f64>,
    pub eval_count: Option<u64>,
    pub live: bool,
}

/// Every run under `results_dir/<task>/<timestamp>/`, oldest first.
pub fn list_runs(results_dir: &Path) -> Vec<RunSummary> {
    let mut out = Vec::new();
    let Ok(tasks) = fs::read_dir(results_dir) else { return out };
    for task in tasks.flatten() {
        let Ok(runs) = fs::read_dir(task.path()) else { continue };
        for run in runs.flatten() {
            let Ok(layout) = RunLayout::open(&run.path()) else { continue };
            let cfg = layout.config().ok();
            let attempts = layout.hub.attempts().unwrap_or_default();
            let best = cfg.as_ref().and_then(|c| {
                attempts
                    .iter()
                    .filter_map(|a| a.score)
                    .filter(|s| s.is_finite())
                    .min_by(|a, b| c.grader.direction.cmp_best_first(*a, *b))
            });
            out.push(RunSummary {
                task: cfg.as_ref().map(|c| c.task.name.clone()).unwrap_or_else(|| task.file_name().to_string_lossy().into_owned()),
                started: run.file_name().to_string_lossy().into_owned(),
                agents: layout.agent_dirs.len(),
                attempts: attempts.len(),
                best_score: best,
                eval_count: layout.hub.eval_count().ok(),
                live: layout.hub.read_manager_pid().is_some_and(crate::process::pid_alive),
                run_dir: layout.run_dir,
            });
        }
    }
    out.sort_by(|a, b| a.started.cmp(&b.started).then_with(|| a.run_dir.cmp(&b.run_dir)));
    out
}

/// Most recent run of the task described by `config`.
pub fn latest_run(config: &TaskConfig) -> Option<PathBuf> {
    let dir = config.workspace.results_dir.join(config.task_slug());
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.join(HUB_DIRNAME).join("public").is_dir())
        .collect();
    runs.sort();
    runs.pop()
}
