//! The shared persistent memory: a directory tree every agent can reach.
//!
//! ```text
//! .coral/
//! |-- public/            symlinked (piecewise) into each worktree
//! |   |-- attempts/<hash>.json
//! |   |-- notes/
//! |   |-- skills/
//! |   |-- heartbeat/
//! |   |-- sessions.json
//! |   |-- eval_count
//! |   |-- manager.pid
//! |   `-- agent.pids
//! `-- private/
//!     `-- eval/          grader executable and artifacts
//! ```
//!
//! Every write is a temp-file-plus-rename so readers never see torn files.
//! Attempt files are created with a hard link, which fails instead of
//! clobbering when the hash already exists. The eval counter is the only
//! resource guarded by a lock.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::heartbeat::HeartbeatConfig;
use crate::model::{decode_attempt, encode_attempt, Attempt, Direction};

#[derive(Debug, Error)]
pub enum HubError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("a hub already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("no hub at {0}")]
    Missing(PathBuf),
    #[error("task has no grader: no private files given")]
    NoGrader,
    #[error("grader artifact not found: {0}")]
    MissingArtifact(PathBuf),
    #[error("attempt {0} is already recorded")]
    DuplicateAttempt(String),
    #[error("no attempt matches `{0}`")]
    UnknownAttempt(String),
    #[error("`{0}` matches more than one attempt")]
    AmbiguousAttempt(String),
    #[error("eval counter at {path} is corrupt: `{content}`")]
    CorruptCounter { path: PathBuf, content: String },
    #[error("timed out waiting for the eval counter lock after {0:?}")]
    LockTimeout(Duration),
    #[error("malformed {what} at {path}: {reason}")]
    Malformed { what: &'static str, path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HubError + '_ {
    move |source| HubError::Io { path: path.to_path_buf(), source }
}

/// Write `bytes` to `path` through a sibling temp file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::Builder::new().prefix(".tmp-").tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Recursively copy a file or directory.
pub fn copy_tree(src: &Path, dst: &Path) -> io::Result<()> {
    let meta = fs::metadata(src)?;
    if meta.is_dir() {
        fs::create_dir_all(dst)?;
        for entry in fs::read_dir(src)? {
            let entry = entry?;
            copy_tree(&entry.path(), &dst.join(entry.file_name()))?;
        }
    } else {
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(src, dst)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeCheckpoint {
    pub digest: String,
    pub file_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaderboardQuery {
    pub n: usize,
    pub agent: Option<String>,
    pub search: Option<String>,
    pub recent: bool,
}

impl Default for LeaderboardQuery {
    fn default() -> Self {
        Self { n: 20, agent: None, search: None, recent: false }
    }
}

/// Filter and order attempts for display.
///
/// Default view: graded attempts best-first, ties to the earlier timestamp.
/// `recent`: every attempt, newest first.
pub fn rank_attempts(attempts: &[Attempt], direction: Direction, query: &LeaderboardQuery) -> Vec<Attempt> {
    let needle = query.search.as_ref().map(|s| s.to_lowercase());
    let mut rows: Vec<Attempt> = attempts
        .iter()
        .filter(|a| query.agent.as_ref().is_none_or(|id| &a.agent_id == id))
        .filter(|a| needle.as_ref().is_none_or(|n| a.title.to_lowercase().contains(n.as_str())))
        .filter(|a| query.recent || a.score.is_some())
        .cloned()
        .collect();
    if query.recent {
        rows.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then_with(|| b.commit_hash.cmp(&a.commit_hash)));
    } else {
        rows.sort_by(|a, b| {
            let (sa, sb) = (a.score.unwrap_or(f64::NAN), b.score.unwrap_or(f64::NAN));
            direction
                .cmp_best_first(sa, sb)
                .then_with(|| a.timestamp.cmp(&b.timestamp))
                .then_with(|| a.commit_hash.cmp(&b.commit_hash))
        });
    }
    rows.truncate(query.n);
    rows
}

/// Handle on a hub directory (the `.coral` folder of a run).
#[derive(Debug, Clone)]
pub struct Hub {
    root: PathBuf,
}

impl Hub {
    /// Create the full layout and copy grader artifacts into `private/eval/`.
    pub fn init(root: &Path, private_files: &[PathBuf]) -> Result<Hub, HubError> {
        if root.join("public").exists() || root.join("private").exists() {
            return Err(HubError::AlreadyExists(root.to_path_buf()));
        }
        if private_files.is_empty() {
            return Err(HubError::NoGrader);
        }
        for f in private_files {
            if !f.exists() {
                return Err(HubError::MissingArtifact(f.clone()));
            }
        }
        let hub = Hub { root: std::path::absolute(root).map_err(io_err(root))? };
        for dir in [
            hub.attempts_dir(),
            hub.notes_dir(),
            hub.skills_dir(),
            hub.heartbeat_dir(),
            hub.eval_dir(),
            hub.tmp_dir(),
        ] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        for f in private_files {
            let name = f.file_name().ok_or_else(|| HubError::MissingArtifact(f.clone()))?;
            let dst = hub.eval_dir().join(name);
            copy_tree(f, &dst).map_err(io_err(&dst))?;
        }
        let counter = hub.eval_count_path();
        write_atomic(&counter, b"0\n").map_err(io_err(&counter))?;
        let hb = hub.heartbeat_dir().join(crate::heartbeat::GLOBAL_FILE);
        HeartbeatConfig::default()
            .save(&hb)
            .map_err(|e| HubError::Io { path: hb.clone(), source: io::Error::other(e.to_string()) })?;
        Ok(hub)
    }

    pub fn open(root: &Path) -> Result<Hub, HubError> {
        let root = std::path::absolute(root).map_err(io_err(root))?;
        if !root.join("public").join("attempts").is_dir() {
            return Err(HubError::Missing(root));
        }
        Ok(Hub { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    /// The run directory that holds this hub.
    pub fn run_dir(&self) -> PathBuf {
        self.root.parent().map(Path::to_path_buf).unwrap_or_else(|| self.root.clone())
    }
    pub fn public_dir(&self) -> PathBuf {
        self.root.join("public")
    }
    pub fn private_dir(&self) -> PathBuf {
        self.root.join("private")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.private_dir().join("eval")
    }
    pub fn attempts_dir(&self) -> PathBuf {
        self.public_dir().join("attempts")
    }
    pub fn notes_dir(&self) -> PathBuf {
        self.public_dir().join("notes")
    }
    pub fn skills_dir(&self) -> PathBuf {
        self.public_dir().join("skills")
    }
    pub fn heartbeat_dir(&self) -> PathBuf {
        self.public_dir().join("heartbeat")
    }
    pub fn sessions_path(&self) -> PathBuf {
        self.public_dir().join("sessions.json")
    }
    pub fn eval_count_path(&self) -> PathBuf {
        self.public_dir().join("eval_count")
    }
    pub fn manager_pid_path(&self) -> PathBuf {
        self.public_dir().join("manager.pid")
    }
    pub fn agent_pids_path(&self) -> PathBuf {
        self.public_dir().join("agent.pids")
    }
    /// Resolved task config of the run.
    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.yaml")
    }
    /// Commit every agent branch starts from.
    pub fn base_commit_path(&self) -> PathBuf {
        self.root.join("base_commit")
    }
    fn tmp_dir(&self) -> PathBuf {
        self.root.join("tmp")
    }
    fn lock_path(&self) -> PathBuf {
        self.root.join("eval_count.lock")
    }

    pub fn attempt_path(&self, hash: &str) -> PathBuf {
        self.attempts_dir().join(format!("{hash}.json"))
    }

    /// Write `attempts/<hash>.json`. Fails without touching the existing file on a duplicate hash.
    pub fn record_attempt(&self, attempt: &Attempt) -> Result<PathBuf, HubError> {
        let target = self.attempt_path(&attempt.commit_hash);
        let tmp_dir = self.tmp_dir();
        fs::create_dir_all(&tmp_dir).map_err(io_err(&tmp_dir))?;
        let mut tmp = tempfile::Builder::new().prefix("attempt-").tempfile_in(&tmp_dir).map_err(io_err(&tmp_dir))?;
        tmp.write_all(encode_attempt(attempt).as_bytes()).map_err(io_err(tmp.path()))?;
        tmp.as_file().sync_all().map_err(io_err(tmp.path()))?;
        match fs::hard_link(tmp.path(), &target) {
            Ok(()) => Ok(target),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(HubError::DuplicateAttempt(attempt.commit_hash.clone()))
            }
            Err(e) => Err(HubError::Io { path: target, source: e }),
        }
    }

    pub fn read_attempt_file(path: &Path) -> Result<Attempt, HubError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        decode_attempt(&text).map_err(|e| HubError::Malformed {
            what: "attempt",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Names (`<hash>.json`) currently in the attempts directory.
    pub fn attempt_files(&self) -> Result<Vec<PathBuf>, HubError> {
        let dir = self.attempts_dir();
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "json") {
                out.push(path);
            }
        }
        out.sort();
        Ok(out)
    }

    /// All readable attempts in chronological order. Unreadable files are skipped.
    pub fn attempts(&self) -> Result<Vec<Attempt>, HubError> {
        let mut out = Vec::new();
        for path in self.attempt_files()? {
            match Self::read_attempt_file(&path) {
                Ok(a) => out.push(a),
                Err(e) => tracing::warn!("skipping {}: {e}", path.display()),
            }
        }
        out.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.commit_hash.cmp(&b.commit_hash)));
        Ok(out)
    }

    /// Look up an attempt by full hash or unique prefix.
    pub fn find_attempt(&self, prefix: &str) -> Result<Attempt, HubError> {
        let exact = self.attempt_path(prefix);
        if exact.is_file() {
            return Self::read_attempt_file(&exact);
        }
        let matches: Vec<PathBuf> = self
            .attempt_files()?
            .into_iter()
            .filter(|p| p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| !prefix.is_empty() && s.starts_with(prefix)))
            .collect();
        match matches.as_slice() {
            [one] => Self::read_attempt_file(one),
            [] => Err(HubError::UnknownAttempt(prefix.to_string())),
            _ => Err(HubError::AmbiguousAttempt(prefix.to_string())),
        }
    }

    pub fn leaderboard(&self, direction: Direction, query: &LeaderboardQuery) -> Result<Vec<Attempt>, HubError> {
        Ok(rank_attempts(&self.attempts()?, direction, query))
    }

    /// Best graded score of one agent so far.
    pub fn agent_best(&self, agent_id: &str, direction: Direction) -> Result<Option<f64>, HubError> {
        Ok(self
            .attempts()?
            .iter()
            .filter(|a| a.agent_id == agent_id)
            .filter_map(|a| a.score)
            .filter(|s| s.is_finite())
            .min_by(|a, b| direction.cmp_best_first(*a, *b)))
    }

    pub fn eval_count(&self) -> Result<u64, HubError> {
        let path = self.eval_count_path();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        text.trim().parse().map_err(|_| HubError::CorruptCounter { path, content: text })
    }

    pub fn increment_eval_count(&self) -> Result<u64, HubError> {
        self.increment_eval_count_within(Duration::from_secs(30))
    }

    /// Advance the counter by one under an exclusive advisory lock; returns the new value.
    pub fn increment_eval_count_within(&self, timeout: Duration) -> Result<u64, HubError> {
        let lock_path = self.lock_path();
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        acquire(&lock, timeout)?;
        let result = (|| {
            let next = self.eval_count()? + 1;
            let path = self.eval_count_path();
            write_atomic(&path, format!("{next}\n").as_bytes()).map_err(io_err(&path))?;
            Ok(next)
        })();
        let _ = lock.unlock();
        result
    }

    /// Content digest over notes/ and skills/.
    ///
    /// The manifest is one `<sha256(content)>  <relative path>` line per
    /// regular file, sorted bytewise by path; the digest is the SHA-256 of
    /// that manifest.
    pub fn checkpoint_knowledge(&self) -> Result<KnowledgeCheckpoint, HubError> {
        let public = self.public_dir();
        let mut files = Vec::new();
        for top in ["notes", "skills"] {
            collect_files(&public, &public.join(top), &mut files)?;
        }
        files.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
        let mut manifest = String::new();
        for (rel, abs) in &files {
            let bytes = fs::read(abs).map_err(io_err(abs))?;
            manifest.push_str(&hex::encode(Sha256::digest(&bytes)));
            manifest.push_str("  ");
            manifest.push_str(rel);
            manifest.push('\n');
        }
        Ok(KnowledgeCheckpoint { digest: hex::encode(Sha256::digest(manifest.as_bytes())), file_count: files.len() })
    }

    pub fn save_sessions(&self, sessions: &BTreeMap<String, String>) -> Result<(), HubError> {
        let path = self.sessions_path();
        let text = serde_json::to_string_pretty(sessions).expect("string map serializes");
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
    }

    pub fn load_sessions(&self) -> Result<BTreeMap<String, String>, HubError> {
        let path = self.sessions_path();
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| HubError::Malformed {
                what: "sessions file",
                path,
                reason: e.to_string(),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(BTreeMap::new()),
            Err(e) => Err(HubError::Io { path, source: e }),
        }
    }

    pub fn write_manager_pid(&self, pid: u32) -> Result<(), HubError> {
        let path = self.manager_pid_path();
        write_atomic(&path, format!("{pid}\n").as_bytes()).map_err(io_err(&path))
    }

    pub fn read_manager_pid(&self) -> Option<u32> {
        fs::read_to_string(self.manager_pid_path()).ok()?.trim().parse().ok()
    }

    /// One pid per line, in agent order. `None` marks an agent with no live process.
    pub fn write_agent_pids(&self, pids: &[Option<u32>]) -> Result<(), HubError> {
        let path = self.agent_pids_path();
        let text: String = pids.iter().map(|p| format!("{}\n", p.unwrap_or(0))).collect();
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
    }

    pub fn read_agent_pids(&self) -> Vec<u32> {
        fs::read_to_string(self.agent_pids_path())
            .map(|t| t.lines().filter_map(|l| l.trim().parse().ok()).collect())
            .unwrap_or_default()
    }

    pub fn remove_pid_files(&self) {
        let _ = fs::remove_file(self.manager_pid_path());
        let _ = fs::remove_file(self.agent_pids_path());
    }
}

fn acquire(lock: &File, timeout: Duration) -> Result<(), HubError> {
    let deadline = Instant::now() + timeout;
    let mut backoff = Duration::from_millis(1);
    loop {
        match lock.try_lock() {
            Ok(()) => return Ok(()),
            Err(fs::TryLockError::WouldBlock) => {}
            Err(fs::TryLockError::Error(e)) => {
                return Err(HubError::Io { path: PathBuf::from("eval_count.lock"), source: e })
            }
        }
        if Instant::now() >= deadline {
            return Err(HubError::LockTimeout(timeout));
        }
        std::thread::sleep(backoff);
        backoff = (backoff * 2).min(Duration::from_millis(20));
    }
}

fn collect_files(base: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<(), HubError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(HubError::Io { path: dir.to_path_buf(), source: e }),
    };
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let ft = entry.file_type().map_err(io_err(&path))?;
        if ft.is_dir() {
            collect_files(base, &path, out)?;
        } else if ft.is_file() {
            let rel = path.strip_prefix(base).unwrap_or(&path).to_string_lossy().into_owned();
            out.push((rel, path));
        }
    }
    Ok(())
}
