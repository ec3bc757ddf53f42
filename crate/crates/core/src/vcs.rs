//! Thin wrapper over the `git` executable. Every call names its worktree
//! explicitly; nothing depends on the current directory.

use std::ffi::OsStr;
use std::path::Path;
use std::process::{Command, Output};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VcsError {
    #[error("failed to run git: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("git {args} failed: {stderr}")]
    Git { args: String, stderr: String },
    #[error("commit message must not be empty")]
    EmptyMessage,
    #[error("cannot resolve `{0}` to a commit")]
    UnknownRef(String),
    #[error("nothing to revert: already at the run's base commit")]
    NothingToRevert,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitRef {
    pub hash: String,
}

impl CommitRef {
    pub fn short(&self) -> &str {
        &self.hash[..self.hash.len().min(7)]
    }
}

const IDENTITY: [&str; 6] =
    ["-c", "user.name=coral", "-c", "user.email=coral@localhost", "-c", "commit.gpgsign=false"];

fn command(dir: &Path) -> Command {
    let mut cmd = Command::new("git");
    cmd.arg("-C").arg(dir);
    for var in ["GIT_DIR", "GIT_WORK_TREE", "GIT_INDEX_FILE", "GIT_OBJECT_DIRECTORY", "GIT_PREFIX"] {
        cmd.env_remove(var);
    }
    cmd
}

fn check(args: &[&OsStr], out: Output) -> Result<String, VcsError> {
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(VcsError::Git {
            args: args.iter().map(|a| a.to_string_lossy()).collect::<Vec<_>>().join(" "),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        })
    }
}

/// Run `git -C dir <args>` and return stdout.
pub fn git<S: AsRef<OsStr>>(dir: &Path, args: &[S]) -> Result<String, VcsError> {
    let args: Vec<&OsStr> = args.iter().map(AsRef::as_ref).collect();
    let out = command(dir).args(&args).output()?;
    check(&args, out)
}

fn git_env<S: AsRef<OsStr>>(dir: &Path, args: &[S], env: &[(&str, &OsStr)]) -> Result<String, VcsError> {
    let args: Vec<&OsStr> = args.iter().map(AsRef::as_ref).collect();
    let mut cmd = command(dir);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.args(&args).output()?;
    check(&args, out)
}

pub fn init_repo(dir: &Path) -> Result<(), VcsError> {
    std::fs::create_dir_all(dir)?;
    git(dir, &["init", "-q"])?;
    Ok(())
}

pub fn clone_local(source: &Path, dest: &Path) -> Result<(), VcsError> {
    let parent = dest.parent().unwrap_or(Path::new("."));
    git(parent, &[OsStr::new("clone"), OsStr::new("-q"), OsStr::new("--no-hardlinks"), source.as_os_str(), dest.as_os_str()])?;
    Ok(())
}

pub fn head(worktree: &Path) -> Result<Option<CommitRef>, VcsError> {
    match git(worktree, &["rev-parse", "--verify", "-q", "HEAD"]) {
        Ok(out) => Ok(Some(CommitRef { hash: out.trim().to_string() })),
        Err(VcsError::Git { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Resolve any revision (full or abbreviated hash, branch) to a full commit hash.
pub fn resolve(worktree: &Path, rev: &str) -> Result<CommitRef, VcsError> {
    if rev.is_empty() || rev.starts_with('-') {
        return Err(VcsError::UnknownRef(rev.to_string()));
    }
    match git(worktree, &["rev-parse", "--verify", "-q", &format!("{rev}^{{commit}}")]) {
        Ok(out) => Ok(CommitRef { hash: out.trim().to_string() }),
        Err(VcsError::Git { .. }) => Err(VcsError::UnknownRef(rev.to_string())),
        Err(e) => Err(e),
    }
}

/// Stage everything and commit. An unchanged tree still yields a new (empty) commit.
pub fn commit_all(worktree: &Path, message: &str) -> Result<CommitRef, VcsError> {
    commit_all_as(worktree, message, "coral")
}

/// Like [`commit_all`], authored and committed as `author` (e.g. an agent id),
/// so identical edits by different agents still get distinct hashes.
pub fn commit_all_as(worktree: &Path, message: &str, author: &str) -> Result<CommitRef, VcsError> {
    if message.trim().is_empty() {
        return Err(VcsError::EmptyMessage);
    }
    git(worktree, &["add", "-A"])?;
    let name = format!("user.name={author}");
    let email = format!("user.email={author}@coral.localhost");
    let mut args: Vec<&str> = IDENTITY.to_vec();
    if author != "coral" {
        args.extend(["-c", &name, "-c", &email]);
    }
    args.extend(["commit", "-q", "--allow-empty", "--no-verify", "-m", message]);
    git(worktree, &args)?;
    head(worktree)?.ok_or_else(|| VcsError::UnknownRef("HEAD".into()))
}

/// Rewrite the message of HEAD (tree and parent unchanged), yielding a new hash.
pub fn amend_message(worktree: &Path, message: &str) -> Result<CommitRef, VcsError> {
    let mut args: Vec<&str> = IDENTITY.to_vec();
    args.extend(["commit", "-q", "--amend", "--allow-empty", "--no-verify", "--no-edit", "-m", message]);
    git(worktree, &args)?;
    head(worktree)?.ok_or_else(|| VcsError::UnknownRef("HEAD".into()))
}

/// Move the branch tip to `rev` and make the files match it exactly (ignored files are kept).
pub fn checkout(worktree: &Path, rev: &str) -> Result<CommitRef, VcsError> {
    let target = resolve(worktree, rev)?;
    git(worktree, &["reset", "-q", "--hard", &target.hash])?;
    git(worktree, &["clean", "-q", "-fd"])?;
    Ok(target)
}

/// Drop the last commit unless the branch is already at `base`.
pub fn revert_last(worktree: &Path, base: &str) -> Result<CommitRef, VcsError> {
    let current = head(worktree)?.ok_or(VcsError::NothingToRevert)?;
    if current.hash == base {
        return Err(VcsError::NothingToRevert);
    }
    let parent = resolve(worktree, &format!("{}~1", current.hash)).map_err(|_| VcsError::NothingToRevert)?;
    git(worktree, &["reset", "-q", "--hard", &parent.hash])?;
    git(worktree, &["clean", "-q", "-fd"])?;
    Ok(parent)
}

/// Unified diff of staged, unstaged and untracked changes against HEAD.
///
/// Staging happens in a scratch index so the worktree's real index is untouched.
pub fn diff_uncommitted(worktree: &Path) -> Result<String, VcsError> {
    let scratch = tempfile::tempdir()?;
    let index = scratch.path().join("index");
    let env = [("GIT_INDEX_FILE", index.as_os_str())];
    let has_head = head(worktree)?.is_some();
    if has_head {
        git_env(worktree, &["read-tree", "HEAD"], &env)?;
    }
    git_env(worktree, &["add", "-A"], &env)?;
    if has_head {
        git_env(worktree, &["diff", "--cached", "--no-color", "HEAD"], &env)
    } else {
        git_env(worktree, &["diff", "--cached", "--no-color", "--root"], &env)
    }
}

/// Diff between two commits; with no `from`, the full patch introduced by `to`.
pub fn diff_between(worktree: &Path, from: Option<&str>, to: &str) -> Result<String, VcsError> {
    match from {
        Some(from) => git(worktree, &["diff", "--no-color", from, to]),
        None => git(worktree, &["show", "--no-color", "--format=", to]),
    }
}

/// Paths tracked at HEAD.
pub fn tracked_files(worktree: &Path) -> Result<Vec<String>, VcsError> {
    Ok(git(worktree, &["ls-files"])?.lines().map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn repo() -> (tempfile::TempDir, std::path::PathBuf) {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("r");
        init_repo(&dir).unwrap();
        fs::write(dir.join("a.txt"), "one\n").unwrap();
        commit_all(&dir, "base").unwrap();
        (tmp, dir)
    }

    #[test]
    fn commit_cleans_worktree() {
        let (_t, dir) = repo();
        fs::write(dir.join("a.txt"), "two\n").unwrap();
        let c = commit_all(&dir, "try idea").unwrap();
        assert_eq!(c.hash.len(), 40);
        assert!(c.hash.starts_with(c.short()));
        assert_eq!(diff_uncommitted(&dir).unwrap(), "");
    }

    #[test]
    fn empty_commits_get_distinct_hashes() {
        let (_t, dir) = repo();
        let a = commit_all(&dir, "rerun").unwrap();
        let b = commit_all(&dir, "rerun").unwrap();
        assert_ne!(a, b);
        assert_eq!(resolve(&dir, &format!("{}~1", b.hash)).unwrap(), a);
    }

    #[test]
    fn authors_separate_identical_commits() {
        let tmp = tempfile::tempdir().unwrap();
        let mut hashes = Vec::new();
        for who in ["agent-1", "agent-2"] {
            let dir = tmp.path().join(who);
            init_repo(&dir).unwrap();
            fs::write(dir.join("a.txt"), "same\n").unwrap();
            hashes.push(commit_all_as(&dir, "same", who).unwrap());
        }
        assert_ne!(hashes[0], hashes[1]);
        let dir = tmp.path().join("agent-1");
        let amended = amend_message(&dir, "same\n\nnonce").unwrap();
        assert_ne!(amended, hashes[0]);
        assert_eq!(head(&dir).unwrap().unwrap(), amended);
    }

    #[test]
    fn empty_message_rejected() {
        let (_t, dir) = repo();
        assert!(matches!(commit_all(&dir, "  "), Err(VcsError::EmptyMessage)));
    }

    #[test]
    fn checkout_restores_and_sets_parent() {
        let (_t, dir) = repo();
        let a = head(&dir).unwrap().unwrap();
        fs::write(dir.join("a.txt"), "two\n").unwrap();
        fs::write(dir.join("new.txt"), "n\n").unwrap();
        commit_all(&dir, "b").unwrap();
        fs::write(dir.join("junk.txt"), "j\n").unwrap();
        checkout(&dir, &a.hash[..8]).unwrap();
        assert_eq!(fs::read_to_string(dir.join("a.txt")).unwrap(), "one\n");
        assert!(!dir.join("new.txt").exists());
        assert!(!dir.join("junk.txt").exists());
        assert_eq!(diff_uncommitted(&dir).unwrap(), "");
        let c = commit_all(&dir, "c").unwrap();
        assert_eq!(resolve(&dir, &format!("{}~1", c.hash)).unwrap(), a);
    }

    #[test]
    fn checkout_unknown_ref_fails() {
        let (_t, dir) = repo();
        assert!(matches!(checkout(&dir, "deadbeef"), Err(VcsError::UnknownRef(_))));
        assert!(matches!(checkout(&dir, "--hard"), Err(VcsError::UnknownRef(_))));
    }

    #[test]
    fn revert_last_stops_at_base() {
        let (_t, dir) = repo();
        let base = head(&dir).unwrap().unwrap();
        fs::write(dir.join("a.txt"), "A\n").unwrap();
        let a = commit_all(&dir, "A").unwrap();
        fs::write(dir.join("a.txt"), "B\n").unwrap();
        commit_all(&dir, "B").unwrap();
        assert_eq!(revert_last(&dir, &base.hash).unwrap(), a);
        assert_eq!(fs::read_to_string(dir.join("a.txt")).unwrap(), "A\n");
        assert_eq!(revert_last(&dir, &base.hash).unwrap(), base);
        assert!(matches!(revert_last(&dir, &base.hash), Err(VcsError::NothingToRevert)));
        let c = commit_all(&dir, "C").unwrap();
        let log = git(&dir, &["log", "--format=%H %P", "-1", &c.hash]).unwrap();
        assert_eq!(log.split_whitespace().nth(1), Some(base.hash.as_str()));
    }

    #[test]
    fn diff_shows_edits_and_untracked_files() {
        let (_t, dir) = repo();
        assert_eq!(diff_uncommitted(&dir).unwrap(), "");
        fs::write(dir.join("a.txt"), "changed\n").unwrap();
        fs::write(dir.join("fresh.txt"), "brand new\n").unwrap();
        let diff = diff_uncommitted(&dir).unwrap();
        assert!(diff.contains("-one"));
        assert!(diff.contains("+changed"));
        assert!(diff.contains("+brand new"));
        let status = git(&dir, &["status", "--porcelain"]).unwrap();
        assert!(status.contains("?? fresh.txt"));
        for line in status.lines() {
            let path = line[3..].trim();
            assert!(diff.contains(path), "{path} missing from diff");
        }
        // real index untouched: fresh.txt is still untracked
        assert!(git(&dir, &["status", "--porcelain"]).unwrap().contains("?? fresh.txt"));
    }
}
