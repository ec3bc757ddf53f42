//! `notes` and `skills`: thin views over the shared knowledge directories.

use std::fs;
use std::path::{Component, Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};

use crate::context::Ctx;
use crate::{print_json, Format, NotesCmd, SkillsCmd};

fn files_under(root: &Path) -> Vec<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.is_file() {
                if let Ok(rel) = p.strip_prefix(root) {
                    out.push(rel.to_string_lossy().into_owned());
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Join a user-supplied relative name onto `root`, refusing anything that escapes it.
fn inside(root: &Path, name: &str) -> Result<PathBuf> {
    let rel = Path::new(name);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        bail!("`{name}` must be a plain relative path");
    }
    Ok(root.join(rel))
}

fn shared_dir(ctx: &Ctx, kind: &str) -> Result<PathBuf> {
    let sharing = &ctx.config().sharing;
    let enabled = match kind {
        "notes" => sharing.notes,
        _ => sharing.skills,
    };
    if ctx.agent_id().is_some() && !enabled {
        bail!("{kind} are not shared in this run");
    }
    Ok(ctx.hub().public_dir().join(kind))
}

pub fn notes(ctx: &Ctx, cmd: NotesCmd, fmt: Format) -> Result<ExitCode> {
    let root = shared_dir(ctx, "notes")?;
    match cmd {
        NotesCmd::List => {
            let files = files_under(&root);
            match fmt {
                Format::Json => print_json(&files)?,
                Format::Text if files.is_empty() => println!("no notes yet"),
                Format::Text => files.iter().for_each(|f| println!("{f}")),
            }
        }
        NotesCmd::Search { query } => {
            let needle = query.to_lowercase();
            let mut hits = Vec::new();
            for f in files_under(&root) {
                let text = fs::read_to_string(root.join(&f)).unwrap_or_default();
                if f.to_lowercase().contains(&needle) {
                    hits.push(serde_json::json!({"file": f, "line": null, "text": null}));
                }
                for (i, line) in text.lines().enumerate() {
                    if line.to_lowercase().contains(&needle) {
                        hits.push(serde_json::json!({"file": f, "line": i + 1, "text": line}));
                    }
                }
            }
            match fmt {
                Format::Json => print_json(&hits)?,
                Format::Text => {
                    for h in &hits {
                        match h["line"].as_u64() {
                            Some(n) => println!("{}:{}: {}", h["file"].as_str().unwrap_or(""), n, h["text"].as_str().unwrap_or("")),
                            None => println!("{}", h["file"].as_str().unwrap_or("")),
                        }
                    }
                }
            }
        }
        NotesCmd::Read { name } => {
            let path = inside(&root, &name)?;
            let text = fs::read_to_string(&path).with_context(|| format!("no note `{name}`"))?;
            print!("{text}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn skills(ctx: &Ctx, cmd: SkillsCmd, fmt: Format) -> Result<ExitCode> {
    let root = shared_dir(ctx, "skills")?;
    match cmd {
        SkillsCmd::List => {
            let mut names: Vec<String> = fs::read_dir(&root)
                .map(|it| it.flatten().map(|e| e.file_name().to_string_lossy().into_owned()).collect())
                .unwrap_or_default();
            names.sort();
            match fmt {
                Format::Json => print_json(&names)?,
                Format::Text if names.is_empty() => println!("no skills yet"),
                Format::Text => names.iter().for_each(|n| println!("{n}")),
            }
        }
        SkillsCmd::Read { name } => {
            let path = inside(&root, &name)?;
            let file = if path.is_dir() { path.join("SKILL.md") } else { path };
            let text = fs::read_to_string(&file).map_err(|_| anyhow!("no skill `{name}`"))?;
            print!("{text}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
