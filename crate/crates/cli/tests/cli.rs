mod common;

use std::fs;
use std::process::Command;
use std::time::Duration;

use common::*;

#[test]
fn init_then_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&coral(tmp.path(), &["init", "mytask"]));
    assert!(out.contains("task.yaml"));
    let task = tmp.path().join("mytask");
    assert!(task.join("eval/grader.sh").exists());
    assert!(task.join("seed").is_dir());

    // the stub grader refuses to grade
    let stderr = err(&coral(tmp.path(), &["validate", "mytask/task.yaml"]));
    assert!(stderr.is_empty() || !stderr.contains("panicked"));
    let report = coral(tmp.path(), &["--format", "json", "validate", "mytask/task.yaml"]);
    let v: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert_eq!(v["outcome"], "crashed");
    assert!(v["feedback"].as_str().unwrap().contains("grader not implemented"));

    fs::write(task.join("eval/grader.sh"), "#!/bin/sh\necho 1.0\n").unwrap();
    let v = json(&coral(tmp.path(), &["--format", "json", "validate", "mytask/task.yaml"]));
    assert_eq!(v["outcome"], "graded");
    assert_eq!(v["score"], 1.0);
    assert!(ok(&coral(tmp.path(), &["validate", "mytask/task.yaml"])).to_lowercase().contains("1"));

    // init refuses to clobber
    err(&coral(tmp.path(), &["init", "mytask"]));
}

#[test]
fn config_errors_are_reported() {
    let t = Task::new("maximize", "1", "");
    let cfg = t.yaml();
    let e = err(&coral(&t.dir, &["start", "-c", cfg.to_str().unwrap(), "grader.bogus=1"]));
    assert!(e.contains("bogus"), "{e}");
    let e = err(&coral(&t.dir, &["start", "-c", cfg.to_str().unwrap(), "agents.runtime=nope"]));
    assert!(e.contains("nope") && e.contains("scripted"), "{e}");
    // nothing was created for a run that never started
    assert!(!t.dir.join("results").exists() || fs::read_dir(t.dir.join("results/kernel-builder")).map(|d| d.count() == 0).unwrap_or(true));
    let e = err(&coral(&t.dir, &["start", "-c", cfg.to_str().unwrap(), "agents.runtime=scripted"]));
    assert!(e.contains("agents.script"), "{e}");
}

#[test]
fn unknown_command_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = coral(tmp.path(), &["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn eval_outside_worktree_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let e = err(&coral(tmp.path(), &["eval", "-m", "x"]));
    assert!(e.contains("not inside an agent worktree"), "{e}");
}

#[test]
fn eval_text_and_json() {
    let t = Task::new("minimize", "1350", "");
    let layout = t.create_run(&[]);
    let wt = layout.agent_dir("agent-1");
    let text = ok(&coral(&wt, &["eval", "-m", "seed"]));
    assert!(text.contains("Status: improved"), "{text}");
    assert!(text.contains("Score: 1350 (your previous best: none yet)"), "{text}");
    assert!(text.contains("Eval count: 1"));

    write_solution(&wt, "1274");
    let v = eval(&wt, "Pre-compute idx=2*idx+1 before hash");
    assert_eq!(v["status"], "improved");
    assert_eq!(v["score"], 1274.0);
    assert_eq!(v["previous_best"], 1350.0);
    assert_eq!(v["eval_count"], 2);
    assert_eq!(v["commit_hash"].as_str().unwrap().len(), 40);

    // evaluating from a subdirectory finds the worktree
    fs::create_dir_all(wt.join("src/deep")).unwrap();
    assert_eq!(eval(&wt.join("src/deep"), "again")["status"], "baseline");
}

#[test]
fn log_show_diff_and_revert() {
    let t = Task::new("maximize", "1", "");
    let layout = t.create_run(&["agents.count=2"]);
    let (a1, a2) = (layout.agent_dir("agent-1"), layout.agent_dir("agent-2"));
    eval(&a1, "seed");
    write_solution(&a1, "5");
    let best = eval(&a1, "five");
    write_solution(&a2, "3");
    eval(&a2, "three");

    let rows = json(&coral(&a2, &["--format", "json", "log"]));
    let scores: Vec<f64> = rows.as_array().unwrap().iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert_eq!(scores, [5.0, 3.0, 1.0]);
    let text = ok(&coral(&a2, &["log", "-n", "1"]));
    assert!(text.contains("five") && !text.contains("three"));
    let mine = json(&coral(&a2, &["--format", "json", "log", "--agent", "agent-2"]));
    assert_eq!(mine.as_array().unwrap().len(), 1);
    let found = json(&coral(&a2, &["--format", "json", "log", "--search", "FIVE"]));
    assert_eq!(found.as_array().unwrap().len(), 1);
    let recent = json(&coral(&a2, &["--format", "json", "log", "--recent"]));
    assert_eq!(recent[0]["title"], "three");

    let hash = best["commit_hash"].as_str().unwrap();
    let shown = json(&coral(&a2, &["--format", "json", "show", &hash[..8], "--diff"]));
    let parent = shown["parent_hash"].as_str().unwrap();
    let git = Command::new("git").args(["diff", parent, hash]).current_dir(&layout.repo).output().unwrap();
    assert_eq!(shown["diff"].as_str().unwrap(), String::from_utf8(git.stdout).unwrap());
    assert!(ok(&coral(&a2, &["show", hash])).contains("Agent:     agent-1"));

    // diff shows pending edits; revert drops the last commit
    write_solution(&a1, "9");
    assert!(ok(&coral(&a1, &["diff"])).contains("+9"));
    ok(&coral(&a1, &["revert"]));
    assert_eq!(fs::read_to_string(a1.join("solution.txt")).unwrap(), "1");
    // never past the base commit
    ok(&coral(&a1, &["revert"]));
    err(&coral(&a1, &["revert"]));

    // the operator sees the same leaderboard via --run
    let op = json(&coral(&t.dir, &["--format", "json", "log", "--run", layout.run_dir.to_str().unwrap()]));
    assert_eq!(op.as_array().unwrap().len(), 3);
}

#[test]
fn checkout_sets_the_next_parent() {
    let t = Task::new("maximize", "1", "");
    let layout = t.create_run(&["agents.count=2"]);
    let (a1, a2) = (layout.agent_dir("agent-1"), layout.agent_dir("agent-2"));
    write_solution(&a1, "8");
    let best = eval(&a1, "eight");
    let hash = best["commit_hash"].as_str().unwrap();
    ok(&coral(&a2, &["checkout", &hash[..10]]));
    assert_eq!(fs::read_to_string(a2.join("solution.txt")).unwrap(), "8");
    write_solution(&a2, "9");
    let next = eval(&a2, "nine");
    let shown = json(&coral(&a2, &["--format", "json", "show", next["commit_hash"].as_str().unwrap()]));
    assert_eq!(shown["parent_hash"], hash);
}

#[test]
fn attempts_sharing_off_filters_other_agents() {
    let t = Task::new("maximize", "1", "sharing:\n  attempts: false\n");
    let layout = t.create_run(&["agents.count=2"]);
    let (a1, a2) = (layout.agent_dir("agent-1"), layout.agent_dir("agent-2"));
    let theirs = eval(&a1, "one");
    eval(&a2, "two");
    let rows = json(&coral(&a2, &["--format", "json", "log"]));
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["agent_id"], "agent-2");
    err(&coral(&a2, &["show", theirs["commit_hash"].as_str().unwrap()]));
    let op = json(&coral(&t.dir, &["--format", "json", "log", "--run", layout.run_dir.to_str().unwrap()]));
    assert_eq!(op.as_array().unwrap().len(), 2);
}

#[test]
fn private_feedback_is_redacted_for_agents() {
    let t = Task::new("maximize", "secret", "");
    let layout = t.create_run(&[]);
    let wt = layout.agent_dir("agent-1");
    let v = eval(&wt, "x");
    assert!(!v.to_string().contains(SECRET));
    let hash = v["commit_hash"].as_str().unwrap();
    assert!(!ok(&coral(&wt, &["show", hash])).contains(SECRET));
    assert!(!ok(&coral(&wt, &["--format", "json", "log"])).contains(SECRET));
    let run = layout.run_dir.to_str().unwrap();
    assert!(ok(&coral(&t.dir, &["show", hash, "--run", run])).contains(SECRET));
}

#[test]
fn notes_and_skills() {
    let t = Task::new("maximize", "1", "");
    let layout = t.create_run(&[]);
    let wt = layout.agent_dir("agent-1");
    assert!(ok(&coral(&wt, &["notes"])).contains("no notes yet"));
    fs::create_dir_all(wt.join(".coral/notes/_synthesis")).unwrap();
    fs::write(wt.join(".coral/notes/hash.md"), "Pre-compute IDX early\nother\n").unwrap();
    fs::write(wt.join(".coral/notes/_synthesis/vliw.md"), "pack idx loads\n").unwrap();
    let hits = json(&coral(&wt, &["--format", "json", "notes", "search", "idx"]));
    assert_eq!(hits.as_array().unwrap().len(), 2);
    assert_eq!(ok(&coral(&wt, &["notes", "list"])).lines().count(), 2);
    assert_eq!(ok(&coral(&wt, &["notes", "read", "hash.md"])), "Pre-compute IDX early\nother\n");
    err(&coral(&wt, &["notes", "read", "../config.yaml"]));

    fs::create_dir_all(wt.join(".coral/skills/profile")).unwrap();
    fs::write(wt.join(".coral/skills/profile/SKILL.md"), "# profile\n").unwrap();
    assert_eq!(ok(&coral(&wt, &["skills"])).trim(), "profile");
    assert_eq!(ok(&coral(&wt, &["skills", "read", "profile"])), "# profile\n");
}

#[test]
fn heartbeat_commands() {
    let t = Task::new("maximize", "1", "");
    let layout = t.create_run(&["agents.count=2"]);
    let wt = layout.agent_dir("agent-1");
    let names = |v: &serde_json::Value| v.as_array().unwrap().iter().map(|a| a["name"].as_str().unwrap().to_string()).collect::<Vec<_>>();
    let view = json(&coral(&wt, &["--format", "json", "heartbeat"]));
    assert_eq!(names(&view), ["reflect", "consolidate", "pivot"]);

    let e = err(&coral(&wt, &["heartbeat", "remove", "reflect"]));
    assert!(e.contains("reflect"), "{e}");
    let view = json(&coral(&wt, &["--format", "json", "heartbeat", "set", "pivot", "--every", "3", "--trigger", "plateau"]));
    assert_eq!(view[2]["every"], 3);
    let view = json(&coral(&wt, &["--format", "json", "heartbeat", "remove", "pivot"]));
    assert_eq!(names(&view), ["reflect", "consolidate"]);

    // agent-2 is unaffected by agent-1's overlay
    let other = json(&coral(&layout.agent_dir("agent-2"), &["--format", "json", "heartbeat"]));
    assert_eq!(other[2]["every"], 5);

    let run = layout.run_dir.to_str().unwrap();
    let g = json(&coral(&t.dir, &["--format", "json", "heartbeat", "--run", run, "set", "consolidate", "--every", "20", "--scope", "global"]));
    assert_eq!(g[1]["every"], 20);
    let a2 = json(&coral(&t.dir, &["--format", "json", "heartbeat", "--run", run, "--agent", "agent-2"]));
    assert_eq!(a2[1]["every"], 20);
    let reset = json(&coral(&wt, &["--format", "json", "heartbeat", "reset"]));
    assert_eq!(names(&reset), ["reflect", "consolidate", "pivot"]);
    err(&coral(&wt, &["heartbeat", "--agent", "agent-2"]));
}

#[test]
fn runs_status_and_ui() {
    let t = Task::new("maximize", "1", "");
    let layout = t.create_run(&["agents.count=2"]);
    eval(&layout.agent_dir("agent-1"), "seed");
    let runs = json(&coral(&t.dir, &["--format", "json", "runs", "--results", "results"]));
    assert_eq!(runs.as_array().unwrap().len(), 1);
    assert_eq!(runs[0]["attempts"], 1);
    assert_eq!(runs[0]["live"], false);

    // a live process for agent-1, nothing for agent-2
    let mut sleeper = Command::new("sleep").arg("30").spawn().unwrap();
    layout.hub.write_agent_pids(&[Some(sleeper.id()), None]).unwrap();
    let run = layout.run_dir.to_str().unwrap();
    let st = json(&coral(&t.dir, &["--format", "json", "status", "--run", run]));
    assert_eq!(st["agents"][0]["alive"], true);
    assert_eq!(st["agents"][1]["alive"], false);
    assert_eq!(st["eval_count"], 1);
    sleeper.kill().unwrap();
    sleeper.wait().unwrap();
    let st = json(&coral(&t.dir, &["--format", "json", "status", "--run", run]));
    assert_eq!(st["agents"][0]["alive"], false);
    assert!(ok(&coral(&t.dir, &["status", "--run", run])).contains("agent-1"));
    // status resolves the run from the task config too
    ok(&coral(&t.dir, &["status", "-c", "task.yaml"]));

    let out = Command::new(bin()).args(["ui", "--run", run]).env("PATH", "/nonexistent").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not installed"));
}

#[test]
fn start_and_stop_with_scripted_agents() {
    let t = Task::new("maximize", "1", "run:\n  poll_interval: 0.1\n  stage_timeout: 2\n");
    let prog = t.program("program:\n  steps:\n    - write_file: {path: solution.txt, content: \"{iter}\"}\n    - invoke_cli: [eval, -m, \"try {iter}\"]\n  repeat: 2\n");
    let mut s = start(&t, &["agents.count=2", "agents.runtime=scripted", &format!("agents.script={}", prog.display())]);
    let layout = s.layout();
    assert!(wait_until(Duration::from_secs(20), || layout.hub.eval_count().unwrap_or(0) >= 4));
    let st = json(&coral(&t.dir, &["--format", "json", "status", "--run", s.run_dir.to_str().unwrap()]));
    assert_eq!(st["manager_alive"], true);
    let rep = json(&coral(&t.dir, &["--format", "json", "stop", "--run", s.run_dir.to_str().unwrap()]));
    assert_eq!(rep["manager_signalled"], true);
    assert!(s.wait(Duration::from_secs(10)));
    assert!(!layout.hub.manager_pid_path().exists());
    let sessions = layout.hub.load_sessions().unwrap();
    assert_eq!(sessions.len(), 2);
    let again = ok(&coral(&t.dir, &["stop", "--run", s.run_dir.to_str().unwrap()]));
    assert!(again.contains("no live processes"));
}
