mod context;
mod knowledge;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use coral_core::heartbeat::ConfigScope;
use coral_core::runtime::scripted::{self, AgentArgs};
use coral_core::{manager, vcs, workspace, ActionScope, HeartbeatAction, LeaderboardQuery, Manager, TaskConfig, TriggerKind};

use context::Ctx;

#[derive(Parser)]
#[command(name = "coral", version, about = "Run and steer a population of coding agents against a graded task")]
struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Commit the worktree, grade it, and record the attempt.
    Eval {
        #[arg(short, long)]
        message: String,
    },
    /// Show uncommitted changes.
    Diff,
    /// Drop the last commit (never past the run's base).
    Revert,
    /// Reset the worktree to an attempt; the next eval uses it as parent.
    Checkout { hash: String },
    /// Leaderboard (best first) or recent attempts.
    Log {
        #[arg(short = 'n', long = "limit", default_value_t = 20)]
        n: usize,
        #[arg(long)]
        recent: bool,
        #[arg(long)]
        agent: Option<String>,
        #[arg(long)]
        search: Option<String>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Details of one attempt.
    Show {
        hash: String,
        #[arg(long)]
        diff: bool,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Shared notes.
    Notes {
        #[command(subcommand)]
        action: Option<NotesCmd>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Shared skills.
    Skills {
        #[command(subcommand)]
        action: Option<SkillsCmd>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// List runs under a results directory.
    Runs {
        #[arg(long, default_value = "results")]
        results: PathBuf,
    },
    /// Create a run and supervise its agents (foreground).
    Start {
        #[arg(short, long)]
        config: PathBuf,
        /// Dotted `key=value` config overrides.
        overrides: Vec<String>,
    },
    /// Continue a stopped run.
    Resume {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
    /// Stop a run: interrupt, terminate, then kill its agents.
    Stop {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
    /// Agent health and leaderboard.
    Status {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
    /// View or change heartbeat actions.
    Heartbeat {
        #[command(subcommand)]
        action: Option<HeartbeatCmd>,
        /// Operate on a run's configs instead of the current agent's.
        #[arg(long)]
        run: Option<PathBuf>,
        /// With --run: target one agent's config instead of the global one.
        #[arg(long)]
        agent: Option<String>,
    },
    /// Scaffold a task directory.
    Init { path: PathBuf },
    /// Grade the seed code once without starting agents.
    Validate { path: PathBuf },
    /// Launch the web dashboard for a run.
    Ui {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 8420)]
        port: u16,
    },
    #[command(name = "__scripted-agent", hide = true)]
    ScriptedAgent {
        #[arg(long)]
        worktree: PathBuf,
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        agent_id: String,
        #[arg(long, default_value_t = 200)]
        max_turns: u32,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long)]
        session: Option<String>,
    },
}

#[derive(Subcommand)]
enum NotesCmd {
    List,
    Search { query: String },
    Read { name: String },
}

#[derive(Subcommand)]
enum SkillsCmd {
    List,
    Read { name: String },
}

#[derive(Subcommand)]
enum HeartbeatCmd {
    /// Add or replace an action.
    Set {
        name: String,
        #[arg(long)]
        every: u64,
        #[arg(long, default_value = "interval")]
        trigger: TriggerKind,
        #[arg(long, default_value = "local")]
        scope: ActionScope,
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Remove an action (reflect and consolidate are protected).
    Remove { name: String },
    /// Back to the default actions.
    Reset,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Cmd::Start { .. } | Cmd::Resume { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn exe() -> Result<PathBuf> {
    std::env::current_exe().context("cannot locate the coral executable")
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let fmt = cli.format;
    match cli.command {
        Cmd::Eval { message } => cmd_eval(&message, fmt),
        Cmd::Diff => {
            let ctx = context::agent()?;
            let Ctx::Agent { worktree, .. } = &ctx else { unreachable!() };
            print!("{}", vcs::diff_uncommitted(worktree)?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Revert => {
            let ctx = context::agent()?;
            let Ctx::Agent { worktree, layout, .. } = &ctx else { unreachable!() };
            let now = vcs::revert_last(worktree, &layout.base_commit()?)?;
            println!("HEAD is now at {}", now.short());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Checkout { hash } => {
            let ctx = context::agent()?;
            let Ctx::Agent { worktree, .. } = &ctx else { unreachable!() };
            let rev = ctx.hub().find_attempt(&hash).map(|a| a.commit_hash).unwrap_or(hash);
            let now = vcs::checkout(worktree, &rev)?;
            println!("HEAD is now at {}; the next eval will use it as parent", now.short());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Log { n, recent, agent, search, run } => {
            let ctx = context::query(run.as_deref())?;
            let query = LeaderboardQuery { n, agent, search, recent };
            let rows: Vec<_> = coral_core::hub::rank_attempts(&ctx.visible_attempts()?, ctx.config().grader.direction, &query)
                .into_iter()
                .map(|a| ctx.redact(a))
                .collect();
            match fmt {
                Format::Json => print_json(&rows)?,
                Format::Text => print!("{}", render::leaderboard(&rows, recent)),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Show { hash, diff, run } => {
            let ctx = context::query(run.as_deref())?;
            let attempt = ctx.hub().find_attempt(&hash)?;
            if let Some(me) = ctx.agent_id() {
                if !ctx.config().sharing.attempts && attempt.agent_id != me {
                    bail!("no attempt matches `{hash}`");
                }
            }
            let attempt = ctx.redact(attempt);
            let patch = if diff {
                Some(vcs::diff_between(&ctx.layout().repo, attempt.parent_hash.as_deref(), &attempt.commit_hash)?)
            } else {
                None
            };
            match fmt {
                Format::Json => {
                    let mut v = serde_json::to_value(&attempt)?;
                    if let Some(p) = &patch {
                        v["diff"] = serde_json::Value::String(p.clone());
                    }
                    print_json(&v)?
                }
                Format::Text => {
                    print!("{}", render::attempt_detail(&attempt));
                    if let Some(p) = patch {
                        println!();
                        print!("{p}");
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Notes { action, run } => {
            let ctx = context::query(run.as_deref())?;
            knowledge::notes(&ctx, action.unwrap_or(NotesCmd::List), fmt)
        }
        Cmd::Skills { action, run } => {
            let ctx = context::query(run.as_deref())?;
            knowledge::skills(&ctx, action.unwrap_or(SkillsCmd::List), fmt)
        }
        Cmd::Runs { results } => {
            let runs = workspace::list_runs(&results);
            match fmt {
                Format::Json => print_json(&runs)?,
                Format::Text => print!("{}", render::runs(&runs)),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Start { config, overrides } => {
            let cfg = TaskConfig::load(&config, &overrides)?;
            let stop = shutdown_flag()?;
            let mut mgr = Manager::start(&cfg, &exe()?)?;
            println!("run dir: {}", mgr.run_dir().display());
            if cfg.run.ui {
                tracing::info!("run.ui is set; launch the dashboard with `coral ui --run {}`", mgr.run_dir().display());
            }
            mgr.run(&stop)?;
            println!("stopped");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Resume { run, config } => {
            let dir = context::run_dir(run.as_deref(), config.as_deref())?;
            let stop = shutdown_flag()?;
            let mut mgr = Manager::resume(&dir, &exe()?)?;
            println!("run dir: {}", mgr.run_dir().display());
            mgr.run(&stop)?;
            println!("stopped");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Stop { run, config } => {
            let dir = context::run_dir(run.as_deref(), config.as_deref())?;
            let layout = workspace::RunLayout::open(&dir)?;
            let stage = layout.config().map(|c| c.run.stage_timeout).unwrap_or(10.0);
            let report = manager::stop_run(&dir, Duration::from_secs_f64(stage))?;
            match fmt {
                Format::Json => print_json(&report)?,
                Format::Text if !report.manager_signalled && report.orphans_stopped == 0 => {
                    println!("no live processes for {}", dir.display())
                }
                Format::Text => println!("stopped {}", dir.display()),
            }
            if !report.survivors.is_empty() {
                eprintln!("processes still alive: {:?}", report.survivors);
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Status { run, config } => {
            let dir = context::run_dir(run.as_deref(), config.as_deref())?;
            let report = manager::status(&dir, 5)?;
            match fmt {
                Format::Json => print_json(&report)?,
                Format::Text => print!("{}", render::status(&report)),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Heartbeat { action, run, agent } => cmd_heartbeat(action, run.as_deref(), agent, fmt),
        Cmd::Init { path } => {
            let created = coral_core::scaffold::scaffold(&path)?;
            for p in created {
                println!("created {}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Validate { path } => {
            let report = match TaskConfig::load(&path, &[]) {
                Ok(cfg) => coral_core::validate_task(&cfg),
                Err(e) => coral_core::ValidationReport {
                    outcome: coral_core::evalpipe::ValidationOutcome::SetupError { error: e.to_string() },
                    elapsed_seconds: 0.0,
                },
            };
            match fmt {
                Format::Json => print_json(&report)?,
                Format::Text => print!("{}", render::validation(&report)),
            }
            Ok(if report.is_graded() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Ui { run, port } => cmd_ui(run.as_deref(), port),
        Cmd::ScriptedAgent { worktree, program, agent_id, max_turns, prompt, session } => {
            let code = scripted::run_agent(AgentArgs { worktree, program, agent_id, max_turns, session, prompt }, &exe()?)?;
            Ok(ExitCode::from(code as u8))
        }
    }
}

fn shutdown_flag() -> Result<Arc<AtomicBool>> {
    let flag = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        signal_hook::flag::register(sig, Arc::clone(&flag))?;
    }
    Ok(flag)
}

fn cmd_eval(message: &str, fmt: Format) -> Result<ExitCode> {
    let ctx = context::agent()?;
    let Ctx::Agent { worktree, agent_id, config, layout } = &ctx else { unreachable!() };
    let report = coral_core::run_eval(agent_id, worktree, message, config, &layout.hub)?;
    let attempt = ctx.redact(report.attempt.clone());
    match fmt {
        Format::Json => print_json(&serde_json::json!({
            "commit_hash": attempt.commit_hash,
            "status": attempt.status,
            "score": attempt.score,
            "previous_best": report.previous_best,
            "feedback": attempt.feedback,
            "eval_count": report.eval_count,
        }))?,
        Format::Text => print!("{}", render::eval_report(&attempt, report.previous_best, report.eval_count)),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_heartbeat(action: Option<HeartbeatCmd>, run: Option<&Path>, agent: Option<String>, fmt: Format) -> Result<ExitCode> {
    let (store, scope) = match run {
        Some(dir) => {
            let layout = workspace::RunLayout::open(dir)?;
            let scope = agent.map(ConfigScope::Agent).unwrap_or(ConfigScope::Global);
            (layout.heartbeat_store(), scope)
        }
        None => {
            if agent.is_some() {
                bail!("--agent requires --run; inside a worktree you can only change your own heartbeat");
            }
            let ctx = context::agent()?;
            let id = ctx.agent_id().expect("agent context").to_string();
            (ctx.layout().heartbeat_store(), ConfigScope::Agent(id))
        }
    };
    let view = match action {
        None => store.view(&scope)?,
        Some(HeartbeatCmd::Set { name, every, trigger, scope: action_scope, prompt }) => {
            let mut a = HeartbeatAction::new(name, every, trigger, action_scope);
            a.prompt = prompt;
            store.set(&scope, a)?
        }
        Some(HeartbeatCmd::Remove { name }) => store.remove(&scope, &name)?,
        Some(HeartbeatCmd::Reset) => store.reset(&scope)?,
    };
    match fmt {
        Format::Json => print_json(&view.actions)?,
        Format::Text => print!("{}", render::heartbeat(&view.actions)),
    }
    Ok(ExitCode::SUCCESS)
}

fn find_on_path(name: &str) -> Option<PathBuf> {
    std::env::var_os("PATH").and_then(|paths| std::env::split_paths(&paths).map(|d| d.join(name)).find(|p| p.is_file()))
}

fn cmd_ui(run: Option<&Path>, port: u16) -> Result<ExitCode> {
    let dir = context::run_dir(run, None)?;
    let Some(dashboard) = find_on_path("coral-dashboard") else {
        eprintln!("the dashboard is not installed (no `coral-dashboard` on PATH); `coral status` and `coral log --format json` expose the same data");
        return Ok(ExitCode::FAILURE);
    };
    let status = std::process::Command::new(dashboard)
        .arg("--run")
        .arg(&dir)
        .arg("--port")
        .arg(port.to_string())
        .status()?;
    Ok(if status.success() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
