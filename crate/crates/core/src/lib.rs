//! Multi-agent evolution infrastructure: a shared hub on disk, isolated git
//! worktrees per agent, a sandboxed grading pipeline, heartbeat interventions,
//! and a supervisor that keeps agents alive.

pub mod config;
pub mod evalpipe;
pub mod heartbeat;
pub mod hub;
pub mod manager;
pub mod model;
pub mod process;
pub mod runtime;
pub mod scaffold;
pub mod templates;
pub mod vcs;
pub mod workspace;

pub use config::{ConfigError, TaskConfig};
pub use evalpipe::{host_grader, run_eval, validate_task, EvalError, EvalReport, GraderInvocation, ValidationReport};
pub use heartbeat::{due_actions, render_heartbeat, ConfigScope, HeartbeatConfig, HeartbeatError, HeartbeatStore};
pub use hub::{Hub, HubError, KnowledgeCheckpoint, LeaderboardQuery};
pub use manager::{Manager, ManagerError, StatusReport, StopReport};
pub use model::{
    aggregate_score, decode_attempt, determine_status, encode_attempt, is_better, ActionScope, AgentState, Attempt,
    AttemptStatus, Direction, GraderOutcome, HeartbeatAction, ModelError, Score, ScoreBundle, TriggerKind,
};
pub use runtime::{adapter_for, RuntimeAdapter, RuntimeError, SpawnContext};
pub use workspace::{RunLayout, WorkspaceError};
