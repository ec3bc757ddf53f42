//! Domain types shared across the crate: scores, attempts, agent counters,
//! heartbeat actions, plus the pure comparison and status rules.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, FixedOffset, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("cannot aggregate an empty score collection")]
    EmptyScores,
    #[error("total score weight must be positive (got {0})")]
    ZeroWeight(f64),
    #[error("score `{name}` has negative weight {weight}")]
    NegativeWeight { name: String, weight: f64 },
    #[error("score name must not be empty")]
    EmptyName,
    #[error("malformed attempt record: {0}")]
    Decode(String),
    #[error("invalid value `{value}` for {what}")]
    Parse { what: &'static str, value: String },
}

/// One named sub-score reported by a grader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub name: String,
    pub value: f64,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl Score {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), value, weight: 1.0 }
    }

    pub fn weighted(name: impl Into<String>, value: f64, weight: f64) -> Self {
        Self { name: name.into(), value, weight }
    }
}

/// Weighted average of the sub-scores: `Σ(value·weight) / Σ(weight)`.
pub fn aggregate_score(scores: &[Score]) -> Result<f64, ModelError> {
    if scores.is_empty() {
        return Err(ModelError::EmptyScores);
    }
    let mut total_weight = 0.0;
    let mut weighted_sum = 0.0;
    for s in scores {
        if s.name.is_empty() {
            return Err(ModelError::EmptyName);
        }
        if s.weight < 0.0 || s.weight.is_nan() {
            return Err(ModelError::NegativeWeight { name: s.name.clone(), weight: s.weight });
        }
        total_weight += s.weight;
        weighted_sum += s.value * s.weight;
    }
    if total_weight <= 0.0 {
        return Err(ModelError::ZeroWeight(total_weight));
    }
    Ok(weighted_sum / total_weight)
}

/// Structured grader result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreBundle {
    pub scores: Vec<Score>,
    pub aggregate: f64,
    pub feedback: String,
    pub is_public: bool,
}

impl ScoreBundle {
    pub fn new(scores: Vec<Score>, feedback: impl Into<String>, is_public: bool) -> Result<Self, ModelError> {
        let aggregate = aggregate_score(&scores)?;
        Ok(Self { scores, aggregate, feedback: feedback.into(), is_public })
    }

    /// A bundle holding a single unit-weight score named `score`.
    pub fn single(value: f64) -> Self {
        Self { scores: vec![Score::new("score", value)], aggregate: value, feedback: String::new(), is_public: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Maximize => "maximize",
            Direction::Minimize => "minimize",
        }
    }

    /// Total order on finite scores, best first.
    pub fn cmp_best_first(self, a: f64, b: f64) -> std::cmp::Ordering {
        match self {
            Direction::Maximize => b.total_cmp(&a),
            Direction::Minimize => a.total_cmp(&b),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "maximize" => Ok(Direction::Maximize),
            "minimize" => Ok(Direction::Minimize),
            _ => Err(ModelError::Parse { what: "direction", value: s.to_string() }),
        }
    }
}

/// Strictly-better test. An absent incumbent is always beaten; NaN never wins.
pub fn is_better(direction: Direction, candidate: f64, incumbent: Option<f64>) -> bool {
    if candidate.is_nan() {
        return false;
    }
    match incumbent {
        None => true,
        Some(inc) => match direction {
            Direction::Maximize => candidate > inc,
            Direction::Minimize => candidate < inc,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttemptStatus {
    Improved,
    Baseline,
    Regressed,
    Crashed,
    Timeout,
}

impl AttemptStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AttemptStatus::Improved => "improved",
            AttemptStatus::Baseline => "baseline",
            AttemptStatus::Regressed => "regressed",
            AttemptStatus::Crashed => "crashed",
            AttemptStatus::Timeout => "timeout",
        }
    }

    pub fn is_graded(self) -> bool {
        !matches!(self, AttemptStatus::Crashed | AttemptStatus::Timeout)
    }
}

impl fmt::Display for AttemptStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What came back from one grader run.
#[derive(Debug, Clone, PartialEq)]
pub enum GraderOutcome {
    Graded(ScoreBundle),
    Crashed { exit_code: Option<i32>, stderr_tail: String },
    TimedOut,
}

pub fn determine_status(direction: Direction, prev_best: Option<f64>, outcome: &GraderOutcome) -> AttemptStatus {
    match outcome {
        GraderOutcome::Crashed { .. } => AttemptStatus::Crashed,
        GraderOutcome::TimedOut => AttemptStatus::Timeout,
        GraderOutcome::Graded(bundle) => status_for_score(direction, prev_best, bundle.aggregate),
    }
}

/// Status of a graded score against the previous best. Non-finite scores count as crashes.
pub fn status_for_score(direction: Direction, prev_best: Option<f64>, score: f64) -> AttemptStatus {
    if !score.is_finite() {
        AttemptStatus::Crashed
    } else if is_better(direction, score, prev_best) {
        AttemptStatus::Improved
    } else if prev_best == Some(score) {
        AttemptStatus::Baseline
    } else {
        AttemptStatus::Regressed
    }
}

/// One graded candidate: a row of the evolution ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub commit_hash: String,
    pub agent_id: String,
    #[serde(default)]
    pub title: String,
    pub score: Option<f64>,
    pub status: AttemptStatus,
    pub parent_hash: Option<String>,
    #[serde(with = "iso_timestamp")]
    pub timestamp: DateTime<FixedOffset>,
    #[serde(default)]
    pub feedback: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_checkpoint: Option<String>,
    /// False when the grader marked its feedback private; agent-facing views redact it.
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub feedback_public: bool,
    /// Fields written by other tools, carried through untouched.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

impl Attempt {
    pub fn short_hash(&self) -> &str {
        &self.commit_hash[..self.commit_hash.len().min(8)]
    }

    /// Feedback as an agent may see it.
    pub fn visible_feedback(&self) -> &str {
        if self.feedback_public {
            &self.feedback
        } else {
            "(feedback hidden by grader)"
        }
    }
}

/// Current time with millisecond precision and an explicit offset.
pub fn now_timestamp() -> DateTime<FixedOffset> {
    let now = Utc::now();
    let ms = now.timestamp_millis();
    DateTime::from_timestamp_millis(ms).unwrap_or(now).fixed_offset()
}

pub fn format_timestamp(ts: &DateTime<FixedOffset>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::AutoSi, false)
}

mod iso_timestamp {
    use chrono::{DateTime, FixedOffset};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<FixedOffset>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_timestamp(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<FixedOffset>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw).map_err(|e| serde::de::Error::custom(format!("timestamp `{raw}`: {e}")))
    }
}

pub fn encode_attempt(attempt: &Attempt) -> String {
    let mut text = serde_json::to_string_pretty(attempt).expect("attempt serializes");
    text.push('\n');
    text
}

pub fn decode_attempt(text: &str) -> Result<Attempt, ModelError> {
    let attempt: Attempt = serde_json::from_str(text).map_err(|e| ModelError::Decode(e.to_string()))?;
    if attempt.commit_hash.is_empty() {
        return Err(ModelError::Decode("commit_hash is empty".into()));
    }
    if attempt.agent_id.is_empty() {
        return Err(ModelError::Decode("agent_id is empty".into()));
    }
    Ok(attempt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerKind {
    Interval,
    Plateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionScope {
    Local,
    Global,
}

impl FromStr for TriggerKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interval" => Ok(TriggerKind::Interval),
            "plateau" => Ok(TriggerKind::Plateau),
            _ => Err(ModelError::Parse { what: "trigger", value: s.to_string() }),
        }
    }
}

impl FromStr for ActionScope {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(ActionScope::Local),
            "global" => Ok(ActionScope::Global),
            _ => Err(ModelError::Parse { what: "scope", value: s.to_string() }),
        }
    }
}

/// An intervention rule. `prompt` falls back to the built-in template of the same name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartbeatAction {
    pub name: String,
    pub every: u64,
    pub trigger: TriggerKind,
    pub scope: ActionScope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default)]
    pub protected: bool,
}

impl HeartbeatAction {
    pub fn new(name: impl Into<String>, every: u64, trigger: TriggerKind, scope: ActionScope) -> Self {
        Self { name: name.into(), every, trigger, scope, prompt: None, protected: false }
    }
}

/// Supervisor-side counters for one agent, derived from the ledger.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentState {
    pub agent_id: String,
    pub session_id: Option<String>,
    pub local_eval_count: u64,
    pub best_score: Option<f64>,
    pub evals_since_improvement: u64,
    /// Plateau streak length at which the next plateau action may fire.
    pub plateau_cooldown_until: u64,
}

impl AgentState {
    pub fn new(agent_id: impl Into<String>) -> Self {
        Self { agent_id: agent_id.into(), ..Default::default() }
    }

    /// Fold one of this agent's attempts into the counters.
    pub fn observe(&mut self, attempt: &Attempt) {
        self.local_eval_count += 1;
        if attempt.status == AttemptStatus::Improved {
            self.evals_since_improvement = 0;
            self.plateau_cooldown_until = 0;
            if let Some(s) = attempt.score {
                self.best_score = Some(s);
            }
        } else {
            self.evals_since_improvement += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graded(v: f64) -> GraderOutcome {
        GraderOutcome::Graded(ScoreBundle::single(v))
    }

    fn sample_attempt() -> Attempt {
        Attempt {
            commit_hash: "00d466e3a1b2c3d4e5f60718293a4b5c6d7e8f90".into(),
            agent_id: "agent-2".into(),
            title: "Pre-compute idx=2*idx+1 before hash".into(),
            score: Some(1274.0),
            status: AttemptStatus::Improved,
            parent_hash: Some("08e3b759aabbccddeeff00112233445566778899".into()),
            timestamp: DateTime::parse_from_rfc3339("2026-03-14T14:55:16+00:00").unwrap(),
            feedback: "eval: Cycles: 1,274 | NEW RECORD!".into(),
            knowledge_checkpoint: None,
            feedback_public: true,
            extra: Default::default(),
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_score(&[Score::new("a", 2.0)]).unwrap(), 2.0);
        let two = [Score::weighted("a", 1.0, 1.0), Score::weighted("b", 3.0, 3.0)];
        assert_eq!(aggregate_score(&two).unwrap(), 2.5);
        assert_eq!(aggregate_score(&[]), Err(ModelError::EmptyScores));
        assert!(matches!(aggregate_score(&[Score::weighted("a", 1.0, 0.0)]), Err(ModelError::ZeroWeight(_))));
        assert!(matches!(
            aggregate_score(&[Score::weighted("a", 1.0, -1.0)]),
            Err(ModelError::NegativeWeight { .. })
        ));
    }

    #[test]
    fn is_better_examples() {
        assert!(is_better(Direction::Minimize, 1274.0, Some(1350.0)));
        assert!(!is_better(Direction::Maximize, 0.5, Some(0.5)));
        assert!(is_better(Direction::Minimize, 7.0, None));
        assert!(!is_better(Direction::Maximize, f64::NAN, None));
    }

    #[test]
    fn status_examples() {
        assert_eq!(determine_status(Direction::Minimize, Some(1350.0), &graded(1274.0)), AttemptStatus::Improved);
        assert_eq!(determine_status(Direction::Maximize, Some(0.73), &graded(0.73)), AttemptStatus::Baseline);
        assert_eq!(determine_status(Direction::Maximize, Some(0.73), &graded(0.5)), AttemptStatus::Regressed);
        let crashed = GraderOutcome::Crashed { exit_code: Some(1), stderr_tail: String::new() };
        assert_eq!(determine_status(Direction::Maximize, Some(0.73), &crashed), AttemptStatus::Crashed);
        assert_eq!(determine_status(Direction::Maximize, None, &GraderOutcome::TimedOut), AttemptStatus::Timeout);
        assert_eq!(determine_status(Direction::Maximize, None, &graded(3.0)), AttemptStatus::Improved);
        assert_eq!(determine_status(Direction::Maximize, None, &graded(f64::INFINITY)), AttemptStatus::Crashed);
    }

    #[test]
    fn attempt_round_trip_and_field_names() {
        let a = sample_attempt();
        let text = encode_attempt(&a);
        for field in ["commit_hash", "agent_id", "title", "score", "status", "parent_hash", "timestamp", "feedback"] {
            assert!(text.contains(&format!("\"{field}\"")), "missing {field} in {text}");
        }
        assert!(text.contains("\"status\": \"improved\""));
        assert!(text.contains("2026-03-14T14:55:16+00:00"));
        assert_eq!(decode_attempt(&text).unwrap(), a);
    }

    #[test]
    fn timeout_attempt_encodes_null_score() {
        let mut a = sample_attempt();
        a.score = None;
        a.status = AttemptStatus::Timeout;
        let text = encode_attempt(&a);
        assert!(text.contains("\"score\": null"));
        assert_eq!(decode_attempt(&text).unwrap(), a);
    }

    #[test]
    fn missing_field_is_named() {
        let text = r#"{"commit_hash":"abc","title":"t","score":1.0,"status":"improved","parent_hash":null,
            "timestamp":"2026-03-14T14:55:16+00:00","feedback":""}"#;
        let err = decode_attempt(text).unwrap_err().to_string();
        assert!(err.contains("agent_id"), "{err}");
        assert!(decode_attempt("{not json").is_err());
    }

    #[test]
    fn unknown_fields_survive() {
        let text = r#"{"commit_hash":"abc","agent_id":"agent-1","title":"t","score":1.0,"status":"baseline",
            "parent_hash":null,"timestamp":"2026-03-14T14:55:16+00:00","feedback":"","tokens_used":1234}"#;
        let a = decode_attempt(text).unwrap();
        let again = encode_attempt(&a);
        assert!(again.contains("\"tokens_used\": 1234"));
        assert_eq!(decode_attempt(&again).unwrap(), a);
    }

    #[test]
    fn observe_resets_streak_on_improvement() {
        let mut st = AgentState::new("agent-2");
        let mut a = sample_attempt();
        a.status = AttemptStatus::Regressed;
        st.observe(&a);
        st.observe(&a);
        st.plateau_cooldown_until = 7;
        assert_eq!(st.evals_since_improvement, 2);
        a.status = AttemptStatus::Improved;
        st.observe(&a);
        assert_eq!((st.local_eval_count, st.evals_since_improvement, st.plateau_cooldown_until), (3, 0, 0));
        assert_eq!(st.best_score, Some(1274.0));
    }

    fn direction() -> impl Strategy<Value = Direction> {
        prop_oneof![Just(Direction::Maximize), Just(Direction::Minimize)]
    }

    fn finite() -> impl Strategy<Value = f64> {
        -1e12f64..1e12f64
    }

    fn status() -> impl Strategy<Value = AttemptStatus> {
        prop_oneof![
            Just(AttemptStatus::Improved),
            Just(AttemptStatus::Baseline),
            Just(AttemptStatus::Regressed),
            Just(AttemptStatus::Crashed),
            Just(AttemptStatus::Timeout),
        ]
    }

    prop_compose! {
        fn attempt()(
            hash in "[0-9a-f]{40}",
            agent in "agent-[1-9]",
            title in ".{0,60}",
            score in finite(),
            status in status(),
            parent in proptest::option::of("[0-9a-f]{40}"),
            secs in 0i64..4_000_000_000i64,
            millis in 0i64..1000,
            offset_min in -720i32..=720,
            feedback in ".{0,80}",
            ckpt in proptest::option::of("[0-9a-f]{64}"),
            public in any::<bool>(),
        ) -> Attempt {
            let tz = FixedOffset::east_opt(offset_min * 60).unwrap();
            let ts = DateTime::from_timestamp_millis(secs * 1000 + millis).unwrap().with_timezone(&tz);
            Attempt {
                commit_hash: hash,
                agent_id: agent,
                title,
                score: if status.is_graded() { Some(score) } else { None },
                status,
                parent_hash: parent,
                timestamp: ts,
                feedback,
                knowledge_checkpoint: ckpt,
                feedback_public: public,
                extra: Default::default(),
            }
        }
    }

    proptest! {
        #[test]
        fn is_better_is_asymmetric(d in direction(), a in finite(), b in finite()) {
            prop_assert!(!(is_better(d, a, Some(b)) && is_better(d, b, Some(a))));
        }

        #[test]
        fn improved_iff_better(d in direction(), c in finite(), prev in proptest::option::of(finite())) {
            let st = determine_status(d, prev, &graded(c));
            prop_assert_eq!(st == AttemptStatus::Improved, is_better(d, c, prev));
        }

        #[test]
        fn aggregate_scale_invariant(
            vals in proptest::collection::vec((-1e6f64..1e6, 0.01f64..100.0), 1..8),
            c in 0.01f64..1000.0,
        ) {
            let base: Vec<Score> = vals.iter().enumerate().map(|(i, (v, w))| Score::weighted(format!("s{i}"), *v, *w)).collect();
            let scaled: Vec<Score> = base.iter().map(|s| Score::weighted(s.name.clone(), s.value, s.weight * c)).collect();
            let a = aggregate_score(&base).unwrap();
            let b = aggregate_score(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn attempt_round_trips(a in attempt()) {
            prop_assert_eq!(decode_attempt(&encode_attempt(&a)).unwrap(), a);
        }
    }
}
