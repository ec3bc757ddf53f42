use std::fs;

use coral_core::heartbeat::HeartbeatConfig;
use coral_core::hub::rank_attempts;
use coral_core::model::now_timestamp;
use coral_core::{
    aggregate_score, decode_attempt, due_actions, encode_attempt, AgentState, Attempt, AttemptStatus, Direction, Hub,
    LeaderboardQuery, Score,
};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

fn attempt(i: usize) -> Attempt {
    Attempt {
        commit_hash: format!("{:040x}", i * 7919),
        agent_id: format!("agent-{}", i % 4 + 1),
        title: format!("attempt {i}: tweak the inner loop"),
        score: (!i.is_multiple_of(13)).then(|| ((i * 37) % 1000) as f64 / 7.0),
        status: if i.is_multiple_of(5) { AttemptStatus::Improved } else { AttemptStatus::Regressed },
        parent_hash: Some(format!("{:040x}", i)),
        timestamp: now_timestamp(),
        feedback: "cycles: 1274\nall tests passed".into(),
        knowledge_checkpoint: Some("ab".repeat(32)),
        feedback_public: true,
        extra: Default::default(),
    }
}

fn scores(c: &mut Criterion) {
    let parts: Vec<Score> = (0..16).map(|i| Score::weighted(format!("s{i}"), i as f64 * 0.5, 1.0 + i as f64)).collect();
    c.bench_function("aggregate_16", |b| b.iter(|| aggregate_score(black_box(&parts))));
}

fn heartbeat(c: &mut Criterion) {
    let cfg = HeartbeatConfig::default();
    let trace: Vec<Attempt> = (0..1000).map(attempt).collect();
    c.bench_function("due_actions_1000", |b| {
        b.iter(|| {
            let mut states: Vec<AgentState> = (1..=4).map(|i| AgentState::new(format!("agent-{i}"))).collect();
            let mut fired = 0;
            for (i, a) in trace.iter().enumerate() {
                fired += due_actions(&cfg.actions, &mut states[i % 4], i as u64 + 1, a).len();
            }
            fired
        })
    });
}

fn leaderboard(c: &mut Criterion) {
    let all: Vec<Attempt> = (0..2000).map(attempt).collect();
    let query = LeaderboardQuery { n: 20, ..Default::default() };
    c.bench_function("rank_2000_top20", |b| b.iter(|| rank_attempts(black_box(&all), Direction::Minimize, &query)));
    let search = LeaderboardQuery { n: 20, search: Some("INNER".into()), ..Default::default() };
    c.bench_function("rank_2000_search", |b| b.iter(|| rank_attempts(black_box(&all), Direction::Maximize, &search)));
}

fn codec(c: &mut Criterion) {
    let a = attempt(42);
    let text = encode_attempt(&a);
    c.bench_function("encode_attempt", |b| b.iter(|| encode_attempt(black_box(&a))));
    c.bench_function("decode_attempt", |b| b.iter(|| decode_attempt(black_box(&text)).unwrap()));
}

fn hub(c: &mut Criterion) {
    let tmp = tempfile::tempdir().unwrap();
    let grader = tmp.path().join("grader.sh");
    fs::write(&grader, "#!/bin/sh\necho 1\n").unwrap();
    let hub = Hub::init(&tmp.path().join(".coral"), &[grader]).unwrap();
    for i in 0..200 {
        let dir = hub.notes_dir().join(format!("topic-{}", i % 10));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(format!("note-{i}.md")), "finding\n".repeat(50)).unwrap();
    }
    c.bench_function("checkpoint_200_notes", |b| b.iter(|| hub.checkpoint_knowledge().unwrap()));
    // criterion re-enters the closure, so the hash counter lives outside it
    let mut i = 0;
    c.bench_function("record_attempt", |b| {
        b.iter_batched(
            || {
                i += 1;
                attempt(100_000 + i)
            },
            |a| hub.record_attempt(&a).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("increment_eval_count", |b| b.iter(|| hub.increment_eval_count().unwrap()));
}

criterion_group!(benches, scores, heartbeat, leaderboard, codec, hub);
criterion_main!(benches);
