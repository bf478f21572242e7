//! Property checks shared by the proptest suite and the acceptance runner.
//! Each check takes a generated case and returns `Err` with a description
//! of the first violation.

use std::collections::{HashMap, HashSet};
use std::time::Duration;

use gymfleet::data_server::{read_episode, TrajectoryStore};
use gymfleet::env_backend::{sim_apply, sim_snapshot, Backend, DurationRange, FaultKind, SimBackend, SimState};
use gymfleet::protocol::messages::{EpisodeStatus, TrajectoryFilter, TurnRecord};
use gymfleet::protocol::{Action, ActionPayload, MouseButton, ReplicaId};
use gymfleet::state_manager::{Launch, ReplicaState};
use gymfleet::task_flow::{run_evaluator, ConfigureStep, EvaluatorRegistry, EvaluatorSpec, TaskSpec};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

use super::*;

fn paused_runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_all().start_paused(true).build().unwrap()
}

// ---------------------------------------------------------------- actions

const KEYS: &[&str] = &["up", "down", "left", "right", "home", "end", "backspace", "delete", "enter", "escape", "ctrl+c", "ctrl+v", "7", "pagedown"];

pub fn arb_action() -> impl Strategy<Value = Action> {
    let w = i64::from(SMALL.width);
    let h = i64::from(SMALL.height);
    prop_oneof![
        (0..w, 0..h).prop_map(|(x, y)| ActionPayload::MouseMove { x, y }),
        (0..w, 0..h).prop_map(|(x, y)| ActionPayload::MouseClick { x, y, button: MouseButton::Left }),
        "[0-9a-f ]{0,6}".prop_map(|text| ActionPayload::TypeText { text }),
        proptest::sample::select(KEYS).prop_map(|k| ActionPayload::KeyPress { key: k.to_string() }),
        (-3i64..=3).prop_map(|delta| ActionPayload::Scroll { delta }),
        (1u64..20).prop_map(|count| ActionPayload::ApiCall {
            name: "scatter".into(),
            args: serde_json::json!({ "count": count })
        }),
        Just(ActionPayload::Noop),
    ]
    .prop_map(Action::new)
}

// ---------------------------------------------------------- state machine

#[derive(Clone, Debug)]
pub enum Op {
    Configure(usize),
    Reset,
    Step(Action),
    Evaluate,
    Crash,
    Hang,
    Flaky(u32),
    Wait(u64),
    /// Wait for everything in flight.
    Join,
}

pub fn arb_ops(max_len: usize) -> impl Strategy<Value = Vec<Op>> {
    let op = prop_oneof![
        3 => (0usize..3).prop_map(Op::Configure),
        3 => Just(Op::Reset),
        6 => arb_action().prop_map(Op::Step),
        2 => Just(Op::Evaluate),
        1 => Just(Op::Crash),
        1 => Just(Op::Hang),
        1 => (1u32..3).prop_map(Op::Flaky),
        4 => (0u64..120).prop_map(Op::Wait),
        4 => Just(Op::Join),
    ];
    // Most sequences should get past UNCONFIGURED.
    (any::<bool>(), proptest::collection::vec(op, 1..max_len)).prop_map(|(configure_first, mut ops)| {
        if configure_first {
            ops.splice(0..0, [Op::Configure(0), Op::Join]);
        }
        ops
    })
}

fn interleaving_tasks() -> Vec<TaskSpec> {
    let mut bad = grid_task("bad", 1, 5);
    bad.evaluator = EvaluatorSpec::Native { name: "missing".into(), args: serde_json::Value::Null };
    vec![grid_task("a", 3, 4), grid_task("b", 9, 8), bad]
}

async fn join_all(pending: &mut Vec<tokio::task::JoinHandle<Result<(), gymfleet::protocol::EngineError>>>) -> Result<(), String> {
    for handle in pending.drain(..) {
        if let Err(e) = handle.await {
            return Err(format!("operation panicked: {e}"));
        }
    }
    Ok(())
}

/// Fires `ops` at one manager without waiting for each to finish, lets the
/// replica settle, and checks every transition it logged. Returns the
/// distinct transitions seen.
pub fn check_interleaving(seed: u64, ops: &[Op]) -> Result<HashSet<(ReplicaState, ReplicaState)>, String> {
    paused_runtime().block_on(async {
        let mut sim = sim_config(seed, 15.0, SMALL);
        sim.latency_model.lognormal_sigma = 0.5;
        sim.fault_model.crash_per_step_prob = 0.02;
        sim.fault_model.recovery_duration_ms = DurationRange { min: 5.0, max: 40.0 };
        let mut config = manager_config(0, &sim);
        config.watchdog_interval_ms = 10;
        config.step_timeout_ms = 150;
        config.recovery_backoff_ms = vec![20, 40];
        let t = launch_with(config, Launch::Fresh).await;
        let tasks = interleaving_tasks();
        let mut pending = Vec::new();
        for op in ops {
            let m = t.manager.clone();
            match op.clone() {
                Op::Configure(i) => {
                    let task = tasks[i].clone();
                    pending.push(tokio::spawn(async move { m.configure(task).await.map(drop) }));
                }
                Op::Reset => pending.push(tokio::spawn(async move { m.reset().await.map(drop) })),
                Op::Step(a) => pending.push(tokio::spawn(async move { m.step(a).await.map(drop) })),
                Op::Evaluate => pending.push(tokio::spawn(async move { m.evaluate().await.map(drop) })),
                Op::Crash => drop(m.inject_fault(FaultKind::CrashNow)),
                Op::Hang => drop(m.inject_fault(FaultKind::HangNow)),
                Op::Flaky(n) => drop(m.inject_fault(FaultKind::FlakyRecovery { attempts: n })),
                Op::Wait(ms) => tokio::time::sleep(Duration::from_millis(ms)).await,
                Op::Join => join_all(&mut pending).await?,
            }
        }
        join_all(&mut pending).await?;

        tokio::time::sleep(Duration::from_millis(30)).await;
        let mut settled = false;
        for _ in 0..600 {
            if matches!(t.manager.state(), ReplicaState::Ready | ReplicaState::Unconfigured) {
                settled = true;
                break;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        t.manager.shutdown();
        if !settled {
            return Err(format!("replica stuck in {} after 30 s", t.manager.state()));
        }

        let mut seen = HashSet::new();
        let mut current = ReplicaState::Unconfigured;
        for e in t.events.events() {
            if e.from != current {
                return Err(format!("transition from {} while in {current}", e.from));
            }
            if !is_legal(e.from.as_str(), e.to.as_str()) {
                return Err(format!("illegal transition {} -> {} ({})", e.from, e.to, e.reason));
            }
            if !e.from.can_transition(e.to) {
                return Err(format!("library table disagrees on {} -> {}", e.from, e.to));
            }
            seen.insert((e.from, e.to));
            current = e.to;
        }
        if current != t.manager.state() {
            return Err(format!("log ends in {current}, manager reports {}", t.manager.state()));
        }
        Ok(seen)
    })
}

// ------------------------------------------------------------------ replay

pub fn arb_replay() -> impl Strategy<Value = (u64, u64, Vec<Action>)> {
    (any::<u64>(), any::<u64>(), proptest::collection::vec(arb_action(), 0..25))
}

fn replay_task(seed: u64) -> TaskSpec {
    TaskSpec {
        task_id: "replay".into(),
        domain: "daily".into(),
        instruction: "anything".into(),
        configure_steps: vec![
            ConfigureStep::GridSize { rows: 6, cols: 8 },
            ConfigureStep::Seed { value: seed },
            ConfigureStep::Clipboard { text: "42".into() },
        ],
        step_limit: 100,
        early_stop: false,
        evaluator: EvaluatorSpec::BufferEquals { expected: "42".into() },
    }
}

/// Replays the same task and actions on two backends whose latency streams
/// differ, through a manager, and through the pure transition function; all
/// four must agree byte for byte at every turn.
pub fn check_replay(task_seed: u64, latency_seed: u64, actions: &[Action]) -> Result<(), String> {
    let task = replay_task(task_seed);
    paused_runtime().block_on(async {
        let mut traces: Vec<Vec<Vec<u8>>> = Vec::new();
        let mut states = Vec::new();
        for s in [latency_seed, latency_seed.wrapping_add(1)] {
            let mut sim = sim_config(s, 5.0, SMALL);
            sim.latency_model.lognormal_sigma = 0.8;
            let backend = SimBackend::new(sim).map_err(|e| e.to_string())?;
            backend.create().await.map_err(|e| e.to_string())?;
            backend.restore_initial(&task).await.map_err(|e| e.to_string())?;
            let mut trace = vec![backend.snapshot().map_err(|e| e.to_string())?.screenshot.to_vec()];
            for a in actions {
                backend.apply(a).await.map_err(|e| e.to_string())?;
                trace.push(backend.snapshot().map_err(|e| e.to_string())?.screenshot.to_vec());
            }
            traces.push(trace);
            states.push(backend.state());
        }

        let mut pure = SimState::from_task(&task)?;
        let mut trace = vec![sim_snapshot(&pure, SMALL).screenshot.to_vec()];
        for a in actions {
            pure = sim_apply(&pure, a, SMALL);
            trace.push(sim_snapshot(&pure, SMALL).screenshot.to_vec());
        }
        traces.push(trace);

        let t = launch(0, sim_config(latency_seed, 5.0, SMALL)).await;
        t.manager.configure(task.clone()).await.map_err(|e| e.to_string())?;
        let mut trace = vec![t.manager.reset().await.map_err(|e| e.to_string())?.screenshot.to_vec()];
        for a in actions {
            trace.push(t.manager.step(a.clone()).await.map_err(|e| e.to_string())?.observation.screenshot.to_vec());
        }
        t.manager.shutdown();
        traces.push(trace);

        if states[0] != states[1] || states[0].as_ref() != Some(&pure) {
            return Err("final states differ".into());
        }
        for (i, trace) in traces.iter().enumerate().skip(1) {
            if let Some(turn) = (0..=actions.len()).find(|&k| trace[k] != traces[0][k]) {
                return Err(format!("run {i} differs from run 0 at turn {turn}"));
            }
        }
        Ok(())
    })
}

// ------------------------------------------------------------------- store

#[derive(Clone, Debug)]
pub struct EpisodeScript {
    /// Index into the blob pool for the initial and each later observation.
    pub observations: Vec<usize>,
    /// None leaves the episode open when the store is dropped.
    pub close: Option<(EpisodeStatus, f64)>,
}

pub const BLOB_POOL: usize = 5;

fn pool_bytes(i: usize) -> Vec<u8> {
    format!("observation-{i}").repeat(i + 1).into_bytes()
}

pub fn arb_store_script() -> impl Strategy<Value = Vec<EpisodeScript>> {
    let status = prop_oneof![Just(EpisodeStatus::Complete), Just(EpisodeStatus::Aborted), Just(EpisodeStatus::Truncated)];
    let close = proptest::option::weighted(0.8, (status, 0u32..=4).prop_map(|(s, q)| (s, f64::from(q) / 4.0)));
    let episode = (proptest::collection::vec(0..BLOB_POOL, 1..10), close)
        .prop_map(|(observations, close)| EpisodeScript { observations, close });
    proptest::collection::vec(episode, 0..8)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the script into a fresh store, then checks refs, hashes,
/// deduplication, and that the files re-read to the in-memory records.
pub fn check_store(script: &[EpisodeScript]) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let replica = ReplicaId::new("prop", 0);
    let mut expected = HashMap::new();
    let mut used = HashSet::new();
    {
        let store = TrajectoryStore::open(dir.path()).map_err(|e| e.to_string())?;
        for (i, ep) in script.iter().enumerate() {
            let id = format!("ep-{i:03}");
            let started = 1000 + i as u64;
            store.open_episode(&id, "t", &replica, "do it", started, &pool_bytes(ep.observations[0])).map_err(|e| e.to_string())?;
            used.insert(ep.observations[0]);
            for (turn, &obs) in ep.observations.iter().enumerate().skip(1) {
                let rec = TurnRecord {
                    observation_ref: String::new(),
                    thought: None,
                    action: Action::new(ActionPayload::Noop),
                    reward: 0.0,
                    latency_ms: 1.0,
                    timestamp: started + turn as u64,
                };
                store.append_turn(&id, rec, &pool_bytes(obs)).map_err(|e| e.to_string())?;
                used.insert(obs);
            }
            if let Some((status, score)) = ep.close {
                let end = started + ep.observations.len() as u64;
                let record = store.close_episode(&id, status, score, end).map_err(|e| e.to_string())?;
                let (back, terminated) = read_episode(&store.episode_path(&id)).map_err(|e| e.to_string())?;
                if !terminated || back != record {
                    return Err(format!("{id}: file does not re-read to the closed record"));
                }
                expected.insert(id, record);
            }
        }

        for (i, ep) in script.iter().enumerate() {
            let id = format!("ep-{i:03}");
            let Some(record) = expected.get(&id) else { continue };
            let mut refs: Vec<&String> = record.turns.iter().map(|t| &t.observation_ref).collect();
            refs.extend(record.final_observation_ref.as_ref());
            // Without turns the record carries no screenshot; the start line still does.
            let shown = if ep.observations.len() > 1 { &ep.observations[..] } else { &[][..] };
            let wanted: Vec<String> = shown.iter().map(|&o| sha256_hex(&pool_bytes(o))).collect();
            let first = std::fs::read_to_string(store.episode_path(&id)).map_err(|e| e.to_string())?;
            let start: serde_json::Value =
                serde_json::from_str(first.lines().next().unwrap_or_default()).map_err(|e| e.to_string())?;
            let initial = start["observation_ref"].as_str().unwrap_or_default().to_string();
            if initial != sha256_hex(&pool_bytes(ep.observations[0])) || !store.has_blob(&initial) {
                return Err(format!("{id}: start line ref is wrong or dangling"));
            }
            if refs.iter().map(|r| r.as_str()).ne(wanted.iter().map(|w| w.as_str())) {
                return Err(format!("{id}: refs do not follow the observation sequence"));
            }
            for r in refs {
                let bytes = store.read_blob(r).map_err(|e| format!("{id}: ref {r} does not resolve: {e}"))?;
                if sha256_hex(&bytes) != *r {
                    return Err(format!("{id}: blob {r} does not hash to its name"));
                }
            }
        }
    }

    let blobs = walkdir::WalkDir::new(dir.path().join("blobs"))
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .count();
    if blobs != used.len() {
        return Err(format!("{blobs} blob files for {} distinct observations", used.len()));
    }

    let reopened = TrajectoryStore::open(dir.path()).map_err(|e| e.to_string())?;
    let all = reopened.query(&TrajectoryFilter::default());
    if all.len() != script.len() {
        return Err(format!("reopened store has {} episodes, wrote {}", all.len(), script.len()));
    }
    for record in &all {
        match expected.get(&record.episode_id) {
            Some(want) if want != record => return Err(format!("{}: reopened record differs", record.episode_id)),
            None if record.status != EpisodeStatus::Aborted => {
                return Err(format!("{}: unclosed episode reloaded as {:?}", record.episode_id, record.status))
            }
            _ => {}
        }
    }
    drop(reopened);
    let again = TrajectoryStore::open(dir.path()).map_err(|e| e.to_string())?.query(&TrajectoryFilter::default());
    if again != all {
        return Err("second reopen is not a fixed point".into());
    }
    Ok(())
}

// --------------------------------------------------------------- evaluator

const ALPHABET: &str = "[01ab]{0,3}";

pub fn arb_sim_state() -> impl Strategy<Value = SimState> {
    (1usize..6, 1usize..6).prop_flat_map(|(rows, cols)| {
        (
            proptest::collection::vec(0u8..4, rows * cols),
            0..rows,
            0..cols,
            ALPHABET,
        )
            .prop_map(move |(cells, r, c, buffer)| {
                let mut s = SimState::blank(rows, cols);
                for (i, v) in cells.into_iter().enumerate() {
                    s.grid.set(i / cols, i % cols, v);
                }
                s.cursor = (r, c);
                s.typed_buffer = buffer;
                s
            })
    })
}

fn arb_leaf() -> impl Strategy<Value = EvaluatorSpec> {
    prop_oneof![
        (0usize..7, 0usize..7, 0u8..4).prop_map(|(row, col, value)| EvaluatorSpec::CellEquals { row, col, value }),
        ALPHABET.prop_map(|expected| EvaluatorSpec::BufferEquals { expected }),
        (0usize..6, 0usize..6).prop_map(|(row, col)| EvaluatorSpec::CursorAt { row, col }),
        "[01ab]{0,2}".prop_map(|needle| EvaluatorSpec::Native {
            name: "buffer_contains".into(),
            args: serde_json::json!({ "needle": needle })
        }),
        (0u64..30).prop_map(|count| EvaluatorSpec::Native {
            name: "nonzero_cells_at_least".into(),
            args: serde_json::json!({ "count": count })
        }),
    ]
}

pub fn arb_spec() -> impl Strategy<Value = EvaluatorSpec> {
    arb_leaf().prop_recursive(4, 40, 4, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 1..4).prop_map(EvaluatorSpec::PredicateAll),
            proptest::collection::vec(inner.clone(), 1..4).prop_map(EvaluatorSpec::PredicateAny),
            proptest::collection::vec((1u32..5, inner), 1..4).prop_map(|children| {
                let total: u32 = children.iter().map(|c| c.0).sum();
                EvaluatorSpec::WeightedSum(
                    children.into_iter().map(|(w, c)| (f64::from(w) / f64::from(total), c)).collect(),
                )
            }),
        ]
    })
}

/// Independent recomputation: leaves straight from the state fields, inner
/// nodes from their children's oracle scores.
pub fn oracle_score(spec: &EvaluatorSpec, s: &SimState) -> f64 {
    let hit = |b: bool| if b { 1.0 } else { 0.0 };
    match spec {
        EvaluatorSpec::CellEquals { row, col, value } => {
            let (rows, cols) = (s.grid.rows(), s.grid.cols());
            hit(*row < rows && *col < cols && s.grid.cells()[row * cols + col] == *value)
        }
        EvaluatorSpec::BufferEquals { expected } => hit(s.typed_buffer == *expected),
        EvaluatorSpec::CursorAt { row, col } => hit(s.cursor.0 == *row && s.cursor.1 == *col),
        EvaluatorSpec::Native { name, args } if name == "buffer_contains" => {
            hit(s.typed_buffer.contains(args["needle"].as_str().unwrap()))
        }
        EvaluatorSpec::Native { name, args } if name == "nonzero_cells_at_least" => {
            let n = s.grid.cells().iter().filter(|c| **c > 0).count() as u64;
            hit(n >= args["count"].as_u64().unwrap())
        }
        EvaluatorSpec::Native { name, .. } => panic!("oracle has no native {name}"),
        EvaluatorSpec::PredicateAll(c) => hit(c.iter().all(|c| oracle_score(c, s) >= 1.0 - 1e-9)),
        EvaluatorSpec::PredicateAny(c) => c.iter().map(|c| oracle_score(c, s)).fold(0.0, f64::max),
        EvaluatorSpec::WeightedSum(c) => c.iter().map(|(w, c)| w * oracle_score(c, s)).sum::<f64>().clamp(0.0, 1.0),
    }
}

/// Library score equals the oracle, stays in [0,1], leaves the state
/// untouched, and a weighted sum never drops when one child is forced to pass.
pub fn check_evaluator(spec: &EvaluatorSpec, state: &SimState) -> Result<(), String> {
    let natives = EvaluatorRegistry::with_stock_natives();
    spec.validate()?;
    let before = state.clone();
    let got = run_evaluator(spec, state, &natives).map_err(|e| e.to_string())?;
    if *state != before {
        return Err("evaluation mutated the state".into());
    }
    let want = oracle_score(spec, state);
    if (got - want).abs() > 1e-12 {
        return Err(format!("library {got} vs oracle {want}"));
    }
    if !(0.0..=1.0).contains(&got) {
        return Err(format!("score {got} outside [0,1]"));
    }
    if let EvaluatorSpec::WeightedSum(children) = spec {
        let pass = EvaluatorSpec::CursorAt { row: state.cursor.0, col: state.cursor.1 };
        for i in 0..children.len() {
            let mut raised = children.clone();
            raised[i].1 = pass.clone();
            let higher = run_evaluator(&EvaluatorSpec::WeightedSum(raised), state, &natives).map_err(|e| e.to_string())?;
            if higher + 1e-12 < got {
                return Err(format!("raising child {i} lowered the sum from {got} to {higher}"));
            }
        }
    }
    Ok(())
}
