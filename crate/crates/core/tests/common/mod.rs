#![allow(dead_code)]

use std::sync::Arc;

use gymfleet::data_server::{DataServer, ServerConfig, TrajectoryStore};
use gymfleet::env_backend::{DurationRange, FaultModel, LatencyModel, SimBackend, SimEnvConfig};
use gymfleet::protocol::{Action, ActionPayload, Geometry, MouseButton, ReplicaId};
use gymfleet::state_manager::{BackendConfig, CollectingSink, Launch, ManagerConfig, StateManager};
use gymfleet::task_flow::{ConfigureStep, EvaluatorRegistry, EvaluatorSpec, TaskRegistry, TaskSpec};

pub mod props;

pub const SMALL: Geometry = Geometry { width: 64, height: 64 };

/// Seeded 16x16 grid; passes once cell (0, 0) holds 5.
pub fn grid_task(task_id: &str, seed: u64, step_limit: u32) -> TaskSpec {
    TaskSpec {
        task_id: task_id.into(),
        domain: "daily".into(),
        instruction: "Put a 5 in the top-left cell".into(),
        configure_steps: vec![ConfigureStep::Seed { value: seed }, ConfigureStep::SetCell { row: 0, col: 0, value: 0 }],
        step_limit,
        early_stop: false,
        evaluator: EvaluatorSpec::CellEquals { row: 0, col: 0, value: 5 },
    }
}

/// Actions that satisfy [`grid_task`]: click the top-left cell, type '5'.
pub fn grid_solution() -> Vec<Action> {
    vec![
        Action::new(ActionPayload::MouseClick { x: 0, y: 0, button: MouseButton::Left }),
        Action::new(ActionPayload::TypeText { text: "5".into() }).with_thought("5 mod 16 is 5"),
    ]
}

pub fn noop() -> Action {
    Action::new(ActionPayload::Noop)
}

pub fn sim_config(seed: u64, latency_ms: f64, geometry: Geometry) -> SimEnvConfig {
    SimEnvConfig {
        seed,
        latency_model: LatencyModel { base_ms: latency_ms, lognormal_sigma: 0.0 },
        fault_model: FaultModel { recovery_duration_ms: DurationRange { min: 10.0, max: 10.0 }, ..FaultModel::default() },
        geometry,
        ..SimEnvConfig::default()
    }
}

pub fn manager_config(index: u32, sim: &SimEnvConfig) -> ManagerConfig {
    ManagerConfig {
        watchdog_interval_ms: 50,
        step_timeout_ms: 500,
        recovery_backoff_ms: vec![100, 200, 400],
        geometry: sim.geometry,
        backend: BackendConfig::Sim(sim.clone()),
        ..ManagerConfig::new(ReplicaId::new("test", index))
    }
}

pub struct TestManager {
    pub manager: StateManager,
    pub sim: Arc<SimBackend>,
    pub events: Arc<CollectingSink>,
}

pub async fn launch_with(config: ManagerConfig, launch: Launch) -> TestManager {
    let sim = Arc::new(SimBackend::new(config.sim_config()).unwrap());
    let events = Arc::new(CollectingSink::default());
    let manager = StateManager::launch(
        config,
        sim.clone(),
        Arc::new(EvaluatorRegistry::with_stock_natives()),
        events.clone(),
        launch,
    )
    .await
    .unwrap();
    TestManager { manager, sim, events }
}

pub async fn launch(index: u32, sim: SimEnvConfig) -> TestManager {
    launch_with(manager_config(index, &sim), Launch::Fresh).await
}

pub fn terminate() -> Action {
    Action::new(ActionPayload::Terminate)
}

pub struct Fleet {
    pub server: DataServer,
    pub managers: Vec<TestManager>,
    pub dir: tempfile::TempDir,
}

/// `n` in-process sim managers registered with a fresh server over a temp store.
pub async fn fleet_with(
    n: u32,
    latency_ms: f64,
    tasks: Vec<TaskSpec>,
    server: ServerConfig,
    tweak: impl Fn(&mut ManagerConfig),
) -> Fleet {
    let dir = tempfile::tempdir().unwrap();
    let store = TrajectoryStore::open(dir.path()).unwrap();
    let server = DataServer::new(server, TaskRegistry::from_specs(tasks).unwrap(), store);
    let mut managers = Vec::new();
    for i in 0..n {
        let mut config = manager_config(i, &sim_config(1000 + u64::from(i), latency_ms, SMALL));
        tweak(&mut config);
        let t = launch_with(config, Launch::Fresh).await;
        server.register_local(&t.manager).await.unwrap();
        managers.push(t);
    }
    Fleet { server, managers, dir }
}

pub async fn fleet(n: u32, latency_ms: f64, tasks: Vec<TaskSpec>) -> Fleet {
    fleet_with(n, latency_ms, tasks, ServerConfig::default(), |_| {}).await
}

/// Legal (from, to) pairs, spelled out independently of the library table.
pub const LEGAL_TRANSITIONS: &[(&str, &str)] = &[
    ("UNCONFIGURED", "CONFIGURING"),
    ("CONFIGURING", "READY"),
    ("READY", "BUSY"),
    ("BUSY", "READY"),
    ("READY", "EVALUATING"),
    ("EVALUATING", "READY"),
    ("UNCONFIGURED", "CRASHED"),
    ("CONFIGURING", "CRASHED"),
    ("READY", "CRASHED"),
    ("BUSY", "CRASHED"),
    ("EVALUATING", "CRASHED"),
    ("RECOVERING", "CRASHED"),
    ("CRASHED", "RECOVERING"),
    ("RECOVERING", "READY"),
    ("RECOVERING", "UNCONFIGURED"),
];

pub fn is_legal(from: &str, to: &str) -> bool {
    LEGAL_TRANSITIONS.contains(&(from, to))
}
