use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use gymfleet::data_server::{DataServer, ServerConfig, TrajectoryStore};
use gymfleet::env_backend::{FaultModel, LatencyModel, SimBackend, SimEnvConfig};
use gymfleet::protocol::{Geometry, ReplicaId};
use gymfleet::service::{manager_router, serve, server_router};
use gymfleet::state_manager::{BackendConfig, Launch, ManagerConfig, NullSink, StateManager, StdoutJsonSink};
use gymfleet::task_flow::{load_task, task_files, EvaluatorRegistry, TaskRegistry};
use tokio::net::TcpListener;

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

async fn bind(addr: &str) -> Result<TcpListener, String> {
    let listener = TcpListener::bind(addr).await.map_err(|e| format!("bind {addr}: {e}"))?;
    let local = listener.local_addr().map_err(|e| e.to_string())?;
    eprintln!("listening on {local}");
    Ok(listener)
}

async fn until_ctrl_c() {
    let _ = tokio::signal::ctrl_c().await;
}

pub async fn manager(config: &Path, listen: Option<String>) -> Result<(), String> {
    let mut cfg: ManagerConfig = read_toml(config)?;
    if let Some(l) = listen {
        cfg.listen = l;
    }
    cfg.validate()?;
    let backend = SimBackend::new(cfg.sim_config())?;
    let listener = bind(&cfg.listen).await?;
    let natives = Arc::new(EvaluatorRegistry::with_stock_natives());
    let manager = StateManager::launch(cfg, Arc::new(backend), natives, Arc::new(StdoutJsonSink), Launch::Fresh)
        .await
        .map_err(|e| e.to_string())?;
    let result = serve(listener, manager_router(manager.clone()), until_ctrl_c()).await;
    manager.shutdown();
    result.map_err(|e| e.to_string())
}

/// Keeps retrying endpoints that were not up yet when the server started.
async fn register_all(server: DataServer, endpoints: Vec<String>) {
    let mut pending = endpoints;
    while !pending.is_empty() {
        let mut left = Vec::new();
        for ep in pending {
            match server.register_replica(&ep).await {
                Ok(r) => tracing::info!(endpoint = %ep, replica = %r.replica_id, "registered manager"),
                Err(e) => {
                    tracing::warn!(endpoint = %ep, error = %e, "manager not reachable yet");
                    left.push(ep);
                }
            }
        }
        pending = left;
        if !pending.is_empty() {
            tokio::time::sleep(Duration::from_secs(1)).await;
        }
    }
}

pub async fn server(config: &Path, tasks: &Path, store: &Path, listen: Option<String>) -> Result<(), String> {
    let mut cfg: ServerConfig = read_toml(config)?;
    if let Some(l) = listen {
        cfg.listen = l;
    }
    cfg.validate()?;
    let tasks = TaskRegistry::load_dir(tasks, &EvaluatorRegistry::with_stock_natives()).map_err(|e| e.to_string())?;
    let store = TrajectoryStore::open(store).map_err(|e| e.to_string())?;
    let listener = bind(&cfg.listen).await?;
    let endpoints = cfg.managers.clone();
    tracing::info!(tasks = tasks.len(), managers = endpoints.len(), "data server starting");
    let server = DataServer::new(cfg, tasks, store);
    tokio::spawn(register_all(server.clone(), endpoints));
    let result = serve(listener, server_router(server.clone()), until_ctrl_c()).await;
    server.shutdown();
    result.map_err(|e| e.to_string())
}

#[derive(Args)]
pub struct FleetArgs {
    #[arg(long, default_value_t = 4)]
    replicas: u32,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7700")]
    listen: String,
    /// Median simulated step latency.
    #[arg(long, default_value_t = 50.0)]
    latency_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    latency_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    crash_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 320)]
    width: u32,
    #[arg(long, default_value_t = 180)]
    height: u32,
}

pub async fn fleet(args: FleetArgs) -> Result<(), String> {
    let natives = Arc::new(EvaluatorRegistry::with_stock_natives());
    let tasks = TaskRegistry::load_dir(&args.tasks, &natives).map_err(|e| e.to_string())?;
    let store = TrajectoryStore::open(&args.store).map_err(|e| e.to_string())?;
    let listener = bind(&args.listen).await?;
    let server = DataServer::new(ServerConfig::default(), tasks, store);
    let geometry = Geometry { width: args.width, height: args.height };
    let mut managers = Vec::new();
    for i in 0..args.replicas {
        let sim = SimEnvConfig {
            seed: args.seed.wrapping_add(u64::from(i)),
            latency_model: LatencyModel { base_ms: args.latency_ms, lognormal_sigma: args.latency_sigma },
            fault_model: FaultModel { crash_per_step_prob: args.crash_prob, ..FaultModel::default() },
            geometry,
            ..SimEnvConfig::default()
        };
        let cfg = ManagerConfig {
            backend: BackendConfig::Sim(sim),
            geometry,
            ..ManagerConfig::new(ReplicaId::new("local", i))
        };
        cfg.validate()?;
        let backend = SimBackend::new(cfg.sim_config())?;
        let m = StateManager::launch(cfg, Arc::new(backend), natives.clone(), Arc::new(NullSink), Launch::Fresh)
            .await
            .map_err(|e| e.to_string())?;
        server.register_local(&m).await.map_err(|e| e.to_string())?;
        managers.push(m);
    }
    tracing::info!(replicas = managers.len(), "fleet ready");
    let result = serve(listener, server_router(server.clone()), until_ctrl_c()).await;
    server.shutdown();
    for m in &managers {
        m.shutdown();
    }
    result.map_err(|e| e.to_string())
}

pub fn validate_tasks(dir: &Path) -> Result<(), String> {
    let natives = EvaluatorRegistry::with_stock_natives();
    let files = task_files(dir).map_err(|e| e.to_string())?;
    let mut bad = 0;
    for f in &files {
        match load_task(f, &natives) {
            Ok(spec) => println!("ok       {} ({})", f.display(), spec.task_id),
            Err(e) => {
                bad += 1;
                println!("invalid  {e}");
            }
        }
    }
    if bad == 0 {
        if let Err(e) = TaskRegistry::load_dir(dir, &natives) {
            println!("invalid  {e}");
            bad += 1;
        }
    }
    if bad > 0 {
        return Err(format!("{bad} of {} task files invalid", files.len()));
    }
    println!("{} task files valid", files.len());
    Ok(())
}
