//! Desk-scale experiments against in-process sim fleets: throughput and
//! latency sweeps, full-crash recovery, data-generation rate, chaos runs and
//! the non-blocking check on `async_step`.

mod driver;
mod stats;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use crate::data_server::{percentile, DataServer, ServerConfig, StepLedger, TrajectoryStore};
use crate::env_backend::{DurationRange, FaultModel, LatencyModel, SimBackend, SimEnvConfig};
use crate::protocol::messages::{EpisodeStatus, StepItem, TrajectoryFilter};
use crate::protocol::{EngineError, ErrorCode, Geometry, ReplicaId};
use crate::state_manager::{BackendConfig, Launch, ManagerConfig, NullSink, StateManager};
use crate::task_flow::{ConfigureStep, EvaluatorRegistry, EvaluatorSpec, TaskRegistry, TaskSpec};

pub use driver::{rollout, Policy, PolicyKind, RandomPolicy, RolloutOptions, RolloutReport, ScriptedPolicy, Stop};
pub use stats::{LinearFit, Stat};

pub const BENCH_TASK_ID: &str = "bench-grid";

/// Screens small enough that rendering stays cheap next to the step latency.
pub const BENCH_GEOMETRY: Geometry = Geometry { width: 160, height: 96 };

fn err(detail: impl Into<String>) -> EngineError {
    EngineError::new(ErrorCode::MalformedMessage, detail)
}

/// Seeded grid that passes once the top-left cell holds 5.
pub fn bench_task(step_limit: u32) -> TaskSpec {
    TaskSpec {
        task_id: BENCH_TASK_ID.into(),
        domain: "daily".into(),
        instruction: "Type a 5 into the top-left cell".into(),
        configure_steps: vec![ConfigureStep::Seed { value: 17 }, ConfigureStep::SetCell { row: 0, col: 0, value: 0 }],
        step_limit,
        early_stop: false,
        evaluator: EvaluatorSpec::CellEquals { row: 0, col: 0, value: 5 },
    }
}

pub fn fixed_latency_sim(latency_ms: f64, seed: u64) -> SimEnvConfig {
    SimEnvConfig {
        seed,
        latency_model: LatencyModel { base_ms: latency_ms, lognormal_sigma: 0.0 },
        geometry: BENCH_GEOMETRY,
        ..SimEnvConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct FleetOptions {
    pub replicas: u32,
    /// Template; replica `i` runs with seed `sim.seed + i`.
    pub sim: SimEnvConfig,
    pub launch: Launch,
    pub watchdog_interval_ms: u64,
    pub step_timeout_ms: u64,
    pub recovery_backoff_ms: Vec<u64>,
    pub server: ServerConfig,
}

impl FleetOptions {
    pub fn new(replicas: u32, sim: SimEnvConfig) -> Self {
        FleetOptions {
            replicas,
            sim,
            launch: Launch::Fresh,
            watchdog_interval_ms: 100,
            step_timeout_ms: 5000,
            recovery_backoff_ms: vec![100, 200, 400],
            server: ServerConfig::default(),
        }
    }
}

/// Managers and a data server sharing one process, with a throwaway store.
pub struct LocalFleet {
    pub server: DataServer,
    pub managers: Vec<StateManager>,
    _store: tempfile::TempDir,
}

impl LocalFleet {
    pub async fn start(opts: &FleetOptions, tasks: Vec<TaskSpec>) -> Result<Self, EngineError> {
        let dir = tempfile::tempdir().map_err(|e| err(format!("temp store: {e}")))?;
        let store = TrajectoryStore::open(dir.path()).map_err(|e| err(e.to_string()))?;
        let tasks = TaskRegistry::from_specs(tasks).map_err(|e| err(e.to_string()))?;
        let server = DataServer::new(opts.server.clone(), tasks, store);
        let natives = Arc::new(EvaluatorRegistry::with_stock_natives());
        let mut managers = Vec::with_capacity(opts.replicas as usize);
        for i in 0..opts.replicas {
            let sim = SimEnvConfig { seed: opts.sim.seed.wrapping_add(u64::from(i)), ..opts.sim.clone() };
            let config = ManagerConfig {
                watchdog_interval_ms: opts.watchdog_interval_ms,
                step_timeout_ms: opts.step_timeout_ms,
                recovery_backoff_ms: opts.recovery_backoff_ms.clone(),
                geometry: sim.geometry,
                backend: BackendConfig::Sim(sim),
                ..ManagerConfig::new(ReplicaId::new("bench", i))
            };
            config.validate().map_err(err)?;
            let backend = SimBackend::new(config.sim_config()).map_err(err)?;
            let manager =
                StateManager::launch(config, Arc::new(backend), natives.clone(), Arc::new(NullSink), opts.launch)
                    .await?;
            managers.push(manager);
        }
        for m in &managers {
            server.register_local(m).await?;
        }
        Ok(LocalFleet { server, managers, _store: dir })
    }

    pub fn shutdown(&self) {
        self.server.shutdown();
        for m in &self.managers {
            m.shutdown();
        }
    }
}

impl Drop for LocalFleet {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn default_counts() -> Vec<u32> {
    vec![8, 16, 32, 64]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub replica_counts: Vec<u32>,
    pub episode_steps: u32,
    pub sim: SimEnvConfig,
    pub policy: PolicyKind,
    pub warmup_s: f64,
    pub duration_s: f64,
    pub repetitions: u32,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            replica_counts: default_counts(),
            episode_steps: 15,
            sim: fixed_latency_sim(50.0, 0),
            policy: PolicyKind::Random,
            warmup_s: 0.5,
            duration_s: 2.0,
            repetitions: 10,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.replica_counts.is_empty() || self.replica_counts[0] == 0 {
            return Err("replica_counts must be non-empty and positive".into());
        }
        if self.replica_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err("replica_counts must be strictly increasing".into());
        }
        if self.repetitions == 0 || self.episode_steps == 0 {
            return Err("repetitions and episode_steps must be positive".into());
        }
        if !(self.duration_s > 0.0) || !(self.warmup_s >= 0.0) {
            return Err("duration_s must be positive and warmup_s non-negative".into());
        }
        self.sim.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepPoint {
    pub n: u32,
    pub steps_per_sec: Stat,
    /// Submit-to-delivery time seen by the rollout loop.
    pub round_trip_ms: Stat,
    pub p95_round_trip_ms: Stat,
    /// Backend time as reported by the managers.
    pub manager_latency_ms: Stat,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub fit: LinearFit,
}

impl SweepResult {
    pub fn point(&self, n: u32) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.n == n)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "n,steps_per_sec_mean,steps_per_sec_std,round_trip_ms_mean,round_trip_ms_std,\
             p95_round_trip_ms_mean,manager_latency_ms_mean,manager_latency_ms_std,repetitions,errors\n",
        );
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{},{}",
                p.n,
                p.steps_per_sec.mean,
                p.steps_per_sec.std,
                p.round_trip_ms.mean,
                p.round_trip_ms.std,
                p.p95_round_trip_ms.mean,
                p.manager_latency_ms.mean,
                p.manager_latency_ms.std,
                p.steps_per_sec.n,
                p.errors.len()
            );
        }
        out
    }
}

struct Sample {
    steps_per_sec: f64,
    round_trip_ms: f64,
    p95_round_trip_ms: f64,
    manager_latency_ms: f64,
}

async fn measure_point(cfg: &SweepConfig, n: u32, rep: u32) -> Result<Sample, String> {
    let seed = cfg.seed.wrapping_add(u64::from(rep) * 100_003).wrapping_add(u64::from(n));
    let sim = SimEnvConfig { seed, ..cfg.sim.clone() };
    let fleet = LocalFleet::start(&FleetOptions::new(n, sim), vec![bench_task(cfg.episode_steps)])
        .await
        .map_err(|e| e.to_string())?;
    let stop = Arc::new(AtomicBool::new(false));
    let server = fleet.server.clone();
    let mut policy = cfg.policy.build(seed, cfg.sim.geometry);
    let opts = RolloutOptions::new(vec![BENCH_TASK_ID.into()], Stop::Flag(stop.clone()));
    let driver = tokio::spawn(async move { rollout(&server, policy.as_mut(), opts).await });

    tokio::time::sleep(Duration::from_secs_f64(cfg.warmup_s)).await;
    let (c0, t0) = (fleet.server.counters(), Instant::now());
    tokio::time::sleep(Duration::from_secs_f64(cfg.duration_s)).await;
    let (c1, t1) = (fleet.server.counters(), Instant::now());
    stop.store(true, Ordering::Relaxed);
    let report = driver.await.map_err(|e| e.to_string())?;
    fleet.shutdown();

    if let Some(e) = report.exceptions.first() {
        return Err(e.clone());
    }
    let steps = (c1.steps_total - c0.steps_total) as f64;
    if steps == 0.0 {
        return Err(format!("no steps completed at N={n}"));
    }
    let mut rtts: Vec<f64> =
        report.round_trips.iter().filter(|(at, _)| *at >= t0 && *at <= t1).map(|(_, ms)| *ms).collect();
    rtts.sort_by(f64::total_cmp);
    Ok(Sample {
        steps_per_sec: steps / t1.duration_since(t0).as_secs_f64(),
        round_trip_ms: Stat::of(&rtts).mean,
        p95_round_trip_ms: percentile(&rtts, 0.95),
        manager_latency_ms: (c1.latency_ms_total - c0.latency_ms_total) / steps,
    })
}

async fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult, String> {
    cfg.validate()?;
    let mut points = Vec::new();
    for &n in &cfg.replica_counts {
        let mut samples = Vec::new();
        let mut errors = Vec::new();
        for rep in 0..cfg.repetitions {
            match measure_point(cfg, n, rep).await {
                Ok(s) => samples.push(s),
                Err(e) => {
                    tracing::warn!(n, rep, "sweep point failed: {e}");
                    errors.push(e);
                }
            }
        }
        let col = |f: fn(&Sample) -> f64| Stat::of(&samples.iter().map(f).collect::<Vec<_>>());
        points.push(SweepPoint {
            n,
            steps_per_sec: col(|s| s.steps_per_sec),
            round_trip_ms: col(|s| s.round_trip_ms),
            p95_round_trip_ms: col(|s| s.p95_round_trip_ms),
            manager_latency_ms: col(|s| s.manager_latency_ms),
            errors,
        });
    }
    let fit_points: Vec<(f64, f64)> =
        points.iter().filter(|p| p.steps_per_sec.n > 0).map(|p| (f64::from(p.n), p.steps_per_sec.mean)).collect();
    Ok(SweepResult { fit: LinearFit::of(&fit_points), points })
}

/// Saturates each fleet size with the rollout loop and fits a line through
/// steady-state steps/sec.
pub async fn run_throughput_sweep(cfg: &SweepConfig) -> Result<SweepResult, String> {
    run_sweep(cfg).await
}

/// Same measurement as the throughput sweep, read for per-step latency.
pub async fn run_latency_sweep(cfg: &SweepConfig) -> Result<SweepResult, String> {
    run_sweep(cfg).await
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    pub replicas: u32,
    pub recovery_duration_ms: DurationRange,
    pub recovery_backoff_ms: Vec<u64>,
    pub watchdog_interval_ms: u64,
    pub sample_interval_ms: u64,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            replicas: 64,
            recovery_duration_ms: DurationRange { min: 500.0, max: 1500.0 },
            recovery_backoff_ms: vec![100],
            watchdog_interval_ms: 100,
            sample_interval_ms: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RecoveryResult {
    pub replicas: u32,
    /// (ms since launch, healthy replicas) as the data server reports them.
    pub series: Vec<(u64, usize)>,
    pub full_recovery_ms: Option<u64>,
}

impl RecoveryResult {
    pub fn monotone(&self) -> bool {
        self.series.windows(2).all(|w| w[0].1 <= w[1].1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_ms,healthy\n");
        for (t, h) in &self.series {
            let _ = writeln!(out, "{t},{h}");
        }
        out
    }
}

/// Starts every manager crashed and samples the healthy count until all
/// have recovered or ten maximum recovery durations have passed.
pub async fn run_recovery_experiment(cfg: &RecoveryConfig) -> Result<RecoveryResult, String> {
    let started = Instant::now();
    let sim = SimEnvConfig {
        seed: cfg.seed,
        fault_model: FaultModel { recovery_duration_ms: cfg.recovery_duration_ms, ..FaultModel::default() },
        ..fixed_latency_sim(50.0, cfg.seed)
    };
    let opts = FleetOptions {
        launch: Launch::Crashed,
        watchdog_interval_ms: cfg.watchdog_interval_ms,
        recovery_backoff_ms: cfg.recovery_backoff_ms.clone(),
        server: ServerConfig {
            watchdog_interval_ms: cfg.watchdog_interval_ms,
            health_poll_interval_ms: cfg.sample_interval_ms.min(cfg.watchdog_interval_ms),
            ..ServerConfig::default()
        },
        ..FleetOptions::new(cfg.replicas, sim)
    };
    let fleet = LocalFleet::start(&opts, vec![bench_task(15)]).await.map_err(|e| e.to_string())?;
    let limit = Duration::from_secs_f64(10.0 * cfg.recovery_duration_ms.max.max(1.0) / 1000.0);
    let mut result = RecoveryResult { replicas: cfg.replicas, ..RecoveryResult::default() };
    let mut ticker = tokio::time::interval(Duration::from_millis(cfg.sample_interval_ms.max(1)));
    loop {
        ticker.tick().await;
        let elapsed = started.elapsed();
        let healthy = fleet.server.server_metrics().healthy_replicas;
        result.series.push((elapsed.as_millis() as u64, healthy));
        if healthy == cfg.replicas as usize {
            result.full_recovery_ms = Some(elapsed.as_millis() as u64);
            break;
        }
        if elapsed > limit {
            break;
        }
    }
    fleet.shutdown();
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub replicas: u32,
    pub episode_steps: u32,
    pub step_latency_ms: f64,
    /// Per-step overhead assumed by the prediction.
    pub overhead_ms: f64,
    pub warmup_s: f64,
    pub duration_s: f64,
    pub policy: PolicyKind,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            replicas: 64,
            episode_steps: 15,
            step_latency_ms: 50.0,
            overhead_ms: 0.0,
            warmup_s: 2.0,
            duration_s: 10.0,
            policy: PolicyKind::Random,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DatagenResult {
    pub replicas: u32,
    pub episodes_in_window: u64,
    pub measured_per_min: f64,
    pub predicted_per_min: f64,
    pub relative_error: f64,
}

impl DatagenResult {
    pub fn to_csv(&self) -> String {
        format!(
            "replicas,episodes_in_window,measured_per_min,predicted_per_min,relative_error\n{},{},{:.3},{:.3},{:.5}\n",
            self.replicas, self.episodes_in_window, self.measured_per_min, self.predicted_per_min, self.relative_error
        )
    }
}

/// Trajectories per minute for `replicas` that each finish one episode every
/// `episode_steps` steps of `step_ms`.
pub fn predicted_trajectories_per_min(replicas: u32, episode_steps: u32, step_ms: f64) -> f64 {
    if replicas == 0 {
        return 0.0;
    }
    f64::from(replicas) * 60_000.0 / (f64::from(episode_steps) * step_ms)
}

/// Per-step time implied by a fleet size, an observed trajectory rate and
/// an episode length.
pub fn implied_step_ms(replicas: u32, trajectories_per_min: f64, turns: u32) -> f64 {
    60_000.0 * f64::from(replicas) / (trajectories_per_min * f64::from(turns))
}

pub async fn run_datagen_experiment(cfg: &DatagenConfig) -> Result<DatagenResult, String> {
    let predicted = predicted_trajectories_per_min(cfg.replicas, cfg.episode_steps, cfg.step_latency_ms + cfg.overhead_ms);
    if cfg.replicas == 0 {
        return Ok(DatagenResult::default());
    }
    let sim = fixed_latency_sim(cfg.step_latency_ms, cfg.seed);
    let fleet = LocalFleet::start(&FleetOptions::new(cfg.replicas, sim), vec![bench_task(cfg.episode_steps)])
        .await
        .map_err(|e| e.to_string())?;
    let stop = Arc::new(AtomicBool::new(false));
    let server = fleet.server.clone();
    let mut policy = cfg.policy.build(cfg.seed, BENCH_GEOMETRY);
    let mut opts = RolloutOptions::new(vec![BENCH_TASK_ID.into()], Stop::Flag(stop.clone()));
    opts.stagger = Duration::from_secs_f64(f64::from(cfg.episode_steps) * cfg.step_latency_ms / 1000.0);
    let driver = tokio::spawn(async move { rollout(&server, policy.as_mut(), opts).await });

    tokio::time::sleep(Duration::from_secs_f64(cfg.warmup_s)).await;
    let (c0, t0) = (fleet.server.counters(), Instant::now());
    tokio::time::sleep(Duration::from_secs_f64(cfg.duration_s)).await;
    let (c1, t1) = (fleet.server.counters(), Instant::now());
    stop.store(true, Ordering::Relaxed);
    let report = driver.await.map_err(|e| e.to_string())?;
    fleet.shutdown();
    if let Some(e) = report.exceptions.first() {
        return Err(e.clone());
    }
    let episodes = c1.episodes_closed_total - c0.episodes_closed_total;
    let measured = episodes as f64 * 60.0 / t1.duration_since(t0).as_secs_f64();
    Ok(DatagenResult {
        replicas: cfg.replicas,
        episodes_in_window: episodes,
        measured_per_min: measured,
        predicted_per_min: predicted,
        relative_error: (measured - predicted).abs() / predicted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChaosConfig {
    pub replicas: u32,
    pub crash_per_step_prob: f64,
    pub total_steps: u64,
    pub episode_steps: u32,
    pub step_latency_ms: f64,
    pub recovery_duration_ms: DurationRange,
    pub seed: u64,
}

impl Default for ChaosConfig {
    fn default() -> Self {
        ChaosConfig {
            replicas: 64,
            crash_per_step_prob: 0.01,
            total_steps: 10_000,
            episode_steps: 15,
            step_latency_ms: 50.0,
            recovery_duration_ms: DurationRange { min: 100.0, max: 300.0 },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ChaosResult {
    pub steps_submitted: u64,
    pub ledger: StepLedger,
    pub exceptions: Vec<String>,
    pub failed_items: usize,
    pub aborted_episodes: usize,
    /// Episodes whose step failed yet are not stored as ABORTED.
    pub unflagged: Vec<String>,
    /// ABORTED episodes with no failed step behind them.
    pub unexplained_aborts: Vec<String>,
    pub open_after_drain: usize,
    pub min_healthy: usize,
}

impl ChaosResult {
    /// Every accepted action became one appended result or one per-item
    /// error, and every enqueued observation was delivered.
    pub fn conserved(&self) -> bool {
        let l = &self.ledger;
        l.accepted == l.appended + l.item_errors
            && l.enqueued == l.dequeued
            && l.enqueued == l.appended + l.resets
            && l.accepted == self.steps_submitted
    }

    pub fn to_csv(&self) -> String {
        let l = &self.ledger;
        format!(
            "steps_submitted,accepted,appended,item_errors,resets,enqueued,dequeued,exceptions,aborted,unflagged,min_healthy\n\
             {},{},{},{},{},{},{},{},{},{},{}\n",
            self.steps_submitted,
            l.accepted,
            l.appended,
            l.item_errors,
            l.resets,
            l.enqueued,
            l.dequeued,
            self.exceptions.len(),
            self.aborted_episodes,
            self.unflagged.len(),
            self.min_healthy
        )
    }
}

/// Runs the rollout loop with random replica crashes until `total_steps`
/// actions were submitted, then drains every open episode.
pub async fn run_chaos_experiment(cfg: &ChaosConfig) -> Result<ChaosResult, String> {
    let sim = SimEnvConfig {
        fault_model: FaultModel {
            crash_per_step_prob: cfg.crash_per_step_prob,
            recovery_duration_ms: cfg.recovery_duration_ms,
            ..FaultModel::default()
        },
        ..fixed_latency_sim(cfg.step_latency_ms, cfg.seed)
    };
    let fleet = LocalFleet::start(&FleetOptions::new(cfg.replicas, sim), vec![bench_task(cfg.episode_steps)])
        .await
        .map_err(|e| e.to_string())?;
    let server = fleet.server.clone();
    let sampler = {
        let server = fleet.server.clone();
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = tokio::spawn(async move {
            let mut min = usize::MAX;
            while !flag.load(Ordering::Relaxed) {
                min = min.min(server.server_metrics().healthy_replicas);
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
            min
        });
        (stop, handle)
    };
    let mut policy = RandomPolicy::new(cfg.seed, BENCH_GEOMETRY);
    let mut opts = RolloutOptions::new(vec![BENCH_TASK_ID.into()], Stop::Steps(cfg.total_steps));
    opts.drain = true;
    let report = rollout(&server, &mut policy, opts).await;
    sampler.0.store(true, Ordering::Relaxed);
    let min_healthy = sampler.1.await.unwrap_or(0);

    let aborted: HashSet<String> = server
        .query_trajectories(&TrajectoryFilter { status: Some(EpisodeStatus::Aborted), ..TrajectoryFilter::default() })
        .into_iter()
        .map(|r| r.episode_id)
        .collect();
    let failed: HashSet<String> = report.failed_items.iter().map(|(e, _)| e.clone()).collect();
    let mut unflagged: Vec<String> = failed.difference(&aborted).cloned().collect();
    let mut unexplained: Vec<String> = aborted.difference(&failed).cloned().collect();
    unflagged.sort();
    unexplained.sort();
    let result = ChaosResult {
        steps_submitted: report.steps_submitted,
        ledger: server.ledger(),
        exceptions: report.exceptions,
        failed_items: report.failed_items.len(),
        aborted_episodes: aborted.len(),
        unflagged,
        unexplained_aborts: unexplained,
        open_after_drain: server.store().open_count(),
        min_healthy,
    };
    fleet.shutdown();
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsyncContractConfig {
    pub replicas: u32,
    pub step_latency_ms: f64,
    pub trials: u32,
}

impl Default for AsyncContractConfig {
    fn default() -> Self {
        AsyncContractConfig { replicas: 64, step_latency_ms: 500.0, trials: 100 }
    }
}

/// Times `async_step` over the whole fleet, waiting for each batch to come
/// back before the next trial. Returns one duration per trial.
pub async fn run_async_contract(cfg: &AsyncContractConfig) -> Result<Vec<Duration>, String> {
    let fleet = LocalFleet::start(
        &FleetOptions::new(cfg.replicas, fixed_latency_sim(cfg.step_latency_ms, 0)),
        vec![bench_task(cfg.trials + 1)],
    )
    .await
    .map_err(|e| e.to_string())?;
    let items = fleet.server.batch_reset(&[BENCH_TASK_ID.into()], cfg.replicas as usize, None).await.map_err(|e| e.to_string())?;
    let replicas: Vec<ReplicaId> = items.into_iter().map(|i| i.replica_id).collect();
    let mut pending = replicas.len();
    let mut timings = Vec::with_capacity(cfg.trials as usize);
    for _ in 0..cfg.trials {
        while pending > 0 {
            let got = fleet.server.next_batch(pending, Duration::from_secs_f64(cfg.step_latency_ms / 100.0)).await;
            if got.is_empty() {
                return Err("fleet stopped returning observations".into());
            }
            pending -= got.len();
        }
        let batch: Vec<StepItem> = replicas
            .iter()
            .map(|r| StepItem { replica_id: r.clone(), action: crate::protocol::Action::new(crate::protocol::ActionPayload::Noop) })
            .collect();
        let t = Instant::now();
        let ticket = fleet.server.async_step(batch);
        timings.push(t.elapsed());
        if ticket.resolved.iter().any(|r| r.is_some()) {
            return Err(format!("items rejected on submit: {:?}", ticket.resolved.iter().flatten().next()));
        }
        pending = replicas.len();
    }
    fleet.shutdown();
    Ok(timings)
}

/// Every experiment's settings in one file; missing sections keep defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub throughput: SweepConfig,
    pub latency: SweepConfig,
    pub recovery: RecoveryConfig,
    pub datagen: DatagenConfig,
    pub chaos: ChaosConfig,
    pub async_contract: AsyncContractConfig,
}

pub fn load_bench_config(path: &Path) -> Result<BenchConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}
