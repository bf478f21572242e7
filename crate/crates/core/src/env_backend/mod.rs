//! The seam between a replica manager and the environment it orchestrates,
//! plus a deterministic grid-desktop simulator with latency and fault models.

mod render;
mod sim_state;

use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::protocol::{Action, EngineError, ErrorCode, Geometry, Observation};
use crate::task_flow::{run_evaluator, EvaluatorRegistry, EvaluatorSpec, TaskSpec};

pub use render::{render_png, sim_snapshot};
pub use sim_state::{sim_apply, Grid, SimState, DEFAULT_GRID_COLS, DEFAULT_GRID_ROWS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Liveness {
    Alive,
    Dead,
    /// An operation is stuck inside the environment.
    Unresponsive,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    CrashNow,
    HangNow,
    FlakyRecovery { attempts: u32 },
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("environment crashed: {0}")]
    Crashed(String),
    #[error("environment rejected the request: {0}")]
    Rejected(String),
    #[error("evaluator failed: {0}")]
    Evaluator(String),
}

/// Behavioural contract of one environment replica. An instance is owned by
/// exactly one manager; `inject_fault` and `probe_liveness` may be called
/// concurrently with everything else.
#[async_trait]
pub trait Backend: Send + Sync + 'static {
    async fn create(&self) -> Result<(), BackendError>;
    fn destroy(&self);
    /// Rejects task configurations this backend cannot build, without side effects.
    fn check_task(&self, task: &TaskSpec) -> Result<(), BackendError>;
    async fn restore_initial(&self, task: &TaskSpec) -> Result<(), BackendError>;
    async fn apply(&self, action: &Action) -> Result<(), BackendError>;
    fn snapshot(&self) -> Result<Observation, BackendError>;
    fn probe_liveness(&self) -> Liveness;
    fn evaluate(&self, evaluator: &EvaluatorSpec, natives: &EvaluatorRegistry) -> Result<f64, BackendError>;
    fn inject_fault(&self, fault: FaultKind) -> Result<(), EngineError>;
    fn geometry(&self) -> Geometry;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base_ms: f64,
    #[serde(default)]
    pub lognormal_sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    #[serde(default)]
    pub crash_per_step_prob: f64,
    #[serde(default)]
    pub hang_per_step_prob: f64,
    pub recovery_duration_ms: DurationRange,
    #[serde(default)]
    pub flaky_recovery_fail_prob: f64,
}

impl Default for FaultModel {
    fn default() -> Self {
        FaultModel {
            crash_per_step_prob: 0.0,
            hang_per_step_prob: 0.0,
            recovery_duration_ms: DurationRange { min: 1.0, max: 1.0 },
            flaky_recovery_fail_prob: 0.0,
        }
    }
}

/// Two-state CPU demand of one replica: `burst_cores` with probability
/// `burst_prob`, otherwise `idle_cores`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpuDemandModel {
    pub burst_prob: f64,
    pub burst_cores: f64,
    pub idle_cores: f64,
}

impl Default for CpuDemandModel {
    fn default() -> Self {
        CpuDemandModel { burst_prob: 0.1, burst_cores: 2.0, idle_cores: 0.2 }
    }
}

impl CpuDemandModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if rng.random::<f64>() < self.burst_prob {
            self.burst_cores
        } else {
            self.idle_cores
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEnvConfig {
    #[serde(default)]
    pub seed: u64,
    pub latency_model: LatencyModel,
    #[serde(default)]
    pub fault_model: FaultModel,
    #[serde(default)]
    pub cpu_demand_model: CpuDemandModel,
    #[serde(default)]
    pub geometry: Geometry,
}

impl Default for SimEnvConfig {
    fn default() -> Self {
        SimEnvConfig {
            seed: 0,
            latency_model: LatencyModel { base_ms: 50.0, lognormal_sigma: 0.0 },
            fault_model: FaultModel::default(),
            cpu_demand_model: CpuDemandModel::default(),
            geometry: Geometry::default(),
        }
    }
}

impl SimEnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(format!("{name} = {p} is not a probability"))
            }
        };
        let f = &self.fault_model;
        prob("crash_per_step_prob", f.crash_per_step_prob)?;
        prob("hang_per_step_prob", f.hang_per_step_prob)?;
        prob("flaky_recovery_fail_prob", f.flaky_recovery_fail_prob)?;
        prob("burst_prob", self.cpu_demand_model.burst_prob)?;
        if !(self.latency_model.base_ms > 0.0) {
            return Err("latency base_ms must be positive".into());
        }
        if !(self.latency_model.lognormal_sigma >= 0.0) {
            return Err("lognormal_sigma must be non-negative".into());
        }
        let r = f.recovery_duration_ms;
        if !(r.min > 0.0 && r.min <= r.max) {
            return Err(format!("recovery_duration_ms needs 0 < min <= max (got {} .. {})", r.min, r.max));
        }
        if self.geometry.width == 0 || self.geometry.height == 0 {
            return Err("geometry must be positive".into());
        }
        Ok(())
    }
}

/// One latency sample in milliseconds: lognormal with median `base_ms`.
pub fn sim_step_latency<R: Rng + ?Sized>(model: &LatencyModel, rng: &mut R) -> f64 {
    if model.lognormal_sigma == 0.0 {
        return model.base_ms;
    }
    LogNormal::new(model.base_ms.ln(), model.lognormal_sigma)
        .expect("validated latency model")
        .sample(rng)
}

fn ms(value: f64) -> Duration {
    Duration::from_secs_f64(value.max(0.0) / 1000.0)
}

struct SimInner {
    created: bool,
    dead: bool,
    hang_next: bool,
    hanging: bool,
    flaky_remaining: u32,
    state: Option<SimState>,
    rng: ChaCha8Rng,
}

/// In-process simulated replica. The environment state itself is
/// deterministic; the latency and fault draws come from a separate stream
/// seeded by `SimEnvConfig::seed`.
pub struct SimBackend {
    config: SimEnvConfig,
    inner: Mutex<SimInner>,
}

impl SimBackend {
    pub fn new(config: SimEnvConfig) -> Result<Self, String> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(SimBackend {
            config,
            inner: Mutex::new(SimInner {
                created: false,
                dead: false,
                hang_next: false,
                hanging: false,
                flaky_remaining: 0,
                state: None,
                rng,
            }),
        })
    }

    pub fn config(&self) -> &SimEnvConfig {
        &self.config
    }

    /// Copy of the current environment state, if one is loaded.
    pub fn state(&self) -> Option<SimState> {
        self.inner.lock().state.clone()
    }

    fn consume_flaky(inner: &mut SimInner, fail_prob: f64) -> bool {
        if inner.flaky_remaining > 0 {
            inner.flaky_remaining -= 1;
            return true;
        }
        fail_prob > 0.0 && inner.rng.random::<f64>() < fail_prob
    }
}

#[async_trait]
impl Backend for SimBackend {
    async fn create(&self) -> Result<(), BackendError> {
        let delay = {
            let mut inner = self.inner.lock();
            let r = self.config.fault_model.recovery_duration_ms;
            if r.max > r.min {
                inner.rng.random_range(r.min..=r.max)
            } else {
                r.min
            }
        };
        tokio::time::sleep(ms(delay)).await;
        let mut inner = self.inner.lock();
        if Self::consume_flaky(&mut inner, self.config.fault_model.flaky_recovery_fail_prob) {
            return Err(BackendError::Crashed("environment failed to start".into()));
        }
        inner.created = true;
        inner.dead = false;
        inner.hang_next = false;
        inner.hanging = false;
        inner.state = None;
        Ok(())
    }

    fn destroy(&self) {
        let mut inner = self.inner.lock();
        inner.created = false;
        inner.hanging = false;
        inner.hang_next = false;
        inner.state = None;
    }

    fn check_task(&self, task: &TaskSpec) -> Result<(), BackendError> {
        SimState::from_task(task).map(drop).map_err(BackendError::Rejected)
    }

    async fn restore_initial(&self, task: &TaskSpec) -> Result<(), BackendError> {
        let mut inner = self.inner.lock();
        if !inner.created || inner.dead {
            return Err(BackendError::Crashed("environment is not running".into()));
        }
        if Self::consume_flaky(&mut inner, self.config.fault_model.flaky_recovery_fail_prob) {
            return Err(BackendError::Crashed("environment failed to restore".into()));
        }
        inner.state = Some(SimState::from_task(task).map_err(BackendError::Rejected)?);
        Ok(())
    }

    async fn apply(&self, action: &Action) -> Result<(), BackendError> {
        let (latency, crash, hang) = {
            let mut inner = self.inner.lock();
            if !inner.created || inner.dead {
                return Err(BackendError::Crashed("environment is not running".into()));
            }
            if inner.state.is_none() {
                return Err(BackendError::Rejected("no task loaded".into()));
            }
            let f = &self.config.fault_model;
            let latency = sim_step_latency(&self.config.latency_model, &mut inner.rng);
            let crash = f.crash_per_step_prob > 0.0 && inner.rng.random::<f64>() < f.crash_per_step_prob;
            let hang = std::mem::take(&mut inner.hang_next)
                || (f.hang_per_step_prob > 0.0 && inner.rng.random::<f64>() < f.hang_per_step_prob);
            if hang {
                inner.hanging = true;
            }
            (latency, crash, hang)
        };
        if hang {
            // Stays stuck until the caller gives up; only re-creation clears it.
            std::future::pending::<()>().await;
        }
        tokio::time::sleep(ms(latency)).await;
        let mut inner = self.inner.lock();
        if !inner.created || inner.dead {
            return Err(BackendError::Crashed("environment died during the step".into()));
        }
        if crash {
            inner.dead = true;
            return Err(BackendError::Crashed("environment crashed during the step".into()));
        }
        let geometry = self.config.geometry;
        let state = inner.state.as_mut().expect("checked above");
        *state = sim_apply(state, action, geometry);
        Ok(())
    }

    fn snapshot(&self) -> Result<Observation, BackendError> {
        let inner = self.inner.lock();
        if !inner.created || inner.dead {
            return Err(BackendError::Crashed("environment is not running".into()));
        }
        let state = inner.state.as_ref().ok_or_else(|| BackendError::Rejected("no task loaded".into()))?;
        Ok(sim_snapshot(state, self.config.geometry))
    }

    fn probe_liveness(&self) -> Liveness {
        let inner = self.inner.lock();
        if inner.hanging {
            Liveness::Unresponsive
        } else if !inner.created || inner.dead {
            Liveness::Dead
        } else {
            Liveness::Alive
        }
    }

    fn evaluate(&self, evaluator: &EvaluatorSpec, natives: &EvaluatorRegistry) -> Result<f64, BackendError> {
        let inner = self.inner.lock();
        if !inner.created || inner.dead {
            return Err(BackendError::Crashed("environment is not running".into()));
        }
        let state = inner.state.as_ref().ok_or_else(|| BackendError::Rejected("no task loaded".into()))?;
        run_evaluator(evaluator, state, natives).map_err(|e| BackendError::Evaluator(e.to_string()))
    }

    fn inject_fault(&self, fault: FaultKind) -> Result<(), EngineError> {
        let mut inner = self.inner.lock();
        if !inner.created {
            return Err(EngineError::new(ErrorCode::UnknownReplica, "backend is destroyed"));
        }
        match fault {
            FaultKind::CrashNow => inner.dead = true,
            FaultKind::HangNow => inner.hang_next = true,
            FaultKind::FlakyRecovery { attempts } => inner.flaky_remaining += attempts,
        }
        Ok(())
    }

    fn geometry(&self) -> Geometry {
        self.config.geometry
    }
}
