use std::future::Future;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use tokio::sync::watch;
use tokio::time::Instant;

use super::events::{EventSink, ManagerEvent};
use super::{HealthReport, ManagerConfig, ReplicaState};
use crate::env_backend::{Backend, BackendError, FaultKind, Liveness, SimBackend};
use crate::protocol::messages::ConfigureAck;
use crate::protocol::{validate_action, Action, EngineError, ErrorCode, Observation, ReplicaId, StepResult};
use crate::task_flow::{EvaluatorRegistry, TaskSpec};

/// Scores at or above this count as a pass.
const PASS_SCORE: f64 = 1.0 - 1e-9;

/// How a manager comes up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Launch {
    /// Create the backend before returning; UNCONFIGURED afterwards.
    Fresh,
    /// Start in CRASHED and let the watchdog bring the replica back.
    Crashed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Episode {
    None,
    Active { turn: u64, done: bool },
    /// Lost to a crash; a reset is needed before stepping again.
    Aborted,
}

struct Core {
    state: ReplicaState,
    task: Option<Arc<TaskSpec>>,
    episode: Episode,
    consecutive_failures: u32,
    episodes_completed: u64,
    last_heartbeat: u64,
    op_started: Option<Instant>,
    /// Bumped on every crash; operations started under an older value are void.
    generation: u64,
    crash_code: ErrorCode,
    recovery_scheduled: bool,
}

struct Inner {
    config: ManagerConfig,
    backend: Arc<dyn Backend>,
    natives: Arc<EvaluatorRegistry>,
    sink: Arc<dyn EventSink>,
    core: Mutex<Core>,
    crashes: watch::Sender<u64>,
    started: Instant,
    epoch_ms: u64,
    stopped: AtomicBool,
}

/// Handle to one replica manager. Clones share the same replica.
#[derive(Clone)]
pub struct StateManager {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for StateManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateManager").field("replica_id", &self.inner.config.replica_id).finish()
    }
}

fn err(code: ErrorCode, detail: impl Into<String>) -> EngineError {
    EngineError::new(code, detail)
}

impl StateManager {
    /// Builds the configured backend and brings the manager up.
    pub async fn start(
        config: ManagerConfig,
        natives: Arc<EvaluatorRegistry>,
        sink: Arc<dyn EventSink>,
    ) -> Result<Self, EngineError> {
        config.validate().map_err(|d| err(ErrorCode::MalformedMessage, d))?;
        let backend = SimBackend::new(config.sim_config()).map_err(|d| err(ErrorCode::MalformedMessage, d))?;
        Self::launch(config, Arc::new(backend), natives, sink, Launch::Fresh).await
    }

    pub async fn launch(
        config: ManagerConfig,
        backend: Arc<dyn Backend>,
        natives: Arc<EvaluatorRegistry>,
        sink: Arc<dyn EventSink>,
        launch: Launch,
    ) -> Result<Self, EngineError> {
        config.validate().map_err(|d| err(ErrorCode::MalformedMessage, d))?;
        let epoch_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        let created = match launch {
            Launch::Fresh => match backend.create().await {
                Ok(()) => true,
                Err(e) => {
                    tracing::warn!(replica = %config.replica_id, "initial create failed: {e}");
                    false
                }
            },
            Launch::Crashed => false,
        };
        let state = if created { ReplicaState::Unconfigured } else { ReplicaState::Crashed };
        let inner = Arc::new(Inner {
            core: Mutex::new(Core {
                state,
                task: None,
                episode: Episode::None,
                consecutive_failures: u32::from(!created),
                episodes_completed: 0,
                last_heartbeat: epoch_ms,
                op_started: None,
                generation: 0,
                crash_code: ErrorCode::ReplicaCrashed,
                recovery_scheduled: false,
            }),
            config,
            backend,
            natives,
            sink,
            crashes: watch::Sender::new(0),
            started: Instant::now(),
            epoch_ms,
            stopped: AtomicBool::new(false),
        });
        let interval = Duration::from_millis(inner.config.watchdog_interval_ms);
        tokio::spawn(watchdog_loop(Arc::downgrade(&inner), interval));
        Ok(StateManager { inner })
    }

    pub fn replica_id(&self) -> &ReplicaId {
        &self.inner.config.replica_id
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.inner.config
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.inner.backend
    }

    pub fn state(&self) -> ReplicaState {
        self.inner.core.lock().state
    }

    /// Stops the watchdog and tears the backend down.
    pub fn shutdown(&self) {
        self.inner.stopped.store(true, Ordering::SeqCst);
        self.inner.backend.destroy();
    }

    fn now_ms(&self) -> u64 {
        self.inner.epoch_ms + self.inner.started.elapsed().as_millis() as u64
    }

    fn step_timeout(&self) -> Duration {
        Duration::from_millis(self.inner.config.step_timeout_ms)
    }

    fn transition(&self, core: &mut Core, to: ReplicaState, reason: &str) {
        let from = core.state;
        debug_assert!(from.can_transition(to), "illegal transition {from} -> {to}");
        if !from.can_transition(to) {
            tracing::error!(replica = %self.inner.config.replica_id, "illegal transition {from} -> {to}");
        }
        core.state = to;
        self.inner.sink.emit(&ManagerEvent {
            event: "transition",
            replica_id: self.inner.config.replica_id.clone(),
            from,
            to,
            reason: reason.to_string(),
            at_ms: self.now_ms(),
        });
    }

    /// Rejections shared by every public operation that needs READY.
    fn require_ready(core: &Core) -> Result<(), EngineError> {
        match core.state {
            ReplicaState::Ready => Ok(()),
            ReplicaState::Busy | ReplicaState::Evaluating | ReplicaState::Configuring => {
                Err(err(ErrorCode::ReplicaBusy, format!("replica is {}", core.state)))
            }
            ReplicaState::Crashed => Err(err(ErrorCode::ReplicaCrashed, "replica crashed")),
            ReplicaState::Recovering => Err(err(ErrorCode::ReplicaRecovering, "replica is recovering")),
            ReplicaState::Unconfigured => Err(err(ErrorCode::UnknownTask, "no task configured")),
        }
    }

    fn begin(&self, core: &mut Core, to: ReplicaState, what: &str) -> u64 {
        self.transition(core, to, what);
        core.op_started = Some(Instant::now());
        core.generation
    }

    /// Commits a finished operation, unless a crash voided it meanwhile.
    fn finish(&self, generation: u64, what: &str, commit: impl FnOnce(&mut Core)) -> Result<(), EngineError> {
        let mut core = self.inner.core.lock();
        if core.generation != generation {
            return Err(err(core.crash_code, format!("replica crashed during {what}")));
        }
        commit(&mut core);
        core.consecutive_failures = 0;
        core.op_started = None;
        self.transition(&mut core, ReplicaState::Ready, what);
        Ok(())
    }

    async fn crash_signal(&self, generation: u64) -> ErrorCode {
        let mut rx = self.inner.crashes.subscribe();
        let _ = rx.wait_for(|g| *g != generation).await;
        self.inner.core.lock().crash_code
    }

    /// Runs backend work bounded by the step timeout and cut short by a crash.
    async fn guarded<T>(
        &self,
        generation: u64,
        what: &str,
        work: impl Future<Output = Result<T, BackendError>>,
    ) -> Result<T, EngineError> {
        tokio::select! {
            biased;
            code = self.crash_signal(generation) => Err(err(code, format!("replica crashed during {what}"))),
            outcome = tokio::time::timeout(self.step_timeout(), work) => match outcome {
                Ok(Ok(value)) => Ok(value),
                Ok(Err(e)) => Err(self.backend_failure(generation, what, e)),
                Err(_) => {
                    let detail = format!("{what} exceeded step_timeout_ms ({})", self.inner.config.step_timeout_ms);
                    self.crash(Some(generation), ErrorCode::Timeout, &detail);
                    Err(err(ErrorCode::Timeout, detail))
                }
            },
        }
    }

    fn backend_failure(&self, generation: u64, what: &str, e: BackendError) -> EngineError {
        let detail = format!("{what}: {e}");
        self.crash(Some(generation), ErrorCode::ReplicaCrashed, &detail);
        err(ErrorCode::ReplicaCrashed, detail)
    }

    /// Moves to CRASHED and schedules recovery. `generation` limits the crash
    /// to the operation that observed the fault.
    fn crash(&self, generation: Option<u64>, code: ErrorCode, reason: &str) -> bool {
        {
            let mut core = self.inner.core.lock();
            if generation.is_some_and(|g| g != core.generation) || core.state.is_down() {
                return false;
            }
            self.transition(&mut core, ReplicaState::Crashed, reason);
            core.generation += 1;
            core.crash_code = code;
            core.consecutive_failures += 1;
            core.op_started = None;
            if matches!(core.episode, Episode::Active { .. }) {
                core.episode = Episode::Aborted;
            }
            self.inner.crashes.send_replace(core.generation);
        }
        self.schedule_recovery();
        true
    }

    fn schedule_recovery(&self) {
        {
            let mut core = self.inner.core.lock();
            if core.recovery_scheduled || core.state != ReplicaState::Crashed {
                return;
            }
            core.recovery_scheduled = true;
        }
        tokio::spawn(self.clone().recover());
    }

    async fn recover(self) {
        let task = {
            let mut core = self.inner.core.lock();
            if core.state != ReplicaState::Crashed {
                core.recovery_scheduled = false;
                return;
            }
            self.transition(&mut core, ReplicaState::Recovering, "recovery started");
            core.task.clone()
        };
        let backoff = &self.inner.config.recovery_backoff_ms;
        let mut attempt = 0usize;
        loop {
            if self.inner.stopped.load(Ordering::SeqCst) {
                return;
            }
            self.inner.backend.destroy();
            let result = async {
                self.inner.backend.create().await?;
                if let Some(task) = &task {
                    self.inner.backend.restore_initial(task).await?;
                }
                Ok::<(), BackendError>(())
            }
            .await;
            match result {
                Ok(()) => break,
                Err(e) => {
                    tracing::warn!(replica = %self.inner.config.replica_id, attempt, "recovery attempt failed: {e}");
                    self.inner.core.lock().consecutive_failures += 1;
                }
            }
            let wait = backoff[attempt.min(backoff.len() - 1)];
            tokio::time::sleep(Duration::from_millis(wait)).await;
            attempt += 1;
        }
        let mut core = self.inner.core.lock();
        let to = if core.task.is_some() { ReplicaState::Ready } else { ReplicaState::Unconfigured };
        self.transition(&mut core, to, "recovery finished");
        core.recovery_scheduled = false;
        core.last_heartbeat = self.now_ms();
    }

    /// One liveness check; returns the new state when it caused a transition.
    pub fn watchdog_tick(&self) -> Option<ReplicaState> {
        let verdict = {
            let mut core = self.inner.core.lock();
            match core.state {
                ReplicaState::Recovering => return None,
                ReplicaState::Crashed => None,
                _ => {
                    let overdue = core.op_started.is_some_and(|t| t.elapsed() > self.step_timeout());
                    match self.inner.backend.probe_liveness() {
                        Liveness::Dead => Some((ErrorCode::ReplicaCrashed, "liveness probe failed")),
                        Liveness::Unresponsive => Some((ErrorCode::Timeout, "backend unresponsive")),
                        Liveness::Alive if overdue => Some((ErrorCode::Timeout, "operation exceeded step_timeout_ms")),
                        Liveness::Alive => {
                            core.last_heartbeat = self.now_ms();
                            return None;
                        }
                    }
                }
            }
        };
        match verdict {
            Some((code, reason)) => self.crash(None, code, reason).then_some(ReplicaState::Crashed),
            None => {
                self.schedule_recovery();
                None
            }
        }
    }

    pub async fn configure(&self, spec: TaskSpec) -> Result<ConfigureAck, EngineError> {
        let (generation, spec) = {
            let mut core = self.inner.core.lock();
            let to = match core.state {
                ReplicaState::Unconfigured => ReplicaState::Configuring,
                ReplicaState::Ready => ReplicaState::Busy,
                _ => return Err(Self::require_ready(&core).unwrap_err()),
            };
            spec.check_against(&self.inner.natives)?;
            self.inner.backend.check_task(&spec).map_err(|e| err(ErrorCode::MalformedMessage, e.to_string()))?;
            (self.begin(&mut core, to, "configure"), Arc::new(spec))
        };
        self.guarded(generation, "configure", self.inner.backend.restore_initial(&spec)).await?;
        self.finish(generation, "configure", |core| {
            core.task = Some(spec);
            core.episode = Episode::None;
        })?;
        Ok(ConfigureAck { replica_id: self.inner.config.replica_id.clone(), state: ReplicaState::Ready })
    }

    pub async fn reset(&self) -> Result<Observation, EngineError> {
        let (generation, task) = {
            let mut core = self.inner.core.lock();
            Self::require_ready(&core)?;
            let task = core.task.clone().expect("READY implies a configured task");
            (self.begin(&mut core, ReplicaState::Busy, "reset"), task)
        };
        self.guarded(generation, "reset", self.inner.backend.restore_initial(&task)).await?;
        let observation = self.inner.backend.snapshot().map_err(|e| self.backend_failure(generation, "reset", e))?;
        self.finish(generation, "reset", |core| core.episode = Episode::Active { turn: 0, done: false })?;
        Ok(observation)
    }

    pub async fn step(&self, action: Action) -> Result<StepResult, EngineError> {
        validate_action(&action, self.inner.config.geometry).map_err(|d| err(ErrorCode::MalformedMessage, d))?;
        let (generation, task, turn) = {
            let mut core = self.inner.core.lock();
            Self::require_ready(&core)?;
            let turn = match core.episode {
                Episode::Active { turn, done: false } => turn,
                Episode::Active { done: true, .. } => return Err(err(ErrorCode::EpisodeDone, "episode is over")),
                Episode::None => return Err(err(ErrorCode::EpisodeDone, "no episode in progress; reset first")),
                Episode::Aborted => {
                    return Err(err(ErrorCode::ReplicaCrashed, "episode aborted by recovery; reset to start a new one"))
                }
            };
            let task = core.task.clone().expect("READY implies a configured task");
            (self.begin(&mut core, ReplicaState::Busy, "step"), task, turn)
        };
        let started = Instant::now();
        self.guarded(generation, "step", self.inner.backend.apply(&action)).await?;
        let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        let observation = self.inner.backend.snapshot().map_err(|e| self.backend_failure(generation, "step", e))?;

        let turn = turn + 1;
        let limit_hit = action.is_terminate() || turn >= u64::from(task.step_limit);
        let score = if limit_hit || task.early_stop {
            match self.inner.backend.evaluate(&task.evaluator, &self.inner.natives) {
                Ok(score) => score,
                Err(BackendError::Evaluator(e)) => {
                    tracing::warn!(replica = %self.inner.config.replica_id, "evaluator failed during step: {e}");
                    0.0
                }
                Err(e) => return Err(self.backend_failure(generation, "step", e)),
            }
        } else {
            0.0
        };
        let done = limit_hit || (task.early_stop && score >= PASS_SCORE);
        let reward = if done { score } else { 0.0 };
        self.finish(generation, "step", |core| {
            core.episode = Episode::Active { turn, done };
            if done {
                core.episodes_completed += 1;
            }
        })?;
        Ok(StepResult { observation, reward, done, turn, latency_ms })
    }

    pub async fn evaluate(&self) -> Result<f64, EngineError> {
        let (generation, task) = {
            let mut core = self.inner.core.lock();
            Self::require_ready(&core)?;
            match core.episode {
                Episode::Active { .. } => {}
                Episode::None => return Err(err(ErrorCode::EpisodeDone, "no episode started; reset first")),
                Episode::Aborted => return Err(err(ErrorCode::ReplicaCrashed, "episode aborted by recovery")),
            }
            let task = core.task.clone().expect("READY implies a configured task");
            (self.begin(&mut core, ReplicaState::Evaluating, "evaluate"), task)
        };
        match self.inner.backend.evaluate(&task.evaluator, &self.inner.natives) {
            Ok(score) => {
                self.finish(generation, "evaluate", |_| {})?;
                Ok(score)
            }
            Err(BackendError::Evaluator(detail)) => {
                let mut core = self.inner.core.lock();
                if core.generation == generation {
                    core.op_started = None;
                    self.transition(&mut core, ReplicaState::Ready, "evaluate failed");
                }
                Err(err(ErrorCode::EvaluatorFailure, detail))
            }
            Err(e) => Err(self.backend_failure(generation, "evaluate", e)),
        }
    }

    pub fn health(&self) -> HealthReport {
        let core = self.inner.core.lock();
        HealthReport {
            replica_id: self.inner.config.replica_id.clone(),
            state: core.state,
            last_heartbeat: core.last_heartbeat,
            consecutive_failures: core.consecutive_failures,
            episodes_completed: core.episodes_completed,
            current_task: core.task.as_ref().map(|t| t.task_id.clone()),
            uptime_ms: self.inner.started.elapsed().as_millis() as u64,
        }
    }

    pub fn inject_fault(&self, fault: FaultKind) -> Result<(), EngineError> {
        self.inner.backend.inject_fault(fault)
    }
}

async fn watchdog_loop(inner: Weak<Inner>, interval: Duration) {
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        ticker.tick().await;
        let Some(inner) = inner.upgrade() else { return };
        if inner.stopped.load(Ordering::SeqCst) {
            return;
        }
        StateManager { inner }.watchdog_tick();
    }
}
