//! Central entry point for rollouts: keeps a registry of replica managers,
//! hands out batched resets, runs steps asynchronously behind tickets, feeds
//! finished steps to a ready queue and persists every trajectory.

mod client;
mod metrics;
mod store;

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use tokio::time::Instant;

use crate::protocol::messages::{
    EpisodeStatus, HealthReport, ItemOutcome, ReadyItem, RegisterResponse, ReplicaState, ReplicaStatus, ResetItem,
    ServerMetrics, StepItem, Ticket, TrajectoryFilter, TrajectoryRecord, TurnRecord,
};
use crate::protocol::{Action, EngineError, ErrorCode, Observation, ReplicaId, StepResult};
use crate::state_manager::StateManager;
use crate::task_flow::{TaskRegistry, TaskSpec};

pub use client::{local_endpoint, post_message, HttpManagerClient, ManagerClient};
pub use metrics::{percentile, Counters, Metrics, WindowStats};
pub use store::{content_hash, read_episode, EpisodeLine, StoreError, TrajectoryStore};

const PASS_SCORE: f64 = 1.0 - 1e-9;

pub fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn default_listen() -> String {
    "127.0.0.1:7700".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub listen: String,
    /// The managers' watchdog cadence; health older than three of these is stale.
    pub watchdog_interval_ms: u64,
    pub health_poll_interval_ms: u64,
    pub reset_timeout_ms: u64,
    pub ticket_ttl_ms: u64,
    pub metrics_window_ms: u64,
    pub request_timeout_ms: u64,
    /// Also push each reset's initial observation onto the ready queue, so a
    /// consumer that only reads `next_batch` sees new episodes start.
    pub enqueue_reset_observations: bool,
    /// Manager endpoints registered at startup.
    pub managers: Vec<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: default_listen(),
            watchdog_interval_ms: 100,
            health_poll_interval_ms: 100,
            reset_timeout_ms: 30_000,
            ticket_ttl_ms: 60_000,
            metrics_window_ms: 60_000,
            request_timeout_ms: 30_000,
            enqueue_reset_observations: true,
            managers: Vec::new(),
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("watchdog_interval_ms", self.watchdog_interval_ms),
            ("health_poll_interval_ms", self.health_poll_interval_ms),
            ("ticket_ttl_ms", self.ticket_ttl_ms),
            ("metrics_window_ms", self.metrics_window_ms),
            ("request_timeout_ms", self.request_timeout_ms),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    fn stale_after(&self) -> Duration {
        Duration::from_millis(3 * self.watchdog_interval_ms)
    }
}

/// Read-only view of one registry row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegistryEntry {
    pub replica_id: ReplicaId,
    pub endpoint: String,
    pub last_health: HealthReport,
    pub assignment: Option<(String, String)>,
    pub status: ReplicaStatus,
    pub episodes_assigned: u64,
}

/// Totals for checking that nothing submitted is lost or doubled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StepLedger {
    /// Episodes opened by `batch_reset`.
    pub resets: u64,
    pub accepted: u64,
    pub appended: u64,
    pub item_errors: u64,
    pub enqueued: u64,
    pub dequeued: u64,
}

struct Assignment {
    task_id: String,
    episode_id: String,
}

struct Entry {
    replica_id: ReplicaId,
    endpoint: String,
    client: Arc<dyn ManagerClient>,
    last_health: HealthReport,
    last_seen: Instant,
    configured_task: Option<String>,
    assignment: Option<Assignment>,
    stepping: bool,
    reserved: bool,
    episodes_assigned: u64,
    /// Bumped whenever a reset or step finishes, so a health probe that
    /// started earlier cannot overwrite what that call taught us.
    epoch: u64,
}

impl Entry {
    fn status(&self, now: Instant, stale_after: Duration) -> ReplicaStatus {
        if self.last_health.state.is_down() || now.duration_since(self.last_seen) > stale_after {
            ReplicaStatus::Unavailable
        } else if self.stepping {
            ReplicaStatus::Stepping
        } else if self.assignment.is_some() || self.reserved {
            ReplicaStatus::Assigned
        } else {
            ReplicaStatus::Idle
        }
    }
}

#[derive(Default)]
struct Registry {
    entries: Vec<Entry>,
    by_id: HashMap<ReplicaId, usize>,
    by_endpoint: HashMap<String, usize>,
}

struct TicketSlot {
    ticket: Ticket,
    resolved_at: Option<Instant>,
}

#[derive(Default)]
struct LedgerCounters {
    resets: AtomicU64,
    accepted: AtomicU64,
    appended: AtomicU64,
    item_errors: AtomicU64,
    enqueued: AtomicU64,
    dequeued: AtomicU64,
}

struct Inner {
    config: ServerConfig,
    tasks: TaskRegistry,
    store: TrajectoryStore,
    registry: Mutex<Registry>,
    ready: Mutex<VecDeque<ReadyItem>>,
    ready_signal: Notify,
    idle_signal: Notify,
    tickets: Mutex<HashMap<String, TicketSlot>>,
    metrics: Metrics,
    ledger: LedgerCounters,
    ticket_seq: AtomicU64,
    episode_seq: AtomicU64,
    nonce: String,
    stopped: AtomicBool,
}

#[derive(Clone)]
pub struct DataServer {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for DataServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DataServer").field("store", &self.inner.store.root()).finish()
    }
}

fn err(code: ErrorCode, detail: impl Into<String>) -> EngineError {
    EngineError::new(code, detail)
}

impl DataServer {
    /// Starts the server and its health poller. Must run inside a tokio runtime.
    pub fn new(config: ServerConfig, tasks: TaskRegistry, store: TrajectoryStore) -> Self {
        let metrics = Metrics::new(Duration::from_millis(config.metrics_window_ms));
        let inner = Arc::new(Inner {
            config,
            tasks,
            store,
            registry: Mutex::new(Registry::default()),
            ready: Mutex::new(VecDeque::new()),
            ready_signal: Notify::new(),
            idle_signal: Notify::new(),
            tickets: Mutex::new(HashMap::new()),
            metrics,
            ledger: LedgerCounters::default(),
            ticket_seq: AtomicU64::new(0),
            episode_seq: AtomicU64::new(0),
            nonce: format!("{:x}", unix_ms()),
            stopped: AtomicBool::new(false),
        });
        let interval = Duration::from_millis(inner.config.health_poll_interval_ms);
        tokio::spawn(health_loop(Arc::downgrade(&inner), interval));
        DataServer { inner }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.inner.config
    }

    pub fn tasks(&self) -> &TaskRegistry {
        &self.inner.tasks
    }

    pub fn store(&self) -> &TrajectoryStore {
        &self.inner.store
    }

    pub fn shutdown(&self) {
        self.inner.stopped.store(true, Ordering::SeqCst);
    }

    fn probe_timeout(&self) -> Duration {
        Duration::from_millis((3 * self.inner.config.watchdog_interval_ms).max(200))
    }

    /// Registers a manager reachable over HTTP at `endpoint` (`host:port`).
    pub async fn register_replica(&self, endpoint: &str) -> Result<RegisterResponse, EngineError> {
        if let Some(found) = self.lookup_endpoint(endpoint) {
            return Ok(found);
        }
        let timeout = Duration::from_millis(self.inner.config.request_timeout_ms);
        let client = HttpManagerClient::new(endpoint, timeout)?;
        self.register_client_as(endpoint.to_string(), Arc::new(client)).await
    }

    /// Registers a manager running in this process.
    pub async fn register_local(&self, manager: &StateManager) -> Result<RegisterResponse, EngineError> {
        self.register_client(Arc::new(manager.clone())).await
    }

    pub async fn register_client(&self, client: Arc<dyn ManagerClient>) -> Result<RegisterResponse, EngineError> {
        self.register_client_as(client.endpoint(), client).await
    }

    fn lookup_endpoint(&self, endpoint: &str) -> Option<RegisterResponse> {
        let reg = self.inner.registry.lock();
        let idx = *reg.by_endpoint.get(endpoint)?;
        let e = &reg.entries[idx];
        Some(RegisterResponse {
            replica_id: e.replica_id.clone(),
            status: e.status(Instant::now(), self.inner.config.stale_after()),
        })
    }

    async fn register_client_as(
        &self,
        endpoint: String,
        client: Arc<dyn ManagerClient>,
    ) -> Result<RegisterResponse, EngineError> {
        if let Some(found) = self.lookup_endpoint(&endpoint) {
            return Ok(found);
        }
        let health = match tokio::time::timeout(self.probe_timeout(), client.health()).await {
            Ok(Ok(h)) => h,
            Ok(Err(e)) => return Err(err(ErrorCode::Timeout, format!("health probe of {endpoint} failed: {e}"))),
            Err(_) => return Err(err(ErrorCode::Timeout, format!("health probe of {endpoint} timed out"))),
        };
        let mut reg = self.inner.registry.lock();
        if let Some(&idx) = reg.by_endpoint.get(&endpoint) {
            let e = &reg.entries[idx];
            return Ok(RegisterResponse {
                replica_id: e.replica_id.clone(),
                status: e.status(Instant::now(), self.inner.config.stale_after()),
            });
        }
        if let Some(&idx) = reg.by_id.get(&health.replica_id) {
            return Err(err(
                ErrorCode::MalformedMessage,
                format!("{} is already registered from {}", health.replica_id, reg.entries[idx].endpoint),
            ));
        }
        let entry = Entry {
            replica_id: health.replica_id.clone(),
            endpoint: endpoint.clone(),
            client,
            configured_task: health.current_task.clone(),
            last_health: health,
            last_seen: Instant::now(),
            assignment: None,
            stepping: false,
            reserved: false,
            episodes_assigned: 0,
            epoch: 0,
        };
        let status = entry.status(Instant::now(), self.inner.config.stale_after());
        let replica_id = entry.replica_id.clone();
        let idx = reg.entries.len();
        reg.by_id.insert(replica_id.clone(), idx);
        reg.by_endpoint.insert(endpoint, idx);
        reg.entries.push(entry);
        drop(reg);
        self.inner.idle_signal.notify_waiters();
        tracing::info!(replica = %replica_id, "registered");
        Ok(RegisterResponse { replica_id, status })
    }

    pub fn registry(&self) -> Vec<RegistryEntry> {
        let now = Instant::now();
        let stale = self.inner.config.stale_after();
        self.inner
            .registry
            .lock()
            .entries
            .iter()
            .map(|e| RegistryEntry {
                replica_id: e.replica_id.clone(),
                endpoint: e.endpoint.clone(),
                last_health: e.last_health.clone(),
                assignment: e.assignment.as_ref().map(|a| (a.task_id.clone(), a.episode_id.clone())),
                status: e.status(now, stale),
                episodes_assigned: e.episodes_assigned,
            })
            .collect()
    }

    pub fn idle_count(&self) -> usize {
        let now = Instant::now();
        let stale = self.inner.config.stale_after();
        let reg = self.inner.registry.lock();
        reg.entries.iter().filter(|e| e.status(now, stale) == ReplicaStatus::Idle).count()
    }

    /// Reserves up to `n` idle replicas, least-used first.
    fn reserve(&self, n: usize) -> Vec<(usize, Arc<dyn ManagerClient>, Option<String>)> {
        let now = Instant::now();
        let stale = self.inner.config.stale_after();
        let mut reg = self.inner.registry.lock();
        let mut idle: Vec<usize> = (0..reg.entries.len())
            .filter(|&i| reg.entries[i].status(now, stale) == ReplicaStatus::Idle)
            .collect();
        idle.sort_by_key(|&i| (reg.entries[i].episodes_assigned, i));
        idle.truncate(n);
        idle.into_iter()
            .map(|i| {
                let e = &mut reg.entries[i];
                e.reserved = true;
                (i, e.client.clone(), e.configured_task.clone())
            })
            .collect()
    }

    fn release(&self, idx: usize) {
        self.inner.registry.lock().entries[idx].reserved = false;
        self.inner.idle_signal.notify_waiters();
    }

    /// Opens `count` episodes, cycling through `task_ids`; waits for idle
    /// replicas up to `timeout` (server default when `None`).
    pub async fn batch_reset(
        &self,
        task_ids: &[String],
        count: usize,
        timeout: Option<Duration>,
    ) -> Result<Vec<ResetItem>, EngineError> {
        if task_ids.is_empty() || count == 0 {
            return Err(err(ErrorCode::MalformedMessage, "batch_reset needs task ids and a positive count"));
        }
        let tasks: Vec<Arc<TaskSpec>> = task_ids
            .iter()
            .map(|id| self.inner.tasks.get(id).ok_or_else(|| err(ErrorCode::UnknownTask, format!("unknown task {id:?}"))))
            .collect::<Result<_, _>>()?;
        let deadline =
            Instant::now() + timeout.unwrap_or(Duration::from_millis(self.inner.config.reset_timeout_ms));
        let mut slots: Vec<Option<(usize, Observation)>> = vec![None; count];

        loop {
            let pending: Vec<usize> = (0..count).filter(|&s| slots[s].is_none()).collect();
            if pending.is_empty() {
                break;
            }
            let waiter = self.inner.idle_signal.notified();
            tokio::pin!(waiter);
            waiter.as_mut().enable();
            let reserved = self.reserve(pending.len());
            if reserved.is_empty() {
                if Instant::now() >= deadline {
                    for (idx, _) in slots.iter().flatten() {
                        self.release(*idx);
                    }
                    return Err(err(
                        ErrorCode::Timeout,
                        format!("only {} of {count} replicas became available", count - pending.len()),
                    ));
                }
                let poll = Duration::from_millis(self.inner.config.health_poll_interval_ms);
                tokio::select! {
                    _ = waiter => {}
                    _ = tokio::time::sleep_until(deadline.min(Instant::now() + poll)) => {}
                }
                continue;
            }
            let runs = pending.iter().zip(reserved).map(|(&slot, (idx, client, configured))| {
                let task = tasks[slot % tasks.len()].clone();
                async move {
                    let result = async {
                        if configured.as_deref() != Some(task.task_id.as_str()) {
                            client.configure(&task).await?;
                        }
                        client.reset().await
                    }
                    .await;
                    (slot, idx, task, result)
                }
            });
            for (slot, idx, task, result) in futures::future::join_all(runs).await {
                match result {
                    Ok(obs) => {
                        self.inner.registry.lock().entries[idx].configured_task = Some(task.task_id.clone());
                        slots[slot] = Some((idx, obs));
                    }
                    Err(e) => {
                        tracing::warn!("reset on replica slot {idx} failed: {e}");
                        let mut reg = self.inner.registry.lock();
                        let entry = &mut reg.entries[idx];
                        entry.reserved = false;
                        entry.epoch += 1;
                        if e.code.is_replica_loss() {
                            entry.last_health.state = ReplicaState::Crashed;
                        }
                        if e.code == ErrorCode::UnknownTask || e.code == ErrorCode::MalformedMessage {
                            entry.configured_task = None;
                        }
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(count);
        for (slot, filled) in slots.into_iter().enumerate() {
            let (idx, observation) = filled.expect("all slots filled");
            let task = &tasks[slot % tasks.len()];
            let episode_id =
                format!("ep-{}-{:06}", self.inner.nonce, self.inner.episode_seq.fetch_add(1, Ordering::Relaxed));
            let replica_id = self.inner.registry.lock().entries[idx].replica_id.clone();
            if let Err(e) = self.inner.store.open_episode(
                &episode_id,
                &task.task_id,
                &replica_id,
                &task.instruction,
                unix_ms(),
                &observation.screenshot,
            ) {
                tracing::error!("could not open episode {episode_id}: {e}");
            }
            {
                let mut reg = self.inner.registry.lock();
                let entry = &mut reg.entries[idx];
                entry.reserved = false;
                entry.assignment = Some(Assignment { task_id: task.task_id.clone(), episode_id: episode_id.clone() });
                entry.episodes_assigned += 1;
                entry.epoch += 1;
            }
            out.push(ResetItem { replica_id, episode_id, task_id: task.task_id.clone(), observation });
        }
        self.inner.ledger.resets.fetch_add(out.len() as u64, Ordering::Relaxed);
        if self.inner.config.enqueue_reset_observations {
            self.enqueue(out.iter().map(|item| ReadyItem {
                replica_id: item.replica_id.clone(),
                episode_id: item.episode_id.clone(),
                observation: item.observation.clone(),
                turn: 0,
                done: false,
                reward: 0.0,
            }));
        }
        Ok(out)
    }

    fn enqueue(&self, items: impl IntoIterator<Item = ReadyItem>) {
        let mut n = 0;
        {
            let mut queue = self.inner.ready.lock();
            for item in items {
                queue.push_back(item);
                n += 1;
            }
        }
        if n > 0 {
            self.inner.ledger.enqueued.fetch_add(n, Ordering::Relaxed);
            self.inner.ready_signal.notify_waiters();
        }
    }

    /// Queues the batch and returns at once; results land in the ticket and
    /// on the ready queue as they complete.
    pub fn async_step(&self, items: Vec<StepItem>) -> Ticket {
        let ticket_id = format!("tk-{}-{:08}", self.inner.nonce, self.inner.ticket_seq.fetch_add(1, Ordering::Relaxed));
        let mut resolved: Vec<Option<ItemOutcome>> = vec![None; items.len()];
        let mut launches = Vec::new();
        {
            let now = Instant::now();
            let stale = self.inner.config.stale_after();
            let mut reg = self.inner.registry.lock();
            let mut claimed = HashSet::new();
            for (i, item) in items.iter().enumerate() {
                let Some(&idx) = reg.by_id.get(&item.replica_id) else {
                    resolved[i] = Some(ItemOutcome::Error(err(ErrorCode::UnknownReplica, item.replica_id.to_string())));
                    continue;
                };
                let entry = &mut reg.entries[idx];
                if !claimed.insert(idx) || entry.stepping {
                    resolved[i] =
                        Some(ItemOutcome::Error(err(ErrorCode::ReplicaBusy, "replica already has an action in flight")));
                    continue;
                }
                let Some(assignment) = &entry.assignment else {
                    resolved[i] = Some(ItemOutcome::Error(err(ErrorCode::EpisodeDone, "replica has no open episode")));
                    continue;
                };
                if entry.status(now, stale) == ReplicaStatus::Unavailable {
                    resolved[i] = Some(ItemOutcome::Error(err(ErrorCode::ReplicaCrashed, "replica is unavailable")));
                    continue;
                }
                entry.stepping = true;
                launches.push((i, idx, entry.client.clone(), assignment.episode_id.clone(), item.action.clone()));
            }
        }
        let immediate_errors = resolved.iter().filter(|r| r.is_some()).count() as u64;
        self.inner.ledger.accepted.fetch_add(items.len() as u64, Ordering::Relaxed);
        self.inner.ledger.item_errors.fetch_add(immediate_errors, Ordering::Relaxed);

        let ticket = Ticket { ticket_id: ticket_id.clone(), submitted_at: unix_ms(), items, resolved };
        {
            let mut tickets = self.inner.tickets.lock();
            let ttl = Duration::from_millis(self.inner.config.ticket_ttl_ms);
            let now = Instant::now();
            tickets.retain(|_, slot| slot.resolved_at.is_none_or(|t| now.duration_since(t) <= ttl));
            let resolved_at = ticket.is_resolved().then_some(now);
            tickets.insert(ticket_id.clone(), TicketSlot { ticket: ticket.clone(), resolved_at });
        }
        for (slot, idx, client, episode_id, action) in launches {
            let server = self.clone();
            let ticket_id = ticket_id.clone();
            tokio::spawn(async move { server.run_item(ticket_id, slot, idx, client, episode_id, action).await });
        }
        ticket
    }

    async fn run_item(
        self,
        ticket_id: String,
        slot: usize,
        idx: usize,
        client: Arc<dyn ManagerClient>,
        episode_id: String,
        action: Action,
    ) {
        let outcome = match client.step(action.clone()).await {
            Ok(result) => {
                self.record_success(idx, &client, &episode_id, action, &result).await;
                ItemOutcome::Ok(result)
            }
            Err(e) => {
                self.record_failure(idx, &episode_id, &e);
                ItemOutcome::Error(e)
            }
        };
        self.resolve(&ticket_id, slot, outcome);
    }

    async fn record_success(
        &self,
        idx: usize,
        client: &Arc<dyn ManagerClient>,
        episode_id: &str,
        mut action: Action,
        result: &StepResult,
    ) {
        self.inner.metrics.record_step(result.latency_ms);
        let thought = action.thought.take();
        let terminated = action.is_terminate();
        let turn = TurnRecord {
            observation_ref: String::new(),
            thought,
            action,
            reward: result.reward,
            latency_ms: result.latency_ms,
            timestamp: unix_ms(),
        };
        if let Err(e) = self.inner.store.append_turn(episode_id, turn, &result.observation.screenshot) {
            tracing::error!("could not append turn to {episode_id}: {e}");
        }
        self.inner.ledger.appended.fetch_add(1, Ordering::Relaxed);

        let replica_id = if result.done {
            let score = match client.evaluate().await {
                Ok(score) => score,
                Err(e) => {
                    tracing::warn!("final evaluate for {episode_id} failed: {e}");
                    result.reward
                }
            };
            let status = if terminated || score >= PASS_SCORE { EpisodeStatus::Complete } else { EpisodeStatus::Truncated };
            self.close_episode(episode_id, status, score);
            let mut reg = self.inner.registry.lock();
            let entry = &mut reg.entries[idx];
            if entry.assignment.as_ref().is_some_and(|a| a.episode_id == episode_id) {
                entry.assignment = None;
            }
            entry.stepping = false;
            entry.epoch += 1;
            entry.replica_id.clone()
        } else {
            let mut reg = self.inner.registry.lock();
            let entry = &mut reg.entries[idx];
            entry.stepping = false;
            entry.epoch += 1;
            entry.replica_id.clone()
        };
        if result.done {
            self.inner.idle_signal.notify_waiters();
        }
        self.enqueue([ReadyItem {
            replica_id,
            episode_id: episode_id.to_string(),
            observation: result.observation.clone(),
            turn: result.turn,
            done: result.done,
            reward: result.reward,
        }]);
    }

    fn record_failure(&self, idx: usize, episode_id: &str, e: &EngineError) {
        self.inner.ledger.item_errors.fetch_add(1, Ordering::Relaxed);
        let abort = {
            let mut reg = self.inner.registry.lock();
            let entry = &mut reg.entries[idx];
            entry.stepping = false;
            entry.epoch += 1;
            if e.code.is_replica_loss() {
                entry.last_health.state =
                    if e.code == ErrorCode::ReplicaRecovering { ReplicaState::Recovering } else { ReplicaState::Crashed };
                if entry.assignment.as_ref().is_some_and(|a| a.episode_id == episode_id) {
                    entry.assignment = None;
                    true
                } else {
                    false
                }
            } else {
                false
            }
        };
        if abort {
            self.close_episode(episode_id, EpisodeStatus::Aborted, 0.0);
        }
    }

    fn close_episode(&self, episode_id: &str, status: EpisodeStatus, score: f64) {
        match self.inner.store.close_episode(episode_id, status, score, unix_ms()) {
            Ok(_) => self.inner.metrics.record_episode_closed(),
            Err(e) => tracing::error!("could not close episode {episode_id}: {e}"),
        }
    }

    fn resolve(&self, ticket_id: &str, slot: usize, outcome: ItemOutcome) {
        let mut tickets = self.inner.tickets.lock();
        if let Some(t) = tickets.get_mut(ticket_id) {
            t.ticket.resolved[slot] = Some(outcome);
            if t.ticket.is_resolved() {
                t.resolved_at = Some(Instant::now());
            }
        }
    }

    /// Up to `max_items` ready results in FIFO order; empty after `timeout`.
    pub async fn next_batch(&self, max_items: usize, timeout: Duration) -> Vec<ReadyItem> {
        let deadline = Instant::now() + timeout;
        loop {
            let signal = self.inner.ready_signal.notified();
            tokio::pin!(signal);
            signal.as_mut().enable();
            {
                let mut queue = self.inner.ready.lock();
                if !queue.is_empty() {
                    let n = max_items.max(1).min(queue.len());
                    let out: Vec<ReadyItem> = queue.drain(..n).collect();
                    self.inner.ledger.dequeued.fetch_add(n as u64, Ordering::Relaxed);
                    return out;
                }
            }
            tokio::select! {
                _ = &mut signal => {}
                _ = tokio::time::sleep_until(deadline) => return Vec::new(),
            }
        }
    }

    pub fn poll(&self, ticket_id: &str) -> Result<Ticket, EngineError> {
        let ttl = Duration::from_millis(self.inner.config.ticket_ttl_ms);
        let mut tickets = self.inner.tickets.lock();
        let expired = tickets
            .get(ticket_id)
            .is_some_and(|slot| slot.resolved_at.is_some_and(|t| Instant::now().duration_since(t) > ttl));
        if expired {
            tickets.remove(ticket_id);
        }
        tickets
            .get(ticket_id)
            .map(|slot| slot.ticket.clone())
            .ok_or_else(|| err(ErrorCode::UnknownTicket, format!("no ticket {ticket_id:?}")))
    }

    pub fn query_trajectories(&self, filter: &TrajectoryFilter) -> Vec<TrajectoryRecord> {
        self.inner.store.query(filter)
    }

    pub fn server_metrics(&self) -> ServerMetrics {
        self.metrics_over(None)
    }

    /// Metrics over a shorter trailing span than the configured window.
    pub fn metrics_over(&self, span: Option<Duration>) -> ServerMetrics {
        let stats = self.inner.metrics.window_stats(span);
        let now = Instant::now();
        let stale = self.inner.config.stale_after();
        let (healthy, total) = {
            let reg = self.inner.registry.lock();
            let healthy =
                reg.entries.iter().filter(|e| e.status(now, stale) != ReplicaStatus::Unavailable).count();
            (healthy, reg.entries.len())
        };
        ServerMetrics {
            steps_per_sec: stats.steps_per_sec,
            mean_step_latency_ms: stats.mean_step_latency_ms,
            p95_latency_ms: stats.p95_latency_ms,
            healthy_replicas: healthy,
            total_replicas: total,
            trajectories_per_min: stats.trajectories_per_min,
        }
    }

    pub fn counters(&self) -> Counters {
        self.inner.metrics.counters()
    }

    pub fn ledger(&self) -> StepLedger {
        let l = &self.inner.ledger;
        StepLedger {
            resets: l.resets.load(Ordering::Relaxed),
            accepted: l.accepted.load(Ordering::Relaxed),
            appended: l.appended.load(Ordering::Relaxed),
            item_errors: l.item_errors.load(Ordering::Relaxed),
            enqueued: l.enqueued.load(Ordering::Relaxed),
            dequeued: l.dequeued.load(Ordering::Relaxed),
        }
    }

    /// Polls every manager once and aborts episodes on replicas that went
    /// down, including ones that crashed and recovered between two polls.
    pub async fn poll_health(&self) {
        let targets: Vec<(usize, u64, Arc<dyn ManagerClient>)> = {
            let reg = self.inner.registry.lock();
            reg.entries.iter().enumerate().map(|(i, e)| (i, e.epoch, e.client.clone())).collect()
        };
        let timeout = self.probe_timeout();
        let probes = targets.into_iter().map(|(i, epoch, client)| async move {
            (i, epoch, tokio::time::timeout(timeout, client.health()).await)
        });
        let reports = futures::future::join_all(probes).await;
        let now = Instant::now();
        let stale = self.inner.config.stale_after();
        let mut aborted = Vec::new();
        let mut freed = false;
        {
            let mut reg = self.inner.registry.lock();
            for (i, epoch, report) in reports {
                let entry = &mut reg.entries[i];
                let mut lost = false;
                if let Ok(Ok(health)) = report {
                    entry.last_seen = now;
                    if entry.epoch == epoch {
                        // A crash raises the failure count and any later success clears it.
                        lost = health.consecutive_failures > 0;
                        let was_down = entry.last_health.state.is_down();
                        if health.current_task.is_none() {
                            entry.configured_task = None;
                        }
                        entry.last_health = health;
                        freed |= was_down && !entry.last_health.state.is_down();
                    }
                }
                if (lost || entry.status(now, stale) == ReplicaStatus::Unavailable) && !entry.stepping {
                    if let Some(a) = entry.assignment.take() {
                        aborted.push(a.episode_id);
                    }
                }
            }
        }
        for episode_id in aborted {
            self.close_episode(&episode_id, EpisodeStatus::Aborted, 0.0);
        }
        if freed {
            self.inner.idle_signal.notify_waiters();
        }
    }
}

async fn health_loop(inner: Weak<Inner>, interval: Duration) {
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        ticker.tick().await;
        let Some(inner) = inner.upgrade() else { return };
        if inner.stopped.load(Ordering::SeqCst) {
            return;
        }
        DataServer { inner }.poll_health().await;
    }
}
