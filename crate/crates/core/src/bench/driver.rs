use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use tokio::time::Instant;

use crate::data_server::DataServer;
use crate::protocol::messages::{ItemOutcome, ReadyItem, StepItem};
use crate::protocol::{Action, ActionPayload, ErrorCode, Geometry, MouseButton, ReplicaId};

/// Picks the next action for a replica from what it just showed.
pub trait Policy: Send {
    fn act(&mut self, item: &ReadyItem) -> Action;
}

const KEYS: [&str; 6] = ["up", "down", "left", "right", "backspace", "enter"];

/// Uniform over a handful of action kinds; never terminates an episode.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    geometry: Geometry,
}

impl RandomPolicy {
    pub fn new(seed: u64, geometry: Geometry) -> Self {
        RandomPolicy { rng: ChaCha8Rng::seed_from_u64(seed), geometry }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, item: &ReadyItem) -> Action {
        let x = self.rng.random_range(0..i64::from(self.geometry.width));
        let y = self.rng.random_range(0..i64::from(self.geometry.height));
        let payload = match self.rng.random_range(0..6u8) {
            0 => ActionPayload::MouseMove { x, y },
            1 => ActionPayload::MouseClick { x, y, button: MouseButton::Left },
            2 => ActionPayload::TypeText { text: self.rng.random_range(0..10u8).to_string() },
            3 => ActionPayload::KeyPress { key: KEYS[self.rng.random_range(0..KEYS.len())].into() },
            4 => ActionPayload::Scroll { delta: self.rng.random_range(-2..=2) },
            _ => ActionPayload::Noop,
        };
        Action::new(payload).with_thought(format!("turn {}", item.turn + 1))
    }
}

/// Solves the bench grid task in two moves, then idles.
pub struct ScriptedPolicy;

impl Policy for ScriptedPolicy {
    fn act(&mut self, item: &ReadyItem) -> Action {
        match item.turn {
            0 => Action::new(ActionPayload::MouseClick { x: 0, y: 0, button: MouseButton::Left }),
            1 => Action::new(ActionPayload::TypeText { text: "5".into() }),
            _ => Action::new(ActionPayload::Noop),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Random,
    Scripted,
}

impl PolicyKind {
    pub fn build(self, seed: u64, geometry: Geometry) -> Box<dyn Policy> {
        match self {
            PolicyKind::Random => Box::new(RandomPolicy::new(seed, geometry)),
            PolicyKind::Scripted => Box::new(ScriptedPolicy),
        }
    }
}

pub enum Stop {
    After(Duration),
    /// Once this many actions have been submitted.
    Steps(u64),
    Flag(Arc<AtomicBool>),
}

pub struct RolloutOptions {
    pub task_ids: Vec<String>,
    pub stop: Stop,
    /// After stopping, keep stepping until every open episode closes.
    pub drain: bool,
    /// Spread the first fill over this long so episodes do not end in lockstep.
    pub stagger: Duration,
    pub refill_timeout: Duration,
    pub max_batch: usize,
}

impl RolloutOptions {
    pub fn new(task_ids: Vec<String>, stop: Stop) -> Self {
        RolloutOptions {
            task_ids,
            stop,
            drain: false,
            stagger: Duration::ZERO,
            refill_timeout: Duration::from_secs(10),
            max_batch: 1024,
        }
    }
}

#[derive(Debug, Default)]
pub struct RolloutReport {
    pub observations: u64,
    pub steps_submitted: u64,
    pub immediate_errors: u64,
    pub episodes_done: u64,
    pub resets: u64,
    /// Whole-call failures seen by the loop.
    pub exceptions: Vec<String>,
    /// Completion time and submit-to-delivery latency of every step seen.
    pub round_trips: Vec<(Instant, f64)>,
    /// Items that resolved with an error: episode id and code.
    pub failed_items: Vec<(String, ErrorCode)>,
    pub elapsed: Duration,
}

struct Outstanding {
    ticket_id: String,
    items: Vec<(ReplicaId, String)>,
}

/// The rollout loop: next_batch, act, async_step, with idle replicas
/// refilled in the background.
pub async fn rollout(server: &DataServer, policy: &mut dyn Policy, opts: RolloutOptions) -> RolloutReport {
    let start = Instant::now();
    let stopping = Arc::new(AtomicBool::new(false));
    let wake = Arc::new(Notify::new());
    let mut refiller = Some(tokio::spawn(refill_loop(
        server.clone(),
        opts.task_ids.clone(),
        stopping.clone(),
        wake.clone(),
        opts.stagger,
        opts.refill_timeout,
    )));
    let mut report = RolloutReport::default();
    let mut submitted_at: HashMap<ReplicaId, Instant> = HashMap::new();
    let mut outstanding: VecDeque<Outstanding> = VecDeque::new();

    loop {
        if !stopping.load(Ordering::Relaxed) {
            let stop = match &opts.stop {
                Stop::After(d) => start.elapsed() >= *d,
                Stop::Steps(n) => report.steps_submitted >= *n,
                Stop::Flag(f) => f.load(Ordering::Relaxed),
            };
            if stop {
                stopping.store(true, Ordering::Relaxed);
                wake.notify_one();
                if !opts.drain {
                    break;
                }
            }
        }
        let stopped = stopping.load(Ordering::Relaxed);
        if stopped {
            if let Some(handle) = refiller.take() {
                collect_refiller(handle.await, &mut report);
            }
        }

        while let Some(front) = outstanding.front() {
            match server.poll(&front.ticket_id) {
                Ok(t) if t.is_resolved() => {
                    let done = outstanding.pop_front().expect("front exists");
                    for (outcome, (replica, episode)) in t.resolved.iter().zip(done.items) {
                        if let Some(ItemOutcome::Error(e)) = outcome {
                            submitted_at.remove(&replica);
                            report.failed_items.push((episode, e.code));
                        }
                    }
                }
                Ok(_) => break,
                Err(e) => {
                    report.exceptions.push(e.to_string());
                    outstanding.pop_front();
                }
            }
        }

        let batch = server.next_batch(opts.max_batch, Duration::from_millis(20)).await;
        if stopped && batch.is_empty() && outstanding.is_empty() && server.store().open_count() == 0 {
            break;
        }
        let now = Instant::now();
        let mut items = Vec::new();
        let mut meta = Vec::new();
        for item in &batch {
            report.observations += 1;
            if let Some(t) = submitted_at.remove(&item.replica_id) {
                report.round_trips.push((now, now.duration_since(t).as_secs_f64() * 1000.0));
            }
            if item.done {
                report.episodes_done += 1;
                wake.notify_one();
                continue;
            }
            items.push(StepItem { replica_id: item.replica_id.clone(), action: policy.act(item) });
            meta.push((item.replica_id.clone(), item.episode_id.clone()));
        }
        if items.is_empty() {
            continue;
        }
        report.steps_submitted += items.len() as u64;
        let ticket = server.async_step(items);
        let sent = Instant::now();
        for (outcome, (replica, episode)) in ticket.resolved.iter().zip(&meta) {
            match outcome {
                Some(ItemOutcome::Error(e)) => {
                    report.immediate_errors += 1;
                    report.failed_items.push((episode.clone(), e.code));
                }
                _ => {
                    submitted_at.insert(replica.clone(), sent);
                }
            }
        }
        if !ticket.is_resolved() {
            outstanding.push_back(Outstanding { ticket_id: ticket.ticket_id, items: meta });
        }
    }
    stopping.store(true, Ordering::Relaxed);
    wake.notify_one();
    if let Some(handle) = refiller.take() {
        collect_refiller(handle.await, &mut report);
    }
    report.elapsed = start.elapsed();
    report
}

fn collect_refiller(joined: Result<(u64, Vec<String>), tokio::task::JoinError>, report: &mut RolloutReport) {
    match joined {
        Ok((resets, errors)) => {
            report.resets += resets;
            report.exceptions.extend(errors);
        }
        Err(e) => report.exceptions.push(format!("refiller: {e}")),
    }
}

async fn refill_loop(
    server: DataServer,
    task_ids: Vec<String>,
    stopping: Arc<AtomicBool>,
    wake: Arc<Notify>,
    stagger: Duration,
    timeout: Duration,
) -> (u64, Vec<String>) {
    let mut resets = 0u64;
    let mut errors = Vec::new();
    let mut reset = |result: Result<Vec<_>, crate::protocol::EngineError>| match result {
        Ok(items) => resets += items.len() as u64,
        Err(e) => errors.push(format!("batch_reset: {e}")),
    };

    let idle = server.idle_count();
    if !stagger.is_zero() && idle > 1 {
        let groups = idle.min(8);
        for g in 0..groups {
            let share = idle * (g + 1) / groups - idle * g / groups;
            if share > 0 && !stopping.load(Ordering::Relaxed) {
                reset(server.batch_reset(&task_ids, share, Some(timeout)).await);
            }
            if g + 1 < groups {
                tokio::time::sleep(stagger / groups as u32).await;
            }
        }
    }
    while !stopping.load(Ordering::Relaxed) {
        let idle = server.idle_count();
        if idle > 0 {
            reset(server.batch_reset(&task_ids, idle, Some(timeout)).await);
        }
        tokio::select! {
            _ = wake.notified() => {}
            _ = tokio::time::sleep(Duration::from_millis(25)) => {}
        }
    }
    (resets, errors)
}
