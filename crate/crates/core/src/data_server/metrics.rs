use std::collections::VecDeque;
use std::time::Duration;

use parking_lot::Mutex;
use tokio::time::Instant;

/// Running totals since the server started.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Counters {
    pub steps_total: u64,
    pub latency_ms_total: f64,
    pub episodes_closed_total: u64,
}

/// Aggregates over a trailing time window.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WindowStats {
    pub steps_per_sec: f64,
    pub mean_step_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub trajectories_per_min: f64,
}

struct Inner {
    steps: VecDeque<(Instant, f64)>,
    episodes: VecDeque<Instant>,
    counters: Counters,
}

pub struct Metrics {
    window: Duration,
    started: Instant,
    inner: Mutex<Inner>,
}

impl Metrics {
    pub fn new(window: Duration) -> Self {
        Metrics {
            window,
            started: Instant::now(),
            inner: Mutex::new(Inner { steps: VecDeque::new(), episodes: VecDeque::new(), counters: Counters::default() }),
        }
    }

    pub fn record_step(&self, latency_ms: f64) {
        let now = Instant::now();
        let mut inner = self.inner.lock();
        inner.steps.push_back((now, latency_ms));
        inner.counters.steps_total += 1;
        inner.counters.latency_ms_total += latency_ms;
        Self::prune(&mut inner, now, self.window);
    }

    pub fn record_episode_closed(&self) {
        let now = Instant::now();
        let mut inner = self.inner.lock();
        inner.episodes.push_back(now);
        inner.counters.episodes_closed_total += 1;
        Self::prune(&mut inner, now, self.window);
    }

    fn prune(inner: &mut Inner, now: Instant, window: Duration) {
        while inner.steps.front().is_some_and(|(t, _)| now.duration_since(*t) > window) {
            inner.steps.pop_front();
        }
        while inner.episodes.front().is_some_and(|t| now.duration_since(*t) > window) {
            inner.episodes.pop_front();
        }
    }

    pub fn counters(&self) -> Counters {
        self.inner.lock().counters
    }

    /// Stats over the last `span` (capped at the configured window and at the
    /// server's uptime, so a young server is not diluted by time it never ran).
    pub fn window_stats(&self, span: Option<Duration>) -> WindowStats {
        let now = Instant::now();
        let span = span.unwrap_or(self.window).min(self.window).min(now.duration_since(self.started));
        let inner = self.inner.lock();
        let mut latencies: Vec<f64> =
            inner.steps.iter().filter(|(t, _)| now.duration_since(*t) <= span).map(|(_, l)| *l).collect();
        let episodes = inner.episodes.iter().filter(|t| now.duration_since(**t) <= span).count();
        drop(inner);
        let secs = span.as_secs_f64();
        if latencies.is_empty() && episodes == 0 || secs <= 0.0 {
            return WindowStats::default();
        }
        let mean = if latencies.is_empty() { 0.0 } else { latencies.iter().sum::<f64>() / latencies.len() as f64 };
        latencies.sort_by(f64::total_cmp);
        WindowStats {
            steps_per_sec: latencies.len() as f64 / secs,
            mean_step_latency_ms: mean,
            p95_latency_ms: percentile(&latencies, 0.95),
            trajectories_per_min: episodes as f64 / secs * 60.0,
        }
    }
}

/// Nearest-rank percentile of sorted data; 0 when empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}
