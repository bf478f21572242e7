mod common;

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use common::*;
use gymfleet::data_server::{DataServer, ServerConfig};
use gymfleet::env_backend::FaultKind;
use gymfleet::protocol::messages::{EpisodeStatus, ItemOutcome, ReadyItem, ReplicaStatus, StepItem, TrajectoryFilter};
use gymfleet::protocol::{Action, ErrorCode, ReplicaId};

fn ids(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn step_all(server: &DataServer, replicas: &[ReplicaId], action: Action) -> gymfleet::protocol::messages::Ticket {
    server.async_step(replicas.iter().map(|r| StepItem { replica_id: r.clone(), action: action.clone() }).collect())
}

async fn wait_resolved(server: &DataServer, ticket_id: &str, limit: Duration) -> gymfleet::protocol::messages::Ticket {
    let deadline = Instant::now() + limit;
    loop {
        let t = server.poll(ticket_id).unwrap();
        if t.is_resolved() {
            return t;
        }
        assert!(Instant::now() < deadline, "ticket {ticket_id} unresolved after {limit:?}");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

#[tokio::test]
async fn register_is_idle_and_idempotent() {
    let f = fleet(1, 5.0, vec![grid_task("t1", 1, 10)]).await;
    let entries = f.server.registry();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].status, ReplicaStatus::Idle);
    let again = f.server.register_local(&f.managers[0].manager).await.unwrap();
    assert_eq!(again.replica_id, entries[0].replica_id);
    assert_eq!(f.server.registry().len(), 1);
}

#[tokio::test]
async fn register_unreachable_is_timeout() {
    let f = fleet(0, 5.0, vec![grid_task("t1", 1, 10)]).await;
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let e = f.server.register_replica(&addr.to_string()).await.unwrap_err();
    assert_eq!(e.code, ErrorCode::Timeout);
    assert!(f.server.registry().is_empty());
}

#[tokio::test]
async fn batch_reset_count_semantics() {
    let f = fleet(8, 5.0, vec![grid_task("t1", 1, 10)]).await;
    let items = f.server.batch_reset(&ids(&["t1"]), 4, None).await.unwrap();
    assert_eq!(items.len(), 4);
    let distinct: HashSet<_> = items.iter().map(|i| i.replica_id.clone()).collect();
    assert_eq!(distinct.len(), 4);
    assert_eq!(f.server.store().open_count(), 4);
    assert!(items.iter().all(|i| !i.observation.screenshot.is_empty()));
    assert_eq!(f.server.idle_count(), 4);
    let assigned = f.server.registry().iter().filter(|e| e.status == ReplicaStatus::Assigned).count();
    assert_eq!(assigned, 4);
}

#[tokio::test]
async fn batch_reset_round_robin() {
    let f = fleet(4, 5.0, vec![grid_task("t1", 1, 10), grid_task("t2", 2, 10)]).await;
    let items = f.server.batch_reset(&ids(&["t1", "t2"]), 4, None).await.unwrap();
    let tasks: Vec<&str> = items.iter().map(|i| i.task_id.as_str()).collect();
    assert_eq!(tasks, ["t1", "t2", "t1", "t2"]);
    for item in &items {
        let entry = f.server.registry().into_iter().find(|e| e.replica_id == item.replica_id).unwrap();
        assert_eq!(entry.assignment, Some((item.task_id.clone(), item.episode_id.clone())));
    }
}

#[tokio::test]
async fn batch_reset_unknown_task() {
    let f = fleet(2, 5.0, vec![grid_task("t1", 1, 10)]).await;
    let e = f.server.batch_reset(&ids(&["nope"]), 1, None).await.unwrap_err();
    assert_eq!(e.code, ErrorCode::UnknownTask);
    assert_eq!(f.server.idle_count(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn batch_reset_waits_for_staggered_availability() {
    let f = fleet(4, 5.0, vec![grid_task("t1", 1, 10)]).await;
    let first = f.server.batch_reset(&ids(&["t1"]), 2, None).await.unwrap();
    let busy: Vec<ReplicaId> = first.iter().map(|i| i.replica_id.clone()).collect();
    let server = f.server.clone();
    tokio::spawn(async move {
        tokio::time::sleep(Duration::from_millis(200)).await;
        step_all(&server, &busy, terminate());
    });
    let started = Instant::now();
    let items = f.server.batch_reset(&ids(&["t1"]), 4, Some(Duration::from_secs(5))).await.unwrap();
    assert_eq!(items.len(), 4);
    assert!(started.elapsed() >= Duration::from_millis(150));
    let distinct: HashSet<_> = items.iter().map(|i| i.replica_id.clone()).collect();
    assert_eq!(distinct.len(), 4);
}

#[tokio::test]
async fn batch_reset_times_out_and_releases() {
    let f = fleet(2, 5.0, vec![grid_task("t1", 1, 10)]).await;
    let started = Instant::now();
    let e = f.server.batch_reset(&ids(&["t1"]), 4, Some(Duration::from_millis(200))).await.unwrap_err();
    assert_eq!(e.code, ErrorCode::Timeout);
    assert!(started.elapsed() >= Duration::from_millis(200));
    assert_eq!(f.server.idle_count(), 2);
    assert_eq!(f.server.store().open_count(), 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn async_step_returns_before_work() {
    let f = fleet(64, 50.0, vec![grid_task("t1", 1, 100)]).await;
    let items = f.server.batch_reset(&ids(&["t1"]), 64, None).await.unwrap();
    let replicas: Vec<ReplicaId> = items.iter().map(|i| i.replica_id.clone()).collect();
    let started = Instant::now();
    let ticket = step_all(&f.server, &replicas, noop());
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_millis(5), "async_step took {elapsed:?}");
    assert_eq!(ticket.items.len(), 64);
    assert!(ticket.unresolved() > 0);
    let done = wait_resolved(&f.server, &ticket.ticket_id, Duration::from_secs(5)).await;
    assert!(done.resolved.iter().all(|r| matches!(r, Some(ItemOutcome::Ok(_)))));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn one_crash_is_isolated_to_its_item() {
    // A long watchdog keeps the managers from noticing the dead backend before the step does.
    let f = fleet_with(64, 20.0, vec![grid_task("t1", 1, 100)], ServerConfig::default(), |c| {
        c.watchdog_interval_ms = 10_000;
    })
    .await;
    let items = f.server.batch_reset(&ids(&["t1"]), 64, None).await.unwrap();
    let replicas: Vec<ReplicaId> = items.iter().map(|i| i.replica_id.clone()).collect();
    let victim = f.managers.iter().find(|m| *m.manager.replica_id() == replicas[17]).unwrap();
    use gymfleet::env_backend::Backend;
    victim.sim.inject_fault(FaultKind::CrashNow).unwrap();

    let ticket = step_all(&f.server, &replicas, noop());
    let done = wait_resolved(&f.server, &ticket.ticket_id, Duration::from_secs(5)).await;
    let errors: Vec<(usize, ErrorCode)> = done
        .resolved
        .iter()
        .enumerate()
        .filter_map(|(i, r)| match r {
            Some(ItemOutcome::Error(e)) => Some((i, e.code)),
            _ => None,
        })
        .collect();
    assert_eq!(errors, [(17, ErrorCode::ReplicaCrashed)]);

    let aborted = f.server.query_trajectories(&TrajectoryFilter {
        status: Some(EpisodeStatus::Aborted),
        ..TrajectoryFilter::default()
    });
    assert_eq!(aborted.len(), 1);
    assert_eq!(aborted[0].episode_id, items[17].episode_id);
    let entry = f.server.registry().into_iter().find(|e| e.replica_id == replicas[17]).unwrap();
    assert_eq!(entry.status, ReplicaStatus::Unavailable);
    assert_eq!(entry.assignment, None);

    // The other 63 keep going.
    let survivors: Vec<ReplicaId> = replicas.iter().filter(|r| **r != replicas[17]).cloned().collect();
    let again = step_all(&f.server, &survivors, noop());
    let again = wait_resolved(&f.server, &again.ticket_id, Duration::from_secs(5)).await;
    assert!(again.resolved.iter().all(|r| matches!(r, Some(ItemOutcome::Ok(_)))));
}

#[tokio::test]
async fn duplicate_replica_is_busy_per_item() {
    let f = fleet(2, 20.0, vec![grid_task("t1", 1, 100)]).await;
    let items = f.server.batch_reset(&ids(&["t1"]), 2, None).await.unwrap();
    let r0 = items[0].replica_id.clone();
    let ticket = f.server.async_step(vec![
        StepItem { replica_id: r0.clone(), action: noop() },
        StepItem { replica_id: items[1].replica_id.clone(), action: noop() },
        StepItem { replica_id: r0.clone(), action: noop() },
        StepItem { replica_id: ReplicaId::new("ghost", 9), action: noop() },
    ]);
    match &ticket.resolved[2] {
        Some(ItemOutcome::Error(e)) => assert_eq!(e.code, ErrorCode::ReplicaBusy),
        other => panic!("expected REPLICA_BUSY, got {other:?}"),
    }
    match &ticket.resolved[3] {
        Some(ItemOutcome::Error(e)) => assert_eq!(e.code, ErrorCode::UnknownReplica),
        other => panic!("expected UNKNOWN_REPLICA, got {other:?}"),
    }
    let done = wait_resolved(&f.server, &ticket.ticket_id, Duration::from_secs(5)).await;
    assert!(matches!(done.resolved[0], Some(ItemOutcome::Ok(_))));
    assert!(matches!(done.resolved[1], Some(ItemOutcome::Ok(_))));
}

#[tokio::test]
async fn step_without_episode_is_episode_done() {
    let f = fleet(1, 5.0, vec![grid_task("t1", 1, 10)]).await;
    let replica = f.server.registry()[0].replica_id.clone();
    let ticket = step_all(&f.server, &[replica], noop());
    match &ticket.resolved[0] {
        Some(ItemOutcome::Error(e)) => assert_eq!(e.code, ErrorCode::EpisodeDone),
        other => panic!("expected EPISODE_DONE, got {other:?}"),
    }
}

#[tokio::test]
async fn next_batch_is_fifo_and_bounded() {
    let f = fleet(3, 5.0, vec![grid_task("t1", 1, 10)]).await;
    let items = f.server.batch_reset(&ids(&["t1"]), 3, None).await.unwrap();
    let batch = f.server.next_batch(8, Duration::from_secs(1)).await;
    assert_eq!(batch.len(), 3);
    let order: Vec<_> = batch.iter().map(|b| b.episode_id.clone()).collect();
    let expected: Vec<_> = items.iter().map(|i| i.episode_id.clone()).collect();
    assert_eq!(order, expected);
    assert!(batch.iter().all(|b| b.turn == 0 && !b.done));
}

#[tokio::test]
async fn next_batch_times_out_empty() {
    let f = fleet(1, 5.0, vec![grid_task("t1", 1, 10)]).await;
    let started = Instant::now();
    let batch = f.server.next_batch(8, Duration::from_millis(100)).await;
    let elapsed = started.elapsed();
    assert!(batch.is_empty());
    assert!(elapsed >= Duration::from_millis(95) && elapsed < Duration::from_millis(300), "{elapsed:?}");
}

#[tokio::test]
async fn next_batch_wakes_on_step_result() {
    let f = fleet(1, 30.0, vec![grid_task("t1", 1, 10)]).await;
    let items = f.server.batch_reset(&ids(&["t1"]), 1, None).await.unwrap();
    f.server.next_batch(8, Duration::from_millis(10)).await;
    step_all(&f.server, &[items[0].replica_id.clone()], noop());
    let batch = f.server.next_batch(8, Duration::from_secs(2)).await;
    assert_eq!(batch.len(), 1);
    assert_eq!(batch[0].turn, 1);
}

#[tokio::test]
async fn poll_tracks_resolution_and_expires() {
    let config = ServerConfig { ticket_ttl_ms: 100, ..ServerConfig::default() };
    let f = fleet_with(4, 50.0, vec![grid_task("t1", 1, 10)], config, |_| {}).await;
    let items = f.server.batch_reset(&ids(&["t1"]), 4, None).await.unwrap();
    let replicas: Vec<ReplicaId> = items.iter().map(|i| i.replica_id.clone()).collect();
    let ticket = step_all(&f.server, &replicas, noop());
    assert!(f.server.poll(&ticket.ticket_id).unwrap().unresolved() > 0);
    let done = wait_resolved(&f.server, &ticket.ticket_id, Duration::from_secs(5)).await;
    assert_eq!(done.items, ticket.items);
    assert_eq!(f.server.poll(&ticket.ticket_id).unwrap(), done);
    tokio::time::sleep(Duration::from_millis(150)).await;
    assert_eq!(f.server.poll(&ticket.ticket_id).unwrap_err().code, ErrorCode::UnknownTicket);
    assert_eq!(f.server.poll("tk-missing").unwrap_err().code, ErrorCode::UnknownTicket);
}

/// Drives every open episode with `policy` until all are closed, the way a
/// rollout loop would: next_batch, act, async_step.
async fn drive(server: &DataServer, episodes: usize, mut policy: impl FnMut(&ReadyItem) -> Action) -> Vec<ReadyItem> {
    let mut seen = Vec::new();
    let mut closed = 0;
    while closed < episodes {
        let batch = server.next_batch(64, Duration::from_secs(5)).await;
        assert!(!batch.is_empty(), "rollout stalled with {closed}/{episodes} closed");
        let mut actions = Vec::new();
        for item in &batch {
            if item.done {
                closed += 1;
            } else {
                actions.push(StepItem { replica_id: item.replica_id.clone(), action: policy(item) });
            }
        }
        if !actions.is_empty() {
            let ticket = server.async_step(actions);
            assert!(ticket.resolved.iter().all(|r| r.is_none()), "{:?}", ticket.resolved);
        }
        seen.extend(batch);
    }
    seen
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rollout_loop_conserves_observations() {
    let f = fleet(16, 10.0, vec![grid_task("t1", 1, 6)]).await;
    f.server.batch_reset(&ids(&["t1"]), 16, None).await.unwrap();
    let seen = drive(&f.server, 16, |_| noop()).await;
    assert_eq!(seen.len(), 16 * 7);
    let ledger = f.server.ledger();
    assert_eq!(ledger.enqueued, ledger.dequeued);
    assert_eq!(ledger.accepted, ledger.appended + ledger.item_errors);
    assert_eq!(ledger.item_errors, 0);
    let records = f.server.query_trajectories(&TrajectoryFilter::default());
    assert_eq!(records.len(), 16);
    for r in &records {
        assert_eq!(r.turns.len(), 6);
        assert_eq!(r.status, EpisodeStatus::Truncated);
        assert_eq!(r.final_score, 0.0);
    }
    assert_eq!(f.server.idle_count(), 16);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn query_matches_jsonl_scan() {
    let f = fleet(8, 5.0, vec![grid_task("t1", 1, 4), grid_task("t2", 2, 3)]).await;
    for round in 0..3 {
        f.server.batch_reset(&ids(&["t1", "t2"]), 8, None).await.unwrap();
        // Replicas in even slots solve the task; the others idle until the limit.
        let mut plans: BTreeMap<String, Vec<Action>> = BTreeMap::new();
        drive(&f.server, 8, |item| {
            let plan = plans.entry(item.episode_id.clone()).or_insert_with(|| {
                let n: u32 = item.episode_id.rsplit('-').next().unwrap().parse().unwrap();
                if (n + round) % 2 == 0 {
                    let mut p = grid_solution();
                    p.push(terminate());
                    p.reverse();
                    p
                } else {
                    Vec::new()
                }
            });
            plan.pop().unwrap_or_else(noop)
        })
        .await;
    }

    let scanned = scan_jsonl(f.dir.path());
    assert_eq!(scanned.len(), 24);
    let all = f.server.query_trajectories(&TrajectoryFilter::default());
    let all_ids: Vec<_> = all.iter().map(|r| r.episode_id.clone()).collect();
    let scan_ids: Vec<_> = scanned.iter().map(|s| s.episode_id.clone()).collect();
    assert_eq!(all_ids, scan_ids);

    let cases = [
        TrajectoryFilter { status: Some(EpisodeStatus::Complete), ..TrajectoryFilter::default() },
        TrajectoryFilter { min_final_score: Some(1.0), ..TrajectoryFilter::default() },
        TrajectoryFilter { task_id: Some("t2".into()), status: Some(EpisodeStatus::Truncated), ..TrajectoryFilter::default() },
        TrajectoryFilter { task_id: Some("t1".into()), limit: Some(3), offset: 2, ..TrajectoryFilter::default() },
    ];
    for filter in cases {
        let got: Vec<_> = f.server.query_trajectories(&filter).into_iter().map(|r| r.episode_id).collect();
        let want: Vec<_> = scanned
            .iter()
            .filter(|s| filter.task_id.as_deref().is_none_or(|t| t == s.task_id))
            .filter(|s| filter.status.is_none_or(|st| serde_json::to_value(st).unwrap() == s.status.as_str()))
            .filter(|s| filter.min_final_score.is_none_or(|m| s.final_score >= m))
            .skip(filter.offset)
            .take(filter.limit.unwrap_or(usize::MAX))
            .map(|s| s.episode_id.clone())
            .collect();
        assert_eq!(got, want, "{filter:?}");
    }
    let complete = f.server.query_trajectories(&TrajectoryFilter {
        status: Some(EpisodeStatus::Complete),
        ..TrajectoryFilter::default()
    });
    assert_eq!(complete.len(), 12);
    assert!(complete.iter().all(|r| r.final_score == 1.0));
}

struct Scanned {
    episode_id: String,
    task_id: String,
    status: String,
    final_score: f64,
    started_at: u64,
}

/// Reads episode files as raw JSON lines, without the library's parser.
fn scan_jsonl(root: &std::path::Path) -> Vec<Scanned> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root.join("episodes")).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let start = &lines[0];
        let end = lines.last().unwrap();
        assert_eq!(start["kind"], "start");
        if end["kind"] != "end" {
            continue;
        }
        out.push(Scanned {
            episode_id: start["episode_id"].as_str().unwrap().into(),
            task_id: start["task_id"].as_str().unwrap().into(),
            status: end["status"].as_str().unwrap().into(),
            final_score: end["final_score"].as_f64().unwrap(),
            started_at: start["started_at"].as_u64().unwrap(),
        });
    }
    out.sort_by(|a, b| (a.started_at, &a.episode_id).cmp(&(b.started_at, &b.episode_id)));
    out
}

#[tokio::test]
async fn idle_metrics() {
    let f = fleet(3, 5.0, vec![grid_task("t1", 1, 10)]).await;
    let m = f.server.server_metrics();
    assert_eq!(m.steps_per_sec, 0.0);
    assert_eq!(m.trajectories_per_min, 0.0);
    assert_eq!(m.healthy_replicas, 3);
    assert_eq!(m.total_replicas, 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn saturated_throughput_matches_n_over_latency() {
    let f = fleet(16, 100.0, vec![grid_task("t1", 1, 1000)]).await;
    f.server.batch_reset(&ids(&["t1"]), 16, None).await.unwrap();
    let stop = Instant::now() + Duration::from_millis(3000);
    while Instant::now() < stop {
        let batch = f.server.next_batch(64, Duration::from_millis(200)).await;
        let actions: Vec<StepItem> =
            batch.iter().map(|b| StepItem { replica_id: b.replica_id.clone(), action: noop() }).collect();
        f.server.async_step(actions);
    }
    let m = f.server.metrics_over(Some(Duration::from_secs(2)));
    assert!((m.steps_per_sec - 160.0).abs() <= 16.0, "steps/s {}", m.steps_per_sec);
    assert!((m.mean_step_latency_ms - 100.0).abs() < 5.0, "mean {}", m.mean_step_latency_ms);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn resets_spread_evenly() {
    let f = fleet(8, 1.0, vec![grid_task("t1", 1, 10)]).await;
    let counts = [3usize, 5, 1, 8, 2, 7, 4, 6, 3];
    for &n in &counts {
        let items = f.server.batch_reset(&ids(&["t1"]), n, None).await.unwrap();
        let replicas: Vec<ReplicaId> = items.iter().map(|i| i.replica_id.clone()).collect();
        let t = step_all(&f.server, &replicas, terminate());
        wait_resolved(&f.server, &t.ticket_id, Duration::from_secs(5)).await;
        let per: Vec<u64> = f.server.registry().iter().map(|e| e.episodes_assigned).collect();
        let (lo, hi) = (per.iter().min().unwrap(), per.iter().max().unwrap());
        assert!(hi - lo <= 1, "assignment spread {per:?}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn crashed_replica_returns_after_recovery() {
    let f = fleet(2, 5.0, vec![grid_task("t1", 1, 10)]).await;
    let items = f.server.batch_reset(&ids(&["t1"]), 2, None).await.unwrap();
    let victim = f.managers.iter().find(|m| *m.manager.replica_id() == items[0].replica_id).unwrap();
    victim.manager.inject_fault(FaultKind::CrashNow).unwrap();

    // The health poller notices, aborts the episode and later readmits the replica.
    let deadline = Instant::now() + Duration::from_secs(3);
    loop {
        let aborted = f.server.query_trajectories(&TrajectoryFilter {
            status: Some(EpisodeStatus::Aborted),
            ..TrajectoryFilter::default()
        });
        if aborted.len() == 1 {
            assert_eq!(aborted[0].episode_id, items[0].episode_id);
            break;
        }
        assert!(Instant::now() < deadline, "episode never aborted");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let deadline = Instant::now() + Duration::from_secs(3);
    while f.server.idle_count() < 1 {
        assert!(Instant::now() < deadline, "replica never readmitted");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let again = f.server.batch_reset(&ids(&["t1"]), 1, Some(Duration::from_secs(2))).await.unwrap();
    assert_eq!(again[0].replica_id, items[0].replica_id);
}
