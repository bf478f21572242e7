//! HTTP front ends for a replica manager and for the data server.
//!
//! Every route accepts `POST` with one enveloped protocol message and answers
//! with one. Failures come back as an `error` message whose HTTP status is
//! [`ErrorCode::http_status`]. `GET /health` and `GET /metrics` are also
//! accepted for quick inspection, and `GET /blobs/{hash}` serves stored
//! screenshots.

use std::future::Future;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;

use crate::data_server::DataServer;
use crate::protocol::messages::{
    Ack, AsyncStepRequest, BatchResetRequest, BatchResetResponse, EvaluateRequest, EvaluateResult, FaultRequest,
    HealthRequest, MetricsRequest, NextBatchRequest, NextBatchResponse, PollRequest, RegisterRequest, ResetRequest,
    TrajectoryFilter, TrajectoryPage,
};
use crate::protocol::{decode_message, encode_message, Action, EngineError, ErrorCode, Message};
use crate::state_manager::StateManager;
use crate::task_flow::TaskSpec;

/// Longest `next_batch` wait a client may ask for.
pub const MAX_NEXT_BATCH_WAIT: Duration = Duration::from_secs(60);

fn reply<M: Message>(result: Result<M, EngineError>) -> Response {
    let (status, body) = match result {
        Ok(m) => (StatusCode::OK, encode_message(&m)),
        Err(e) => {
            let status = StatusCode::from_u16(e.code.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, encode_message(&e))
        }
    };
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

pub fn manager_router(manager: StateManager) -> Router {
    Router::new()
        .route("/configure", post(configure))
        .route("/reset", post(reset))
        .route("/step", post(step))
        .route("/evaluate", post(evaluate))
        .route("/health", post(health).get(health_get))
        .route("/fault", post(fault))
        .with_state(manager)
}

async fn configure(State(m): State<StateManager>, body: Bytes) -> Response {
    let result = async { m.configure(decode_message::<TaskSpec>(&body)?).await }.await;
    reply(result)
}

async fn reset(State(m): State<StateManager>, body: Bytes) -> Response {
    let result = async {
        decode_message::<ResetRequest>(&body)?;
        m.reset().await
    }
    .await;
    reply(result)
}

async fn step(State(m): State<StateManager>, body: Bytes) -> Response {
    let result = async { m.step(decode_message::<Action>(&body)?).await }.await;
    reply(result)
}

async fn evaluate(State(m): State<StateManager>, body: Bytes) -> Response {
    let result = async {
        decode_message::<EvaluateRequest>(&body)?;
        m.evaluate().await.map(|score| EvaluateResult { score })
    }
    .await;
    reply(result)
}

async fn health(State(m): State<StateManager>, body: Bytes) -> Response {
    reply(decode_message::<HealthRequest>(&body).map(|_| m.health()))
}

async fn health_get(State(m): State<StateManager>) -> Response {
    reply(Ok(m.health()))
}

async fn fault(State(m): State<StateManager>, body: Bytes) -> Response {
    let result = decode_message::<FaultRequest>(&body)
        .and_then(|r| m.inject_fault(r.fault))
        .map(|()| Ack { replica_id: m.replica_id().clone() });
    reply(result)
}

pub fn server_router(server: DataServer) -> Router {
    Router::new()
        .route("/register", post(register))
        .route("/batch_reset", post(batch_reset))
        .route("/async_step", post(async_step))
        .route("/next_batch", post(next_batch))
        .route("/poll", post(poll))
        .route("/trajectories/query", post(query))
        .route("/metrics", post(metrics).get(metrics_get))
        .route("/blobs/{hash}", get(blob))
        .with_state(server)
}

async fn register(State(s): State<DataServer>, body: Bytes) -> Response {
    let result = async { s.register_replica(&decode_message::<RegisterRequest>(&body)?.endpoint).await }.await;
    reply(result)
}

async fn batch_reset(State(s): State<DataServer>, body: Bytes) -> Response {
    let result = async {
        let r = decode_message::<BatchResetRequest>(&body)?;
        let items = s.batch_reset(&r.task_ids, r.count, r.timeout_ms.map(Duration::from_millis)).await?;
        Ok(BatchResetResponse { items })
    }
    .await;
    reply(result)
}

async fn async_step(State(s): State<DataServer>, body: Bytes) -> Response {
    reply(decode_message::<AsyncStepRequest>(&body).map(|r| s.async_step(r.items)))
}

async fn next_batch(State(s): State<DataServer>, body: Bytes) -> Response {
    let result = async {
        let r = decode_message::<NextBatchRequest>(&body)?;
        let wait = Duration::from_millis(r.timeout_ms).min(MAX_NEXT_BATCH_WAIT);
        Ok(NextBatchResponse { items: s.next_batch(r.max_items, wait).await })
    }
    .await;
    reply(result)
}

async fn poll(State(s): State<DataServer>, body: Bytes) -> Response {
    reply(decode_message::<PollRequest>(&body).and_then(|r| s.poll(&r.ticket_id)))
}

async fn query(State(s): State<DataServer>, body: Bytes) -> Response {
    reply(decode_message::<TrajectoryFilter>(&body).map(|f| TrajectoryPage { records: s.query_trajectories(&f) }))
}

async fn metrics(State(s): State<DataServer>, body: Bytes) -> Response {
    reply(decode_message::<MetricsRequest>(&body).map(|_| s.server_metrics()))
}

async fn metrics_get(State(s): State<DataServer>) -> Response {
    reply(Ok(s.server_metrics()))
}

async fn blob(State(s): State<DataServer>, Path(hash): Path<String>) -> Response {
    let valid = hash.len() == 64 && hash.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
    if !valid {
        return reply::<Ack>(Err(EngineError::new(ErrorCode::MalformedMessage, "blob names are 64 lowercase hex digits")));
    }
    match s.store().read_blob(&hash) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(_) => (StatusCode::NOT_FOUND, [(header::CONTENT_TYPE, "text/plain")], "no such blob").into_response(),
    }
}

/// Serves `router` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    router: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}
