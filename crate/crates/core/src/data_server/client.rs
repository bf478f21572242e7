use std::time::Duration;

use async_trait::async_trait;

use crate::protocol::messages::{ConfigureAck, EvaluateRequest, EvaluateResult, HealthReport, HealthRequest, ResetRequest};
use crate::protocol::{decode_message, encode_message, Action, EngineError, ErrorCode, Message, Observation, StepResult};
use crate::state_manager::StateManager;
use crate::task_flow::TaskSpec;

/// What the data server needs from a replica manager, wherever it runs.
#[async_trait]
pub trait ManagerClient: Send + Sync + 'static {
    fn endpoint(&self) -> String;
    async fn configure(&self, spec: &TaskSpec) -> Result<ConfigureAck, EngineError>;
    async fn reset(&self) -> Result<Observation, EngineError>;
    async fn step(&self, action: Action) -> Result<StepResult, EngineError>;
    async fn evaluate(&self) -> Result<f64, EngineError>;
    async fn health(&self) -> Result<HealthReport, EngineError>;
}

/// Endpoint name used for managers living in the server's own process.
pub fn local_endpoint(manager: &StateManager) -> String {
    format!("local://{}", manager.replica_id())
}

#[async_trait]
impl ManagerClient for StateManager {
    fn endpoint(&self) -> String {
        local_endpoint(self)
    }

    async fn configure(&self, spec: &TaskSpec) -> Result<ConfigureAck, EngineError> {
        StateManager::configure(self, spec.clone()).await
    }

    async fn reset(&self) -> Result<Observation, EngineError> {
        StateManager::reset(self).await
    }

    async fn step(&self, action: Action) -> Result<StepResult, EngineError> {
        StateManager::step(self, action).await
    }

    async fn evaluate(&self) -> Result<f64, EngineError> {
        StateManager::evaluate(self).await
    }

    async fn health(&self) -> Result<HealthReport, EngineError> {
        Ok(StateManager::health(self))
    }
}

/// Talks to a manager served over HTTP. Transport failures surface as TIMEOUT.
#[derive(Clone, Debug)]
pub struct HttpManagerClient {
    base: String,
    http: reqwest::Client,
}

impl HttpManagerClient {
    pub fn new(endpoint: &str, request_timeout: Duration) -> Result<Self, EngineError> {
        let base = if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
            endpoint.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", endpoint.trim_end_matches('/'))
        };
        let http = reqwest::Client::builder()
            .timeout(request_timeout)
            .build()
            .map_err(|e| EngineError::new(ErrorCode::MalformedMessage, format!("http client: {e}")))?;
        Ok(HttpManagerClient { base, http })
    }

    async fn call<Req: Message, Resp: Message>(&self, path: &str, request: &Req) -> Result<Resp, EngineError> {
        post_message(&self.http, &format!("{}{path}", self.base), request).await
    }
}

/// POSTs one protocol message and decodes either `Resp` or an error record.
pub async fn post_message<Req: Message, Resp: Message>(
    http: &reqwest::Client,
    url: &str,
    request: &Req,
) -> Result<Resp, EngineError> {
    let transport = |e: reqwest::Error| EngineError::new(ErrorCode::Timeout, format!("{url}: {e}"));
    let response = http
        .post(url)
        .header(reqwest::header::CONTENT_TYPE, "application/json")
        .body(encode_message(request))
        .send()
        .await
        .map_err(transport)?;
    let ok = response.status().is_success();
    let body = response.bytes().await.map_err(transport)?;
    if ok {
        decode_message::<Resp>(&body)
    } else {
        Err(decode_message::<EngineError>(&body)?)
    }
}

#[async_trait]
impl ManagerClient for HttpManagerClient {
    fn endpoint(&self) -> String {
        self.base.clone()
    }

    async fn configure(&self, spec: &TaskSpec) -> Result<ConfigureAck, EngineError> {
        self.call("/configure", spec).await
    }

    async fn reset(&self) -> Result<Observation, EngineError> {
        self.call("/reset", &ResetRequest {}).await
    }

    async fn step(&self, action: Action) -> Result<StepResult, EngineError> {
        self.call("/step", &action).await
    }

    async fn evaluate(&self) -> Result<f64, EngineError> {
        self.call::<_, EvaluateResult>("/evaluate", &EvaluateRequest {}).await.map(|r| r.score)
    }

    async fn health(&self) -> Result<HealthReport, EngineError> {
        self.call("/health", &HealthRequest {}).await
    }
}
