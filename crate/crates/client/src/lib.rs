//! Async client for the shuntgate HTTP service.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use shuntgate_core::api::*;
use shuntgate_core::backends::{WireRequest, WireResponse};
use shuntgate_core::distillation::DistillationPlan;
use shuntgate_core::metrics::EvaluationReport;
use shuntgate_core::prompting::PromptRecord;
use shuntgate_core::router::CalibrationResult;
use shuntgate_core::ErrorKind;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error body.
    #[error("{message}")]
    Api {
        kind: ErrorKind,
        status: u16,
        message: String,
    },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response ({status}): {message}")]
    Decode { status: u16, message: String },
}

impl ClientError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ClientError::Api { kind, .. } => *kind,
            ClientError::Transport(_) => ErrorKind::Transport,
            ClientError::Decode { .. } => ErrorKind::Validation,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Result<Self> {
        Self::with_timeout(base, Duration::from_secs(600))
    }

    pub fn with_timeout(base: impl Into<String>, timeout: Duration) -> Result<Self> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self {
            base: base.into().trim_end_matches('/').to_string(),
            http,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<R: DeserializeOwned>(resp: reqwest::Response) -> Result<R> {
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| ClientError::Transport(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
                status: status.as_u16(),
                message: e.to_string(),
            });
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => Err(ClientError::Api {
                kind: body.kind,
                status: status.as_u16(),
                message: body.message,
            }),
            Err(_) => Err(ClientError::Decode {
                status: status.as_u16(),
                message: String::from_utf8_lossy(&bytes).into_owned(),
            }),
        }
    }

    async fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Self::decode(resp).await
    }

    pub async fn health(&self) -> Result<Health> {
        let resp = self
            .http
            .get(format!("{}{HEALTH}", self.base))
            .send()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Self::decode(resp).await
    }

    pub async fn classify(&self, req: &WireRequest) -> Result<WireResponse> {
        self.post(CLASSIFY, req).await
    }

    pub async fn ingest(&self, req: &IngestRequest) -> Result<DatasetResponse> {
        self.post(INGEST, req).await
    }

    pub async fn synth(&self, req: &SynthRequest) -> Result<DatasetResponse> {
        self.post(SYNTH, req).await
    }

    pub async fn calibrate(&self, req: &CalibrateRequest) -> Result<CalibrationResult> {
        self.post(CALIBRATE, req).await
    }

    pub async fn partition(&self, req: &PartitionRequest) -> Result<DistillationPlan> {
        self.post(PARTITION, req).await
    }

    pub async fn distill(&self, req: &DistillRequest) -> Result<DistillResponse> {
        self.post(DISTILL, req).await
    }

    pub async fn route(&self, req: &RouteRequest) -> Result<RouteResponse> {
        self.post(ROUTE, req).await
    }

    pub async fn report(&self, req: &ReportRequest) -> Result<EvaluationReport> {
        self.post(REPORT, req).await
    }

    pub async fn run(&self, req: &RunRequest) -> Result<RunResponse> {
        self.post(RUN, req).await
    }

    pub async fn prompt(&self, req: &PromptRequest) -> Result<PromptRecord> {
        self.post(PROMPT, req).await
    }
}
