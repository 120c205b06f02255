//! Axum service exposing the cascade operations over HTTP/JSON.
//!
//! Every handler runs its work on the blocking pool; the request and
//! response bodies live in [`shuntgate_core::api`].

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use shuntgate_core::api::*;
use shuntgate_core::backends::{classify, Sample, SimulatedOracle, SimulatedOracleConfig, WireRequest, WireResponse};
use shuntgate_core::distillation::{distill, Checkpoint, DistillSchedule, LinearSoftmaxClassifier};
use shuntgate_core::harness::{
    calibrate_experiment, execute_run, generate_synthetic, plan_experiment, read_csv, read_jsonl, route_input,
    CalibrationSpec, RecordFormat, SplitName,
};
use shuntgate_core::metrics::evaluate;
use shuntgate_core::prob::ClassId;
use shuntgate_core::prompting::{ProficiencySet, PromptBuilder, PromptRecord, Template, DEFAULT_ANNOTATION};
use shuntgate_core::{ErrorKind, ShuntError};
use tokio::net::TcpListener;
use tracing::{debug, info, warn};

/// Settings for one service instance.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Answers `/v1/classify`.
    pub oracle: SimulatedOracleConfig,
    /// Gold labels the oracle may consult, keyed by sample id.
    pub gold: BTreeMap<String, ClassId>,
    /// Default parent directory for `/v1/run`.
    pub runs_root: PathBuf,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            oracle: SimulatedOracleConfig::with_accuracy(0.9, 0),
            gold: BTreeMap::new(),
            runs_root: PathBuf::from("runs"),
        }
    }
}

struct AppState {
    oracle: SimulatedOracle,
    gold: BTreeMap<String, ClassId>,
    runs_root: PathBuf,
}

type Shared = Arc<AppState>;

/// A [`ShuntError`] rendered as `{kind, message}` with a matching status.
#[derive(Debug)]
pub struct ApiError(pub ShuntError);

impl From<ShuntError> for ApiError {
    fn from(e: ShuntError) -> Self {
        ApiError(e)
    }
}

pub fn status_for(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::Validation => StatusCode::BAD_REQUEST,
        ErrorKind::Transport => StatusCode::BAD_GATEWAY,
        ErrorKind::Training => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody::from(&self.0);
        debug!(kind = ?body.kind, message = %body.message, "request failed");
        (status_for(body.kind), Json(body)).into_response()
    }
}

/// `Json` whose rejections use the service's error body.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(e) => Err(ApiError(ShuntError::protocol(rejection_text(&e)))),
        }
    }
}

fn rejection_text(e: &JsonRejection) -> String {
    format!("bad request body: {}", e.body_text())
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> shuntgate_core::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError),
        Err(e) => Err(ApiError(ShuntError::training(format!("worker panicked: {e}")))),
    }
}

pub fn router(config: ServerConfig) -> shuntgate_core::Result<Router> {
    let state = Arc::new(AppState {
        oracle: SimulatedOracle::new(config.oracle)?,
        gold: config.gold,
        runs_root: config.runs_root,
    });
    Ok(Router::new()
        .route(HEALTH, get(health))
        .route(CLASSIFY, post(classify_handler))
        .route(INGEST, post(ingest))
        .route(SYNTH, post(synth))
        .route(CALIBRATE, post(calibrate))
        .route(PARTITION, post(partition))
        .route(DISTILL, post(distill_handler))
        .route(ROUTE, post(route))
        .route(REPORT, post(report))
        .route(RUN, post(run))
        .route(PROMPT, post(prompt))
        .with_state(state))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    config: ServerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> shuntgate_core::Result<()> {
    let app = router(config)?;
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

/// Binds an ephemeral local port and serves in the background. Returns the
/// bound address; the task ends with the runtime.
pub async fn spawn_local(config: ServerConfig) -> shuntgate_core::Result<SocketAddr> {
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let app = router(config)?;
    tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            warn!(error = %e, "embedded server stopped");
        }
    });
    Ok(addr)
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn classify_handler(State(st): State<Shared>, ApiJson(req): ApiJson<WireRequest>) -> ApiResult<WireResponse> {
    blocking(move || {
        let mut sample = Sample::text(req.id.clone(), req.payload);
        sample.gold_label = st.gold.get(&req.id).cloned();
        sample.validate()?;
        let p = classify(&st.oracle, &sample, &req.candidates, req.prompt.as_deref())?;
        Ok(WireResponse {
            probs: p.probs.probs().to_vec(),
            class_ids: p.probs.class_ids().to_vec(),
            input_tokens: p.usage.input_tokens,
            output_tokens: p.usage.output_tokens,
        })
    })
    .await
}

async fn ingest(ApiJson(req): ApiJson<IngestRequest>) -> ApiResult<DatasetResponse> {
    blocking(move || {
        let samples = match req.format {
            RecordFormat::Jsonl => read_jsonl(req.content.as_bytes())?,
            RecordFormat::Csv => read_csv(req.content.as_bytes())?,
        };
        Ok(DatasetResponse { samples })
    })
    .await
}

async fn synth(ApiJson(req): ApiJson<SynthRequest>) -> ApiResult<DatasetResponse> {
    blocking(move || {
        Ok(DatasetResponse {
            samples: generate_synthetic(&req.task)?,
        })
    })
    .await
}

async fn calibrate(ApiJson(req): ApiJson<CalibrateRequest>) -> ApiResult<shuntgate_core::router::CalibrationResult> {
    blocking(move || {
        let spec = CalibrationSpec {
            grid: req.grid,
            objective: req.objective,
            target: req.target,
            split: req.split.unwrap_or(SplitName::Validation),
        };
        calibrate_experiment(&req.config, spec)
    })
    .await
}

async fn partition(
    ApiJson(req): ApiJson<PartitionRequest>,
) -> ApiResult<shuntgate_core::distillation::DistillationPlan> {
    blocking(move || plan_experiment(&req.config)).await
}

async fn distill_handler(ApiJson(req): ApiJson<DistillRequest>) -> ApiResult<DistillResponse> {
    blocking(move || {
        let mut plan = req.plan;
        if let Some(e) = req.epochs {
            plan.schedule.epochs = e;
        }
        if let Some(r) = &req.ratio {
            let (large_batches, self_batches) = DistillSchedule::parse_ratio(r)?;
            plan.schedule.large_batches = large_batches;
            plan.schedule.self_batches = self_batches;
        }
        let start = plan
            .specific_checkpoint
            .as_ref()
            .ok_or_else(|| ShuntError::config("plan carries no specific-model checkpoint to start from"))?;
        let mut student = LinearSoftmaxClassifier::try_from(start.clone())?.with_name("learnable-small");
        let report = distill(&plan, &mut student)?;
        Ok(DistillResponse {
            report,
            checkpoint: Checkpoint::from(&student),
        })
    })
    .await
}

async fn route(ApiJson(req): ApiJson<RouteRequest>) -> ApiResult<RouteResponse> {
    blocking(move || {
        let art = route_input(&req.config, &req.input)?;
        Ok(RouteResponse {
            delta: art.delta.expect("delta set before routing"),
            outcomes: art.outcomes,
            ledgers: art.ledgers,
        })
    })
    .await
}

async fn report(ApiJson(req): ApiJson<ReportRequest>) -> ApiResult<shuntgate_core::metrics::EvaluationReport> {
    blocking(move || evaluate(&req.outcomes, &req.gold)).await
}

async fn run(State(st): State<Shared>, ApiJson(req): ApiJson<RunRequest>) -> ApiResult<RunResponse> {
    blocking(move || {
        let root = req.out_dir.unwrap_or_else(|| st.runs_root.clone());
        let (run_dir, art) = execute_run(&req.config, &root)?;
        Ok(RunResponse {
            run_dir,
            delta: art.delta,
            report: art.report,
            ledgers: art.ledgers,
        })
    })
    .await
}

async fn prompt(ApiJson(req): ApiJson<PromptRequest>) -> ApiResult<PromptRecord> {
    blocking(move || {
        let proficient = match req.proficient {
            Some(classes) => ProficiencySet::explicit(classes),
            None => ProficiencySet::from_accuracies(&req.accuracies, req.rule),
        };
        let annotation = match req.annotation {
            Some(t) => t,
            None => Template::parse(DEFAULT_ANNOTATION)?,
        };
        let builder = PromptBuilder::with_annotation(req.template, annotation)?;
        match req.mode {
            PruneMode::Soft => builder.soft(&req.small_probs, &proficient),
            PruneMode::Hard => {
                let candidates = req.candidates.unwrap_or_else(|| req.small_probs.class_ids().to_vec());
                builder.hard(&req.small_probs, &proficient, &candidates)
            }
        }
    })
    .await
}
