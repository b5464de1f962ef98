use std::sync::atomic::Ordering;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State, WebSocketUpgrade};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hilo_core::analysis::{self, bonferroni_pairwise, rm_anova_oneway, Factor, Metric, RmTable};
use hilo_core::protocol::{ProtocolError, Session, SessionConfig, ValidationReport};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{Registry, Status};

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(inspect))
        .route("/sessions/{id}/results", get(results))
        .route("/sessions/{id}/last_trial", get(last_trial))
        .route("/sessions/{id}/start", post(start))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(registry)
}

struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session `{id}`"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "field": self.field }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_config(body: &[u8]) -> ApiResult<SessionConfig> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    let de = &mut serde_json::Deserializer::from_slice(body);
    let cfg: SessionConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: inner.to_string(),
            field: Some(field),
        }
    })?;
    cfg.validate().map_err(|e| match e {
        ProtocolError::Config { field, reason } => ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: format!("{field}: {reason}"),
            field: Some(field),
        },
        other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
    })?;
    Ok(cfg)
}

async fn create(State(reg): State<Arc<Registry>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let cfg = parse_config(&body)?;
    let session = Session::new(cfg).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let entry = reg.insert(session);
    let mode = if entry.live { "live" } else { "batch" };
    Ok((StatusCode::CREATED, Json(json!({ "id": entry.id.to_string(), "mode": mode }))))
}

#[derive(Serialize)]
struct StatusView {
    id: String,
    mode: &'static str,
    status: Status,
    phase: crate::messages::Phase,
    started: bool,
    stream_attached: bool,
    day: u32,
    generation: u64,
    completed_trials: usize,
    archive_len: usize,
    invalidated_trials: u64,
    clock_s: f64,
    mean: Vec<f64>,
    sigma: f64,
}

async fn inspect(State(reg): State<Arc<Registry>>, Path(id): Path<String>) -> ApiResult<Json<StatusView>> {
    let e = reg.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let s = e.snapshot();
    let phase = *e.phase.lock().unwrap();
    Ok(Json(StatusView {
        id: e.id.to_string(),
        mode: if e.live { "live" } else { "batch" },
        status: e.status(),
        phase,
        started: e.started.load(Ordering::SeqCst),
        stream_attached: e.attached.load(Ordering::SeqCst),
        day: s.day,
        generation: s.cma.generation,
        completed_trials: s.completed_trials(),
        archive_len: s.archive.len(),
        invalidated_trials: e.invalidated_trials(),
        clock_s: s.clock_s,
        mean: s.cma.mean.iter().copied().collect(),
        sigma: s.cma.sigma,
    }))
}

/// Within-session analysis of the latest validation block: validation
/// rounds are the repeated unit and the four conditions the factor.
fn round_analysis(report: &ValidationReport) -> Result<Value, analysis::AnalysisError> {
    let conditions: Vec<_> = report.rounds[0].order.to_vec();
    let mut values = Vec::new();
    for r in 0..report.rounds.len() {
        for c in &conditions {
            let cost = report.cost(r, *c).map_or(f64::NAN, |c| Metric::Total.of(c));
            values.push(cost);
        }
    }
    let table = RmTable::new(
        (1..=report.rounds.len()).map(|r| format!("round{r}")).collect(),
        conditions.iter().map(|c| analysis::condition_label(*c).to_string()).collect(),
        vec![format!("day{}", report.day + 1)],
        values,
    )?;
    let anova = rm_anova_oneway(&table)?;
    let pairwise = bonferroni_pairwise(&table, Factor::Condition)?;
    let summary = analysis::summary_table(&anova, &[(Factor::Condition, pairwise.clone())]);
    Ok(json!({ "day": report.day, "anova": anova, "pairwise": pairwise, "summary": summary }))
}

async fn results(State(reg): State<Arc<Registry>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let e = reg.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let s = e.snapshot();
    let analysis = s.reports.last().map(|r| match round_analysis(r) {
        Ok(v) => v,
        Err(err) => json!({ "error": err.to_string() }),
    });
    Ok(Json(json!({
        "id": e.id.to_string(),
        "status": e.status(),
        "archive": s.archive.records(),
        "reports": s.reports,
        "history": s.history,
        "analysis": analysis,
    })))
}

async fn last_trial(State(reg): State<Arc<Registry>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let e = reg.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let last = e.last_trial.lock().unwrap().clone();
    Ok(Json(json!(last)))
}

async fn start(State(reg): State<Arc<Registry>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let e = reg.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    if e.snapshot().is_finished() {
        return Err(ApiError::new(StatusCode::CONFLICT, "session is finished"));
    }
    if e.live {
        e.started.store(true, Ordering::SeqCst);
        if e.status() == Status::Waiting {
            e.set_status(Status::Running);
        }
    }
    Ok(Json(json!({ "id": e.id.to_string(), "status": e.status() })))
}

async fn stream(State(reg): State<Arc<Registry>>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Response {
    let Some(e) = reg.get(&id) else {
        return ApiError::not_found(&id).into_response();
    };
    if !e.live {
        return ApiError::new(StatusCode::CONFLICT, "batch sessions have no stream").into_response();
    }
    if e.attached.swap(true, Ordering::SeqCst) {
        return ApiError::new(StatusCode::CONFLICT, "a stream is already attached").into_response();
    }
    let failed = e.clone();
    ws.on_failed_upgrade(move |_| failed.attached.store(false, Ordering::SeqCst))
        .on_upgrade(move |socket| async move {
        crate::live::run(socket, e.clone()).await;
        e.attached.store(false, Ordering::SeqCst);
    })
}
