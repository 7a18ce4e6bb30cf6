//! HTTP service: JSON endpoints over the registry, with runs executed on
//! a bounded worker pool and metric streams served as server-sent events
//! or plain JSON for polling.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use units_core::data::{LabelSet, MissingIndex, TimeSeriesDataset};
use units_core::error::{param_err, Error, Result};

use crate::evaluate::predict;
use crate::jobs::{prepare_finetune, prepare_pretrain, FinetuneRequest, PretrainRequest};
use crate::registry::{MetricPoint, Registry, RunHandle, RunStatus, StoredDataset};

pub const DEFAULT_WORKERS: usize = 2;
const SSE_POLL: Duration = Duration::from_millis(200);

#[derive(Clone)]
pub struct AppState {
    registry: Arc<Registry>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(registry: Arc<Registry>, workers: usize) -> Self {
        Self {
            registry,
            workers: Arc::new(Semaphore::new(workers.max(1))),
        }
    }

    /// Queues `work` on the worker pool.
    fn submit(&self, work: impl FnOnce(&Registry) + Send + 'static) {
        let registry = self.registry.clone();
        let workers = self.workers.clone();
        tokio::spawn(async move {
            let Ok(_permit) = workers.acquire_owned().await else {
                return;
            };
            let _ = tokio::task::spawn_blocking(move || work(&registry)).await;
        });
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/datasets", post(upload_dataset))
        .route("/runs/pretrain", post(start_pretrain))
        .route("/runs/finetune", post(start_finetune))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/metrics", get(get_metrics))
        .route("/encoders", get(list_encoders))
        .route("/models/{id}/predict", post(predict_model))
        .route("/models/{id}/export", get(export_model))
        .route("/models/{id}/evaluation", get(get_evaluation))
        .with_state(state)
}

/// Error body: `{"error": <kind>, "message": <text>}`.
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::State(_) => (StatusCode::CONFLICT, "state"),
            Error::Version { .. } => (StatusCode::BAD_REQUEST, "version"),
            Error::Format { .. } | Error::Json(_) => (StatusCode::BAD_REQUEST, "format"),
            Error::Shape(_) => (StatusCode::BAD_REQUEST, "shape"),
            Error::NonFiniteInput { .. } | Error::NonFinite(_) => (StatusCode::UNPROCESSABLE_ENTITY, "non_finite"),
            Error::Parameter(_) => (StatusCode::BAD_REQUEST, "parameter"),
            Error::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
        };
        let body = serde_json::json!({ "error": kind, "message": self.0.to_string() });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Samples as `N x D x T` nested arrays; `null` marks a missing cell.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SamplesBody {
    pub samples: Vec<Vec<Vec<Option<f64>>>>,
}

impl SamplesBody {
    pub fn from_dataset(x: &TimeSeriesDataset, missing: &MissingIndex) -> Self {
        let (n, d, t) = x.shape();
        Self {
            samples: (0..n)
                .map(|i| {
                    (0..d)
                        .map(|j| {
                            (0..t)
                                .map(|k| (!missing.contains(i, j, k)).then(|| x.get(i, j, k)))
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn to_dataset(&self) -> Result<(TimeSeriesDataset, MissingIndex)> {
        let n = self.samples.len();
        let d = self.samples.first().map_or(0, Vec::len);
        let t = self.samples.first().and_then(|s| s.first()).map_or(0, Vec::len);
        let mut values = Vec::with_capacity(n * d * t);
        let mut missing = MissingIndex::new(n);
        for (i, s) in self.samples.iter().enumerate() {
            if s.len() != d {
                return Err(param_err(format!("sample {i} has {} channels, expected {d}", s.len())));
            }
            for (j, c) in s.iter().enumerate() {
                if c.len() != t {
                    return Err(param_err(format!("sample {i} channel {j} has {} steps, expected {t}", c.len())));
                }
                for (k, v) in c.iter().enumerate() {
                    match v {
                        Some(v) => values.push(*v),
                        None => {
                            missing.insert(i, j, k);
                            values.push(0.0);
                        }
                    }
                }
            }
        }
        Ok((TimeSeriesDataset::new(n, d, t, values)?, missing))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetUpload {
    #[serde(flatten)]
    pub data: SamplesBody,
    #[serde(default)]
    pub labels: Option<LabelSet>,
}

async fn upload_dataset(State(s): State<AppState>, Json(body): Json<DatasetUpload>) -> ApiResult<impl IntoResponse> {
    let (dataset, missing) = body.data.to_dataset()?;
    let rec = s.registry.add_dataset(&StoredDataset {
        dataset,
        missing,
        labels: body.labels,
    })?;
    Ok((StatusCode::CREATED, Json(rec)))
}

async fn start_pretrain(State(s): State<AppState>, Json(req): Json<PretrainRequest>) -> ApiResult<impl IntoResponse> {
    let jobs = prepare_pretrain(&s.registry, &req)?;
    let run_ids: Vec<String> = jobs.iter().map(|j| j.run_id()).collect();
    for job in jobs {
        s.submit(move |r| {
            let _ = job.execute(r);
        });
    }
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "run_ids": run_ids }))))
}

async fn start_finetune(State(s): State<AppState>, Json(req): Json<FinetuneRequest>) -> ApiResult<impl IntoResponse> {
    let job = prepare_finetune(&s.registry, &req)?;
    let body = serde_json::json!({ "run_id": job.run_id(), "model_id": job.model_id() });
    s.submit(move |r| {
        let _ = job.execute(r);
    });
    Ok((StatusCode::ACCEPTED, Json(body)))
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.registry.run(&id)?.snapshot()))
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    /// Only points with a larger step.
    since: Option<usize>,
    /// `sse` forces an event stream.
    stream: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsPage {
    pub run_id: String,
    pub status: RunStatus,
    pub metrics: Vec<MetricPoint>,
}

async fn get_metrics(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<MetricsQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let run = s.registry.run(&id)?;
    let wants_sse = q.stream.as_deref() == Some("sse")
        || headers
            .get(header::ACCEPT)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.contains("text/event-stream"));
    let since = q.since;
    if wants_sse {
        return Ok(Sse::new(metric_events(run, since)).keep_alive(KeepAlive::default()).into_response());
    }
    let status = run.status();
    let metrics = run
        .metrics()
        .iter()
        .filter(|p| since.is_none_or(|s| p.step > s))
        .copied()
        .collect();
    Ok(Json(MetricsPage {
        run_id: id,
        status,
        metrics,
    })
    .into_response())
}

/// `metric` events (one per point, in step order) followed by one `status`
/// event once the run has finished.
fn metric_events(run: Arc<RunHandle>, since: Option<usize>) -> impl Stream<Item = std::result::Result<Event, Infallible>> {
    struct Feed {
        run: Arc<RunHandle>,
        sent: usize,
        since: Option<usize>,
        pending: VecDeque<Event>,
        finished: bool,
    }
    let feed = Feed {
        run,
        sent: 0,
        since,
        pending: VecDeque::new(),
        finished: false,
    };
    stream::unfold(feed, |mut f| async move {
        loop {
            if let Some(ev) = f.pending.pop_front() {
                return Some((Ok(ev), f));
            }
            if f.finished {
                return None;
            }
            let status = f.run.status();
            let metrics = f.run.metrics();
            for p in &metrics[f.sent..] {
                if f.since.is_none_or(|s| p.step > s) {
                    let data = serde_json::to_string(p).unwrap_or_default();
                    f.pending.push_back(Event::default().event("metric").id(p.step.to_string()).data(data));
                }
            }
            f.sent = metrics.len();
            if status != RunStatus::Running {
                let data = serde_json::json!({ "status": status }).to_string();
                f.pending.push_back(Event::default().event("status").data(data));
                f.finished = true;
            } else if f.pending.is_empty() {
                tokio::time::sleep(SSE_POLL).await;
            }
        }
    })
}

async fn list_encoders(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.registry.encoders())
}

/// Prediction input: a registered dataset or inline samples.
#[derive(Debug, Deserialize)]
struct PredictBody {
    dataset_id: Option<String>,
    #[serde(default)]
    samples: Option<Vec<Vec<Vec<Option<f64>>>>>,
}

async fn predict_model(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<PredictBody>,
) -> ApiResult<impl IntoResponse> {
    let registry = s.registry.clone();
    let out = tokio::task::spawn_blocking(move || {
        let model = registry.model(&id)?;
        let (x, missing) = match (body.dataset_id, body.samples) {
            (Some(d), None) => {
                let stored = registry.dataset(&d)?;
                (stored.dataset, stored.missing)
            }
            (None, Some(samples)) => SamplesBody { samples }.to_dataset()?,
            _ => return Err(param_err("give exactly one of dataset_id and samples")),
        };
        predict(&model, &x, &missing)
    })
    .await
    .map_err(|e| Error::State(format!("prediction task failed: {e}")))??;
    Ok(Json(out))
}

async fn export_model(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let bytes = s.registry.model_export(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes))
}

async fn get_evaluation(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let rec = s.registry.model_record(&id)?;
    let eval = rec
        .evaluation
        .ok_or_else(|| Error::NotFound(format!("evaluation of model '{id}'")))?;
    Ok(Json(eval))
}

/// Serves the API on `port` until the process is stopped.
pub async fn serve(registry: Arc<Registry>, port: u16, workers: usize) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    axum::serve(listener, router(AppState::new(registry, workers))).await?;
    Ok(())
}
