//! HTTP review service over one project directory.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use calltriage::cluster::sample_for_review;
use calltriage::dsp::{render_png, MelSpectrogram};
use calltriage::ingest::{encode_wav_pcm16, CorpusRole};
use calltriage::pipeline;
use calltriage::project2d::ProjectionMethod;
use calltriage::store::{Project, Stage, StageState, WindowRecord};
use calltriage::triage::ClusterLabel;
use calltriage::Error;

pub const DEFAULT_SAMPLE_COUNT: usize = 9;

/// JSON error body `{code, message}` with its HTTP status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid-argument", message)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::NotFound(_) => Self::not_found(message),
            Error::NoLabels => Self::new(StatusCode::CONFLICT, "no-labels", message),
            Error::Dependency { .. } => Self::new(StatusCode::CONFLICT, "not-ready", message),
            Error::InvalidArgument(_) | Error::Config(_) | Error::Shape { .. } => Self::unprocessable(message),
            Error::MissingTruth(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "missing-truth", message),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Default)]
struct SpecCache {
    seq: Option<u64>,
    index: HashMap<String, usize>,
    specs: Vec<MelSpectrogram>,
}

pub struct AppState {
    project: RwLock<Project>,
    specs: Mutex<SpecCache>,
}

impl AppState {
    pub fn new(project: Project) -> Arc<Self> {
        Arc::new(Self {
            project: RwLock::new(project),
            specs: Mutex::new(SpecCache::default()),
        })
    }
}

type Shared = Arc<AppState>;

async fn read<R: Send + 'static>(
    state: &Shared,
    f: impl FnOnce(&Project) -> ApiResult<R> + Send + 'static,
) -> ApiResult<R> {
    let state = state.clone();
    blocking(move || f(&state.project.read().expect("project lock poisoned"))).await
}

async fn write<R: Send + 'static>(
    state: &Shared,
    f: impl FnOnce(&mut Project) -> ApiResult<R> + Send + 'static,
) -> ApiResult<R> {
    let state = state.clone();
    blocking(move || f(&mut state.project.write().expect("project lock poisoned"))).await
}

async fn blocking<R: Send + 'static>(f: impl FnOnce() -> ApiResult<R> + Send + 'static) -> ApiResult<R> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

/// Builds the router. Static assets under `static_dir`, when given, are
/// served for every path outside `/api` and `/media`.
pub fn router(state: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/project", get(get_project))
        .route("/api/clusters", get(get_clusters))
        .route("/api/clusters/{id}/samples", get(get_samples))
        .route("/api/clusters/{id}/label", post(post_label))
        .route("/api/propagate", post(post_propagate))
        .route("/api/recordings", get(get_recordings))
        .route("/api/metrics", get(get_metrics))
        .route("/api/projection", get(get_projection))
        .route("/media/spectrogram/{file}", get(get_spectrogram))
        .route("/media/audio/{file}", get(get_audio))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::not_found("no such route") }),
    }
}

#[derive(Serialize)]
struct ProjectView {
    root: String,
    stages: std::collections::BTreeMap<Stage, StageState>,
    config: calltriage::store::ProjectConfig,
}

async fn get_project(State(state): State<Shared>) -> ApiResult<Json<ProjectView>> {
    read(&state, |p| {
        Ok(Json(ProjectView {
            root: p.root().display().to_string(),
            stages: p.status().states(),
            config: p.config.clone(),
        }))
    })
    .await
}

async fn get_clusters(State(state): State<Shared>) -> ApiResult<Json<Vec<pipeline::ClusterSummary>>> {
    read(&state, |p| Ok(Json(pipeline::cluster_summaries(p)?))).await
}

fn parse_cluster(id: &str) -> ApiResult<usize> {
    id.parse().map_err(|_| ApiError::not_found(format!("cluster `{id}`")))
}

fn parse_param<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str, default: T) -> ApiResult<T> {
    match q.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::unprocessable(format!("bad value `{v}` for `{key}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    pub window_id: String,
    pub spectrogram_url: String,
    pub audio_url: String,
    pub recording_id: String,
    pub start_s: f64,
}

async fn get_samples(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Vec<SampleView>>> {
    let cluster = parse_cluster(&id)?;
    let n = parse_param(&q, "n", DEFAULT_SAMPLE_COUNT)?;
    read(&state, move |p| {
        let seed = parse_param(&q, "seed", p.config.seed)?;
        let (_, assignment) = p.load_clusters()?;
        let ids = sample_for_review(&assignment, cluster, n, seed)?;
        let windows: HashMap<String, WindowRecord> = p
            .load_windows()?
            .into_iter()
            .map(|w| (w.window_id.clone(), w))
            .collect();
        Ok(Json(
            ids.into_iter()
                .map(|id| {
                    let w = &windows[&id];
                    SampleView {
                        spectrogram_url: format!("/media/spectrogram/{id}.png"),
                        audio_url: format!("/media/audio/{id}.wav"),
                        recording_id: w.recording_id.clone(),
                        start_s: w.start_s,
                        window_id: id,
                    }
                })
                .collect(),
        ))
    })
    .await
}

#[derive(Deserialize)]
struct LabelRequest {
    label: String,
    #[serde(default)]
    annotator: Option<String>,
}

async fn post_label(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<calltriage::triage::ClusterLabelMap>> {
    let cluster = parse_cluster(&id)?;
    let req: LabelRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("bad label request: {e}")))?;
    let label = match req.label.as_str() {
        "call" => ClusterLabel::Call,
        "noise" => ClusterLabel::Noise,
        other => {
            return Err(ApiError::unprocessable(format!(
                "label must be `call` or `noise`, got `{other}`"
            )))
        }
    };
    write(&state, move |p| {
        let (labels, _) = pipeline::label(p, cluster, label, req.annotator)?;
        Ok(Json(labels))
    })
    .await
}

#[derive(Deserialize, Default)]
struct PropagateRequest {
    #[serde(default)]
    radius: Option<f64>,
}

async fn post_propagate(State(state): State<Shared>, body: Bytes) -> ApiResult<Json<pipeline::PropagationSummary>> {
    let req: PropagateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        PropagateRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("bad propagate request: {e}")))?
    };
    write(&state, move |p| Ok(Json(pipeline::propagate(p, req.radius)?))).await
}

async fn get_recordings(State(state): State<Shared>) -> ApiResult<Json<Vec<calltriage::triage::RecordingVerdict>>> {
    read(&state, |p| Ok(Json(p.load_verdicts()?.recordings))).await
}

async fn get_metrics(State(state): State<Shared>) -> ApiResult<Json<calltriage::triage::MetricsReport>> {
    read(&state, |p| {
        if p.load_truth()?.is_none() {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "no-truth",
                "project has no ground truth",
            ));
        }
        Ok(Json(p.load_metrics()?))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub window_id: String,
    pub x: f64,
    pub y: f64,
    /// Reference windows carry their k-means cluster, field windows the
    /// propagated one (absent when unassigned or not yet propagated).
    pub cluster: Option<usize>,
    pub corpus_role: CorpusRole,
}

async fn get_projection(
    State(state): State<Shared>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Vec<ProjectionPoint>>> {
    let method: ProjectionMethod = parse_param(&q, "method", ProjectionMethod::Pca)?;
    read(&state, move |p| {
        let rows = p.load_projection(method)?;
        let mut clusters: HashMap<String, usize> = HashMap::new();
        if let Ok((_, a)) = p.load_clusters() {
            clusters.extend(a.window_ids.into_iter().zip(a.clusters));
        }
        if let Ok(r) = p.load_propagation() {
            let a = r.assignment;
            clusters.extend(
                a.window_ids
                    .into_iter()
                    .zip(a.clusters)
                    .filter_map(|(w, c)| c.map(|c| (w, c))),
            );
        }
        Ok(Json(
            rows.into_iter()
                .map(|r| ProjectionPoint {
                    cluster: clusters.get(&r.window_id).copied(),
                    window_id: r.window_id,
                    x: r.x,
                    y: r.y,
                    corpus_role: r.corpus_role,
                })
                .collect(),
        ))
    })
    .await
}

fn strip_ext<'a>(file: &'a str, ext: &str) -> ApiResult<&'a str> {
    file.strip_suffix(ext)
        .ok_or_else(|| ApiError::not_found(format!("`{file}` (expected *{ext})")))
}

async fn get_spectrogram(State(state): State<Shared>, Path(file): Path<String>) -> ApiResult<Response> {
    let id = strip_ext(&file, ".png")?.to_string();
    let shared = state.clone();
    let png = blocking(move || {
        let project = shared.project.read().expect("project lock poisoned");
        let seq = project.status().stages.get(&Stage::Spectrogrammed).map(|r| r.seq);
        let mut cache = shared.specs.lock().expect("cache lock poisoned");
        if cache.seq != seq || seq.is_none() {
            let specs = project.load_spectrograms()?;
            cache.index = specs
                .iter()
                .enumerate()
                .map(|(i, s)| (s.window_id.clone(), i))
                .collect();
            cache.specs = specs;
            cache.seq = seq;
        }
        let i = *cache
            .index
            .get(&id)
            .ok_or_else(|| ApiError::not_found(format!("window `{id}`")))?;
        Ok(render_png(&cache.specs[i]))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_audio(State(state): State<Shared>, Path(file): Path<String>) -> ApiResult<Response> {
    let id = strip_ext(&file, ".wav")?.to_string();
    let wav = read(&state, move |p| {
        let record = p
            .load_windows()?
            .into_iter()
            .find(|w| w.window_id == id)
            .ok_or_else(|| ApiError::not_found(format!("window `{id}`")))?;
        let samples = pipeline::window_audio(p, &record)?;
        Ok(encode_wav_pcm16(&samples, p.config.sample_rate))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], wav).into_response())
}

/// Serves `project` on `port` until the process is stopped.
pub async fn serve(project: Project, port: u16, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let app = router(AppState::new(project), static_dir);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}
