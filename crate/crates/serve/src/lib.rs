//! Live click-and-segment sessions over HTTP.
//!
//! Every endpoint lives under `/v1` and speaks JSON except the feature
//! rendering, which returns a PNG. Masks travel as run-length encodings
//! (see [`rle`]).

pub mod error;
pub mod rle;
pub mod session;
pub mod toy;

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use clickprobe::clicks::Click;
use clickprobe::config::ServeConfig;
use clickprobe::data::{load_instance, lookup_ingested_features, read_manifest, read_tensor_file, rgb_png, rgb_to_tensor};
use clickprobe::model::{checkpoint_config, InjectionMode, ProbeModel};
use clickprobe::tensor::Tensor;
use clickprobe::upsample::UpsamplerKind;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex as AsyncMutex, Semaphore};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use session::{Session, View};
pub use toy::{toy_model, TOY_ID};

/// Request bodies above this are refused before JSON parsing.
pub const BODY_LIMIT: usize = 64 << 20;

type ApiResult<T> = Result<T, ApiError>;

/// Checkpoints by id, specialised to an upsampler and injection mode.
pub struct ModelStore {
    checkpoint_dir: Option<PathBuf>,
    cache: Mutex<HashMap<String, Arc<ProbeModel<f32>>>>,
}

impl ModelStore {
    pub fn new(checkpoint_dir: Option<PathBuf>) -> Self {
        ModelStore { checkpoint_dir, cache: Mutex::new(HashMap::new()) }
    }

    fn checkpoint_path(&self, id: &str) -> ApiResult<PathBuf> {
        let valid = !id.is_empty()
            && !id.starts_with('.')
            && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
        let dir = self.checkpoint_dir.as_deref().filter(|_| valid);
        let found = dir.and_then(|d| [d.join(id), d.join(format!("{id}.ckpt"))].into_iter().find(|p| p.is_file()));
        found.ok_or_else(|| ApiError::NotFound(format!("unknown checkpoint {id:?}")))
    }

    /// `None` overrides keep the checkpoint's own setting. The toy model
    /// defaults to bilinear upsampling with late injection.
    pub fn resolve(
        &self,
        id: &str,
        upsampler: Option<UpsamplerKind>,
        injection: Option<InjectionMode>,
    ) -> ApiResult<Arc<ProbeModel<f32>>> {
        let key = format!("{id}|{upsampler:?}|{injection:?}");
        if let Some(m) = self.cache.lock().expect("model cache").get(&key) {
            return Ok(Arc::clone(m));
        }
        let model = if id == TOY_ID {
            toy_model(upsampler.unwrap_or(UpsamplerKind::Bilinear), injection.unwrap_or(InjectionMode::Late))?
        } else {
            let map = read_tensor_file(&self.checkpoint_path(id)?)?;
            let mut cfg = checkpoint_config(&map)?;
            if let Some(u) = upsampler {
                cfg.upsampler = u;
            }
            if let Some(i) = injection {
                cfg.injection = i;
            }
            let mut model = ProbeModel::new(cfg)?;
            model.load_params(&map)?;
            model
        };
        let model = Arc::new(model);
        self.cache.lock().expect("model cache").insert(key, Arc::clone(&model));
        Ok(model)
    }
}

struct Entry {
    session: Arc<AsyncMutex<Session>>,
    last_used: Instant,
}

pub struct AppState {
    cfg: ServeConfig,
    models: ModelStore,
    dataset: Option<PathBuf>,
    sessions: Mutex<HashMap<String, Entry>>,
    pool: Arc<Semaphore>,
    ttl: Duration,
}

impl AppState {
    pub fn new(cfg: ServeConfig, dataset: Option<PathBuf>) -> Self {
        let ttl = Duration::from_secs(cfg.idle_ttl_secs);
        Self::with_ttl(cfg, dataset, ttl)
    }

    pub fn with_ttl(cfg: ServeConfig, dataset: Option<PathBuf>, ttl: Duration) -> Self {
        AppState {
            models: ModelStore::new(cfg.checkpoint_dir.clone()),
            pool: Arc::new(Semaphore::new(cfg.forward_workers.max(1))),
            cfg,
            dataset,
            sessions: Mutex::new(HashMap::new()),
            ttl,
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table").len()
    }

    /// Drops sessions idle for longer than the TTL; returns how many.
    pub fn sweep(&self, now: Instant) -> usize {
        let mut table = self.sessions.lock().expect("session table");
        let before = table.len();
        table.retain(|_, e| now.saturating_duration_since(e.last_used) <= self.ttl);
        before - table.len()
    }

    fn lookup(&self, id: &str) -> ApiResult<Arc<AsyncMutex<Session>>> {
        let now = Instant::now();
        let mut table = self.sessions.lock().expect("session table");
        let expired = match table.get_mut(id) {
            None => return Err(ApiError::NotFound(format!("unknown session {id:?}"))),
            Some(e) if now.saturating_duration_since(e.last_used) > self.ttl => true,
            Some(e) => {
                e.last_used = now;
                return Ok(Arc::clone(&e.session));
            }
        };
        if expired {
            table.remove(id);
        }
        Err(ApiError::NotFound(format!("session {id:?} expired")))
    }

    /// Runs model work on the bounded blocking pool.
    async fn blocking<R: Send + 'static>(&self, f: impl FnOnce() -> ApiResult<R> + Send + 'static) -> ApiResult<R> {
        let _permit = Arc::clone(&self.pool).acquire_owned().await.map_err(|e| ApiError::Internal(e.to_string()))?;
        tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Base64 PNG, optionally as a `data:` URL.
    pub image: Option<String>,
    /// Dataset instance id; attaches its ground truth.
    pub instance: Option<String>,
    pub model: Option<String>,
    pub upsampler: Option<String>,
    pub injection: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub has_gt: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClickRequest {
    pub row: i64,
    pub col: i64,
    pub positive: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Suggestion {
    pub row: usize,
    pub col: usize,
    pub positive: bool,
}

#[derive(Debug, Deserialize)]
pub struct FeaturesQuery {
    pub upsampler: Option<String>,
}

fn decode_png(b64: &str, max_side: usize) -> ApiResult<Tensor<f32>> {
    let payload = b64.split_once(";base64,").map_or(b64, |(_, p)| p);
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(payload.trim())
        .map_err(|e| ApiError::BadRequest(format!("image is not valid base64: {e}")))?;
    let reader = || {
        image::ImageReader::new(Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| ApiError::BadRequest(format!("unreadable image: {e}")))
    };
    let (w, h) = reader()?.into_dimensions().map_err(|e| ApiError::BadRequest(format!("bad image: {e}")))?;
    check_side(h as usize, w as usize, max_side)?;
    let img = reader()?.decode().map_err(|e| ApiError::BadRequest(format!("bad image: {e}")))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

fn check_side(h: usize, w: usize, max_side: usize) -> ApiResult<()> {
    if h == 0 || w == 0 {
        return Err(ApiError::BadRequest("image is empty".into()));
    }
    if h > max_side || w > max_side {
        return Err(ApiError::PayloadTooLarge(format!("image is {h}x{w}; the limit is {max_side} per side")));
    }
    Ok(())
}

fn parse_kind(s: &str) -> ApiResult<UpsamplerKind> {
    s.parse().map_err(|e: clickprobe::Error| ApiError::BadRequest(e.to_string()))
}

fn find_instance(dataset: Option<&Path>, id: &str) -> ApiResult<(PathBuf, clickprobe::data::Instance)> {
    let dir = dataset.ok_or_else(|| ApiError::NotFound(format!("unknown instance {id:?}: no dataset is configured")))?;
    let entry = read_manifest(dir)?
        .into_iter()
        .find(|e| e.id == id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown instance {id:?}")))?;
    Ok((dir.to_path_buf(), load_instance(dir, &entry)?))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<Created>)> {
    let upsampler = req.upsampler.as_deref().map(parse_kind).transpose()?;
    let injection = req
        .injection
        .as_deref()
        .map(|s| s.parse::<InjectionMode>().map_err(|e| ApiError::BadRequest(e.to_string())))
        .transpose()?;
    let model_id = req.model.clone().unwrap_or_else(|| TOY_ID.to_string());
    let worker = Arc::clone(&app);
    let session = app
        .blocking(move || {
            let (image, gt, ingested) = match (&req.image, &req.instance) {
                (Some(b64), None) => (decode_png(b64, worker.cfg.max_image_side)?, None, None),
                (None, Some(id)) => {
                    let (dir, inst) = find_instance(worker.dataset.as_deref(), id)?;
                    let (_, h, w) = inst.image.dims3()?;
                    check_side(h, w, worker.cfg.max_image_side)?;
                    let model = worker.models.resolve(&model_id, upsampler.clone(), injection)?;
                    let ingested = match &model.config().upsampler {
                        UpsamplerKind::Ingested(tag) => Some(lookup_ingested_features(&dir, id, tag, (h, w))?),
                        _ => None,
                    };
                    (inst.image, Some(inst.gt), ingested)
                }
                _ => return Err(ApiError::BadRequest("give exactly one of \"image\" and \"instance\"".into())),
            };
            let model = worker.models.resolve(&model_id, upsampler, injection)?;
            Ok(Session::new(model, image, gt, ingested)?)
        })
        .await?;
    let (height, width) = session.dims();
    let has_gt = session.has_gt();
    let id = uuid::Uuid::new_v4().simple().to_string();
    app.sessions.lock().expect("session table").insert(
        id.clone(),
        Entry { session: Arc::new(AsyncMutex::new(session)), last_used: Instant::now() },
    );
    log::info!("session {id} created ({height}x{width})");
    Ok((StatusCode::CREATED, Json(Created { session_id: id, height, width, has_gt })))
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<View>> {
    let s = app.lookup(&id)?;
    let guard = s.lock().await;
    Ok(Json(guard.view()))
}

async fn delete_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    app.lookup(&id)?;
    app.sessions.lock().expect("session table").remove(&id);
    Ok(StatusCode::NO_CONTENT)
}

async fn add_click(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ClickRequest>,
) -> ApiResult<Json<View>> {
    let s = app.lookup(&id)?;
    let mut guard = s.lock_owned().await;
    if !guard.in_bounds(req.row, req.col) {
        let (h, w) = guard.dims();
        return Err(ApiError::Unprocessable(format!("click ({}, {}) is outside the {h}x{w} image", req.row, req.col)));
    }
    let click = Click::new(req.row as usize, req.col as usize, req.positive);
    app.blocking(move || {
        guard.click(click)?;
        Ok(Json(guard.view()))
    })
    .await
}

async fn undo(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<View>> {
    let s = app.lookup(&id)?;
    let mut guard = s.lock().await;
    if !guard.undo() {
        return Err(ApiError::Conflict("nothing to undo".into()));
    }
    Ok(Json(guard.view()))
}

async fn reset(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<View>> {
    let s = app.lookup(&id)?;
    let mut guard = s.lock().await;
    guard.reset();
    Ok(Json(guard.view()))
}

async fn features(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FeaturesQuery>,
) -> ApiResult<impl IntoResponse> {
    let kind = q.upsampler.as_deref().map(parse_kind).transpose()?;
    let s = app.lookup(&id)?;
    let guard = s.lock_owned().await;
    let png = app
        .blocking(move || {
            let kind = kind.unwrap_or_else(|| guard.model().config().upsampler.clone());
            let ingested = guard.ingested().filter(|_| kind == guard.model().config().upsampler);
            let rgb = guard.model().visualize_features(guard.image(), &kind, ingested)?;
            Ok(rgb_png(&rgb)?)
        })
        .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

async fn suggest(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Suggestion>> {
    let s = app.lookup(&id)?;
    let guard = s.lock().await;
    match guard.suggest()? {
        Some(c) => Ok(Json(Suggestion { row: c.row, col: c.col, positive: c.positive })),
        None => Err(ApiError::Conflict("session has no ground truth".into())),
    }
}

fn cors(origin: &str) -> CorsLayer {
    let allow = match origin {
        "*" => AllowOrigin::from(Any),
        o => match HeaderValue::from_str(o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => {
                log::warn!("ignoring unparsable CORS origin {o:?}");
                AllowOrigin::list([])
            }
        },
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::DELETE])
        .allow_headers([header::CONTENT_TYPE])
}

pub fn router(app: Arc<AppState>) -> Router {
    let static_dir = app.cfg.static_dir.clone();
    let cors = cors(&app.cfg.cors_origin);
    let mut r = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session).delete(delete_session))
        .route("/v1/sessions/{id}/clicks", post(add_click))
        .route("/v1/sessions/{id}/undo", post(undo))
        .route("/v1/sessions/{id}/reset", post(reset))
        .route("/v1/sessions/{id}/features", get(features))
        .route("/v1/suggest/{id}", get(suggest))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(app);
    if let Some(dir) = static_dir {
        r = r.fallback_service(ServeDir::new(dir));
    }
    r.layer(cors)
}

/// Serves until the process is stopped, sweeping idle sessions periodically.
pub async fn serve(app: Arc<AppState>) -> std::io::Result<()> {
    let addr = format!("{}:{}", app.cfg.host, app.cfg.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let sweeper = Arc::clone(&app);
    let period = sweeper.ttl.clamp(Duration::from_secs(1), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let dropped = sweeper.sweep(Instant::now());
            if dropped > 0 {
                log::info!("dropped {dropped} idle sessions");
            }
        }
    });
    axum::serve(listener, router(app)).await
}

/// Blocking entry point with its own runtime.
pub fn run(cfg: ServeConfig, dataset: Option<PathBuf>) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve(Arc::new(AppState::new(cfg, dataset))))
}
