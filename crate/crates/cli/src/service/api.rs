use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use fieldseg::model::{read_checkpoint, Stage};
use fieldseg::scene::{load_scene, read_scene_file, CameraEntry};
use fieldseg::segmentation::{StrokeSet, DEFAULT_K};
use fieldseg::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::session::{Session, Stats};
use super::ServiceConfig;
use crate::preview::{camera_from_entry, encode_rgb_png, feature_pca_rgb};

pub struct AppState {
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn scenes_dir(&self) -> PathBuf {
        self.config.data_root.join("scenes")
    }

    fn checkpoints_dir(&self) -> PathBuf {
        self.config.data_root.join("checkpoints")
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::from(Error::NotFound(format!("session {id}"))))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

pub(crate) fn error_code(e: &Error) -> (StatusCode, &'static str) {
    match e {
        Error::Domain(_) => (StatusCode::BAD_REQUEST, "domain"),
        Error::Config(_) => (StatusCode::CONFLICT, "config"),
        Error::Capability(_) => (StatusCode::CONFLICT, "capability"),
        Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
        Error::Format { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "format"),
        Error::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
        Error::Generation(_) => (StatusCode::INTERNAL_SERVER_ERROR, "generation"),
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = error_code(&e);
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.body }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

fn check_id(id: &str) -> ApiResult<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ApiError::bad_request(format!("invalid id {id:?}")))
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn sorted_entries(dir: &std::path::Path) -> ApiResult<Vec<(String, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let rd = fs::read_dir(dir).map_err(|e| ApiError::from(Error::io(dir, e)))?;
    let mut out: Vec<(String, PathBuf)> = rd
        .filter_map(|e| e.ok())
        .filter_map(|e| Some((e.file_name().to_str()?.to_string(), e.path())))
        .collect();
    out.sort();
    Ok(out)
}

fn error_json(e: &Error) -> Value {
    json!({ "code": error_code(e).1, "message": e.to_string() })
}

async fn list_scenes(State(st): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let mut out = Vec::new();
        for (name, path) in sorted_entries(&st.scenes_dir())? {
            if !path.is_dir() {
                continue;
            }
            out.push(match read_scene_file(&path) {
                Ok(f) => json!({
                    "id": name,
                    "status": "ok",
                    "name": f.id,
                    "views": f.views.len(),
                    "has_masks": f.views.iter().all(|v| v.mask.is_some()),
                    "has_features": f.views.iter().all(|v| v.features.is_some()),
                }),
                Err(e) => json!({ "id": name, "status": "error", "error": error_json(&e) }),
            });
        }
        Ok(Json(json!({ "scenes": out })))
    })
    .await
}

async fn get_scene(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    check_id(&id)?;
    blocking(move || {
        let dir = st.scenes_dir().join(&id);
        if !dir.is_dir() {
            return Err(Error::NotFound(format!("scene {id}")).into());
        }
        let f = read_scene_file(&dir)?;
        let cameras: Vec<&CameraEntry> = f.views.iter().map(|v| &v.camera).collect();
        Ok(Json(json!({
            "id": id,
            "name": f.id,
            "near": f.near,
            "far": f.far,
            "views": f.views.len(),
            "cameras": cameras,
            "has_masks": f.views.iter().all(|v| v.mask.is_some()),
            "has_features": f.views.iter().all(|v| v.features.is_some()),
        })))
    })
    .await
}

async fn list_checkpoints(State(st): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let mut out = Vec::new();
        for (name, path) in sorted_entries(&st.checkpoints_dir())? {
            let Some(id) = name.strip_suffix(".gsnc") else {
                continue;
            };
            out.push(match read_checkpoint(&path) {
                Ok(ck) => json!({
                    "id": id,
                    "status": "ok",
                    "stage": match ck.stage { Stage::One => 1, Stage::Two => 2 },
                    "iteration": ck.iteration,
                    "seed": ck.seed,
                    "config": ck.model.config,
                }),
                Err(e) => json!({ "id": id, "status": "error", "error": error_json(&e) }),
            });
        }
        Ok(Json(json!({ "checkpoints": out })))
    })
    .await
}

#[derive(Deserialize)]
struct CreateSession {
    scene_id: String,
    checkpoint_id: String,
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: CreateSession = parse(&body)?;
    check_id(&req.scene_id)?;
    check_id(&req.checkpoint_id)?;
    blocking(move || {
        let dir = st.scenes_dir().join(&req.scene_id);
        if !dir.is_dir() {
            return Err(Error::NotFound(format!("scene {}", req.scene_id)).into());
        }
        let ck_path = st
            .checkpoints_dir()
            .join(format!("{}.gsnc", req.checkpoint_id));
        if !ck_path.is_file() {
            return Err(Error::NotFound(format!("checkpoint {}", req.checkpoint_id)).into());
        }
        let scene = load_scene(&dir)?;
        let ck = read_checkpoint(&ck_path)?;
        if scene.views.len() <= ck.model.config.sources {
            return Err(Error::config(format!(
                "scene {} has {} views; the checkpoint needs {} sources plus a target",
                req.scene_id,
                scene.views.len(),
                ck.model.config.sources
            ))
            .into());
        }
        let stage = match ck.stage {
            Stage::One => 1,
            Stage::Two => 2,
        };
        let id = format!("s{}", st.next_id.fetch_add(1, Ordering::SeqCst));
        let session = Session::new(
            id.clone(),
            req.scene_id.clone(),
            req.checkpoint_id.clone(),
            Arc::new(scene),
            Arc::new(ck),
            st.config.cache_entries,
        );
        st.sessions
            .lock()
            .expect("session table")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok((
            StatusCode::CREATED,
            Json(json!({
                "session_id": id,
                "scene_id": req.scene_id,
                "checkpoint_id": req.checkpoint_id,
                "stage": stage,
            })),
        ))
    })
    .await
}

async fn delete_session(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<StatusCode> {
    match st.sessions.lock().expect("session table").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(Error::NotFound(format!("session {id}")).into()),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderBody {
    #[serde(default)]
    view_id: Option<usize>,
    #[serde(default)]
    camera: Option<CameraEntry>,
    #[serde(default = "default_outputs")]
    outputs: Vec<String>,
    /// `[width, height]`; the camera's own size when absent.
    #[serde(default)]
    resolution: Option<[usize; 2]>,
}

fn default_outputs() -> Vec<String> {
    vec!["rgb".into()]
}

async fn render(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let req: RenderBody = parse(&body)?;
    let (mut rgb, mut pca) = (false, false);
    for o in &req.outputs {
        match o.as_str() {
            "rgb" => rgb = true,
            "feature_pca" => pca = true,
            other => return Err(ApiError::bad_request(format!("unknown output {other:?}"))),
        }
    }
    let session = st.session(&id)?;
    let max = st.config.max_resolution;
    blocking(move || {
        let start = Instant::now();
        let mut s = session.lock().expect("session lock");
        let camera = match (req.view_id, &req.camera) {
            (Some(v), None) => s.view_camera(v)?,
            (None, Some(c)) => camera_from_entry(c, s.scene.near, s.scene.far)?,
            _ => {
                return Err(ApiError::bad_request(
                    "give exactly one of view_id and camera",
                ))
            }
        };
        let camera = match req.resolution {
            Some([w, h]) => {
                if w == 0 || h == 0 {
                    return Err(Error::domain("resolution must be non-zero").into());
                }
                camera.resized(w, h)
            }
            None => camera,
        };
        if camera.width > max || camera.height > max {
            return Err(Error::domain(format!(
                "resolution {}x{} exceeds the limit of {max}",
                camera.width, camera.height
            ))
            .into());
        }
        if pca && !s.checkpoint.model.has_feature_head() {
            return Err(
                Error::Capability("feature output needs a stage-2 checkpoint".into()).into(),
            );
        }
        let mut stats = Stats::default();
        let out = s.render(&camera, &mut stats)?;
        let r = &out.rendered;
        let mut images = serde_json::Map::new();
        if rgb {
            images.insert(
                "rgb".into(),
                json!(B64.encode(encode_rgb_png(r.width, r.height, &r.rgb))),
            );
        }
        if pca {
            let f = r.feat.as_ref().expect("stage-2 renders carry features");
            images.insert(
                "feature_pca".into(),
                json!(B64.encode(encode_rgb_png(r.width, r.height, &feature_pca_rgb(f)))),
            );
        }
        Ok(Json(json!({
            "images": images,
            "width": r.width,
            "height": r.height,
            "cached": out.cached,
            "renders": stats.renders,
            "degenerate_rays": r.degenerate_rays,
            "millis": start.elapsed().as_secs_f64() * 1e3,
        })))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentBody {
    strokes: StrokeSet,
    #[serde(default = "default_k")]
    k: usize,
    threshold: f64,
    /// Every scene view when absent.
    #[serde(default)]
    views: Option<Vec<usize>>,
    #[serde(default)]
    seed: u64,
}

fn default_k() -> usize {
    DEFAULT_K
}

async fn segment(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let req: SegmentBody = parse(&body)?;
    let session = st.session(&id)?;
    blocking(move || {
        let start = Instant::now();
        let mut s = session.lock().expect("session lock");
        let views = req.views.clone().unwrap_or_else(|| (0..s.scene.views.len()).collect());
        let mut stats = Stats::default();
        let out = s.segment(&req.strokes, req.k, req.threshold, &views, req.seed, &mut stats)?;
        let masks: Vec<Value> = out
            .masks
            .iter()
            .map(|m| json!({ "view_id": m.view_id, "png": B64.encode(&m.png), "selected": m.selected }))
            .collect();
        let mut body = json!({
            "masks": masks,
            "threshold": req.threshold,
            "renders": stats.renders,
            "clustered": stats.clustered,
            "millis": start.elapsed().as_secs_f64() * 1e3,
        });
        if let Some((instance, ious)) = out.metrics {
            let views: Vec<Value> = ious.iter().map(|v| json!({ "view_id": v.view_id, "iou": v.iou })).collect();
            let mean = ious.iter().map(|v| v.iou).sum::<f64>() / ious.len().max(1) as f64;
            body["metrics"] = json!({ "instance": instance, "mean_iou": mean, "views": views });
        }
        Ok(Json(body))
    })
    .await
}

async fn session_info(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let session = st.session(&id)?;
    let s = session.lock().expect("session lock");
    let created = s
        .created
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(Json(json!({
        "session_id": s.id,
        "scene_id": s.scene_id,
        "checkpoint_id": s.checkpoint_id,
        "cached_views": s.cached_views(),
        "created": created,
    })))
}

async fn fallback() -> ApiError {
    ApiError::from(Error::NotFound("no such endpoint".into()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/scenes", get(list_scenes))
        .route("/api/scenes/{id}", get(get_scene))
        .route("/api/checkpoints", get(list_checkpoints))
        .route("/api/sessions", post(create_session))
        .route(
            "/api/sessions/{id}",
            delete(delete_session).get(session_info),
        )
        .route("/api/sessions/{id}/render", post(render))
        .route("/api/sessions/{id}/segment", post(segment))
        .fallback(fallback)
        .with_state(state)
}
