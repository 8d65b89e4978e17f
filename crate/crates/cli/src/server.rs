//! Local HTTP chat service over a trained run checkpoint.

use std::collections::{HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{info, warn};
use mdrg_core::agent::{Agent, AgentResponse, RespondOptions, ResponseSegment, Session};
use mdrg_core::data::ImageRef;
use mdrg_core::image::ImageTensor;
use mdrg_core::pipeline::RunState;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::Home;

/// Turns kept per session; older ones are dropped first.
pub const MAX_SESSION_TURNS: usize = 256;
/// Images kept in memory before the oldest are evicted.
pub const MAX_IMAGES: usize = 4096;
const MAX_BEAM: usize = 32;
const MAX_SAMPLES: usize = 256;

struct SessionSlot {
    session: Session,
    log: Vec<Value>,
}

#[derive(Default)]
struct ImageStore {
    png: HashMap<String, Arc<Vec<u8>>>,
    order: VecDeque<String>,
}

impl ImageStore {
    /// Stores `png` under an id derived from its bytes.
    fn put(&mut self, png: Vec<u8>) -> String {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        png.hash(&mut h);
        let id = format!("{:016x}", h.finish());
        if !self.png.contains_key(&id) {
            self.png.insert(id.clone(), Arc::new(png));
            self.order.push_back(id.clone());
            while self.order.len() > MAX_IMAGES {
                if let Some(old) = self.order.pop_front() {
                    self.png.remove(&old);
                }
            }
        }
        id
    }
}

/// Shared service state: a read-only model and per-session locks.
pub struct AppState {
    agent: Option<Arc<Agent>>,
    max_new: usize,
    checkpoint: Option<PathBuf>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<SessionSlot>>>>,
    images: Mutex<ImageStore>,
    next_id: AtomicU64,
}

impl AppState {
    /// A service without a model: health reports 503 and chat refuses.
    pub fn empty() -> Self {
        Self::build(None, RespondOptions::default().max_new, None)
    }

    pub fn from_state(state: &RunState, checkpoint: Option<PathBuf>) -> Self {
        Self::build(Some(state.agent()), state.config.max_response, checkpoint)
    }

    fn build(agent: Option<Agent>, max_new: usize, checkpoint: Option<PathBuf>) -> Self {
        Self {
            agent: agent.map(Arc::new),
            max_new,
            checkpoint,
            sessions: Mutex::default(),
            images: Mutex::default(),
            next_id: AtomicU64::new(1),
        }
    }

    /// Loads the run checkpoint under `home`. A missing or broken checkpoint
    /// leaves the service up but unable to chat.
    pub fn load(home: &Home) -> Self {
        let path = home.run_checkpoint();
        match RunState::load(&path) {
            Ok(state) => {
                info!("loaded {}", path.display());
                Self::from_state(&state, Some(path))
            }
            Err(e) => {
                warn!("no model: {} ({e})", path.display());
                Self::empty()
            }
        }
    }

    fn session(&self, id: &str) -> Option<Arc<tokio::sync::Mutex<SessionSlot>>> {
        self.sessions.lock().expect("sessions lock").get(id).cloned()
    }

    fn store_image(&self, img: &ImageTensor) -> Result<String, ApiError> {
        let png = img.to_png_bytes().map_err(ApiError::internal)?;
        Ok(self.images.lock().expect("images lock").put(png))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct ChatOptions {
    pub pure_text: bool,
    pub beam: Option<usize>,
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
    pub temperature: Option<f64>,
}

impl ChatOptions {
    fn resolve(&self, max_new: usize) -> Result<RespondOptions, ApiError> {
        let d = RespondOptions::default();
        let o = RespondOptions {
            pure_text: self.pure_text,
            beam: self.beam.unwrap_or(d.beam),
            n_samples: self.n_samples.unwrap_or(d.n_samples),
            temperature: self.temperature.unwrap_or(d.temperature),
            seed: self.seed.unwrap_or(d.seed),
            max_new,
        };
        let bad = |m: String| Err(ApiError::new(StatusCode::BAD_REQUEST, m));
        if o.beam == 0 || o.beam > MAX_BEAM {
            return bad(format!("beam must be in 1..={MAX_BEAM}"));
        }
        if o.n_samples == 0 || o.n_samples > MAX_SAMPLES {
            return bad(format!("n_samples must be in 1..={MAX_SAMPLES}"));
        }
        if !(o.temperature.is_finite() && o.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        Ok(o)
    }
}

/// An image the user shares instead of (or after) text.
#[derive(Debug, Deserialize)]
pub struct UploadedImage {
    pub description: String,
    pub png_b64: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct ChatRequest {
    pub session_id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub options: ChatOptions,
    pub image: Option<UploadedImage>,
}

#[derive(Debug, Default, Deserialize)]
struct ImageQuery {
    b64: Option<String>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/session", post(new_session))
        .route("/api/session/{id}", get(session_log))
        .route("/api/chat", post(chat))
        .route("/api/image/{id}", get(image))
        .with_state(state)
}

async fn health(State(st): State<Arc<AppState>>) -> Response {
    let loaded: Vec<String> = st.checkpoint.iter().map(|p| p.display().to_string()).collect();
    if st.agent.is_some() {
        Json(json!({"status": "ok", "checkpoints_loaded": loaded})).into_response()
    } else {
        (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({"status": "no checkpoint", "checkpoints_loaded": loaded})),
        )
            .into_response()
    }
}

async fn new_session(State(st): State<Arc<AppState>>) -> Json<Value> {
    let n = st.next_id.fetch_add(1, Ordering::Relaxed);
    let id = format!("s{n:06}");
    let slot = SessionSlot {
        session: Session::default(),
        log: Vec::new(),
    };
    st.sessions
        .lock()
        .expect("sessions lock")
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(slot)));
    Json(json!({"session_id": id}))
}

async fn session_log(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let slot = st
        .session(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`")))?;
    let slot = slot.lock().await;
    Ok(Json(json!({"session_id": id, "turns": slot.log})))
}

async fn chat(State(st): State<Arc<AppState>>, Json(req): Json<ChatRequest>) -> Result<Json<Value>, ApiError> {
    let agent = st
        .agent
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model checkpoint loaded"))?;
    let slot = st
        .session(&req.session_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session `{}`", req.session_id)))?;
    let opts = req.options.resolve(st.max_new)?;
    let text = req.text.trim().to_string();
    let upload = match req.image {
        Some(u) => {
            let pixels = match &u.png_b64 {
                Some(b) => {
                    let bytes = B64
                        .decode(b)
                        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("png_b64: {e}")))?;
                    let img = ImageTensor::from_png_bytes(&bytes)
                        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("png_b64: {e}")))?;
                    Some(Arc::new(img))
                }
                None => None,
            };
            Some(ImageRef {
                description: u.description,
                image_path: None,
                pixels,
            })
        }
        None => None,
    };
    if text.is_empty() && upload.is_none() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty message"));
    }

    // held for the whole request: one request per session at a time
    let mut guard = slot.lock_owned().await;
    let st2 = st.clone();
    tokio::task::spawn_blocking(move || -> Result<Json<Value>, ApiError> {
        let slot = &mut *guard;
        let mut user = Vec::new();
        if !text.is_empty() {
            user.push(json!({"kind": "text", "text": text}));
        }
        let resp = match upload {
            Some(img) => {
                let mut seg = json!({"kind": "image", "description": img.description});
                if let Some(px) = &img.pixels {
                    seg["image_id"] = json!(st2.store_image(px)?);
                }
                if !text.is_empty() {
                    slot.session.context.turns.push(mdrg_core::data::Utterance::text(mdrg_core::agent::USER, &text));
                }
                user.push(seg);
                slot.session.share_image(&agent, img, &opts)
            }
            None => slot.session.chat(&agent, &text, &opts),
        }
        .map_err(ApiError::internal)?;
        let segments = response_segments(&st2, &resp)?;
        let turns = &mut slot.session.context.turns;
        if turns.len() > MAX_SESSION_TURNS {
            let extra = turns.len() - MAX_SESSION_TURNS;
            turns.drain(..extra);
        }
        slot.log.push(json!({"role": "user", "segments": user}));
        slot.log.push(json!({"role": "agent", "segments": segments}));
        Ok(Json(json!({"segments": segments})))
    })
    .await
    .map_err(ApiError::internal)?
}

fn response_segments(st: &AppState, resp: &AgentResponse) -> Result<Vec<Value>, ApiError> {
    let mut out = Vec::with_capacity(resp.segments.len());
    for seg in &resp.segments {
        match seg {
            ResponseSegment::Text(t) => out.push(json!({"kind": "text", "text": t})),
            ResponseSegment::Image(g) => {
                let topk = g
                    .ranked
                    .iter()
                    .map(|img| st.store_image(img))
                    .collect::<Result<Vec<_>, _>>()?;
                out.push(json!({
                    "kind": "image",
                    "image_id": topk[0],
                    "description": g.description,
                    "topk": topk,
                    "scores": g.scores,
                }));
            }
        }
    }
    Ok(out)
}

async fn image(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ImageQuery>,
) -> Result<Response, ApiError> {
    let png = st
        .images
        .lock()
        .expect("images lock")
        .png
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image `{id}`")))?;
    if matches!(q.b64.as_deref(), Some("1" | "true")) {
        return Ok(Json(json!({"png_b64": B64.encode(png.as_slice())})).into_response());
    }
    Ok(([(header::CONTENT_TYPE, "image/png")], png.as_ref().clone()).into_response())
}

/// Blocks serving `home`'s checkpoint, with an optional static UI at `/`.
pub fn serve(home: &Home, host: &str, port: u16, ui_dir: Option<PathBuf>) -> Result<()> {
    let state = Arc::new(AppState::load(home));
    let mut app = router(state);
    if let Some(dir) = ui_dir {
        app = app.fallback_service(ui_service(&dir)?);
    }
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .with_context(|| format!("bad address {host}:{port}"))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        info!("listening on http://{addr}");
        axum::serve(listener, app).await?;
        Ok(())
    })
}

fn ui_service(dir: &Path) -> Result<tower_http::services::ServeDir<tower_http::services::ServeFile>> {
    if !dir.is_dir() {
        anyhow::bail!("UI directory {} does not exist", dir.display());
    }
    Ok(tower_http::services::ServeDir::new(dir).fallback(tower_http::services::ServeFile::new(dir.join("index.html"))))
}
