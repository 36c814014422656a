//! HTTP service for the interactive loop: create a session on a sequence,
//! click to get a refined box, track, stream results and correct.

pub mod error;
pub mod scenes;
pub mod session;

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use clicktrack_core::geometry::Point;
use clicktrack_core::refiners::{Model, RefinerKind};
use clicktrack_core::tracker::{check_frames, TrackerConfig};
use clicktrack_core::training::checkpoint::load_checkpoint;
use clicktrack_core::training::corpus::CorpusConfig;
use clicktrack_core::Image;
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, Mutex, RwLock};

pub use error::{ApiError, ErrorBody};
use scenes::SceneProvider;
pub use session::{Refinement, Session, SessionState, Snapshot, SourceInfo, StreamEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// Checkpoint directory, or a directory holding one per refiner.
    pub model: PathBuf,
    pub refiner: RefinerKind,
    pub host: String,
    pub port: u16,
    /// Corpus written by `gen-data`; scenes are generated from `corpus`
    /// when absent.
    pub scenes: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub tracker: TrackerConfig,
    /// Past this many sessions the least recently updated idle one is
    /// dropped to make room.
    pub max_sessions: usize,
    pub max_upload_frames: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::from("models"),
            refiner: RefinerKind::Gcr,
            host: "127.0.0.1".into(),
            port: 8080,
            scenes: None,
            corpus: CorpusConfig::default(),
            tracker: TrackerConfig::default(),
            max_sessions: 64,
            max_upload_frames: 500,
        }
    }
}

/// Resolves `<dir>/<refiner>` when present, else `dir` itself.
pub fn load_model(dir: &Path, refiner: RefinerKind) -> clicktrack_core::Result<Model<f32>> {
    let nested = dir.join(refiner.name());
    let path = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let (model, _) = load_checkpoint(&path)?;
    if model.kind() != refiner {
        return Err(clicktrack_core::Error::Config(format!(
            "{} holds a {} model, expected {refiner}",
            path.display(),
            model.kind()
        )));
    }
    Ok(model)
}

pub struct AppState {
    model: Arc<Model<f32>>,
    scenes: SceneProvider,
    tracker: TrackerConfig,
    max_sessions: usize,
    max_upload_frames: usize,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(model: Model<f32>, scenes: SceneProvider, cfg: &ServiceConfig) -> Self {
        Self {
            model: Arc::new(model),
            scenes,
            tracker: cfg.tracker.clone(),
            max_sessions: cfg.max_sessions,
            max_upload_frames: cfg.max_upload_frames,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn from_config(cfg: &ServiceConfig) -> clicktrack_core::Result<Self> {
        let model = load_model(&cfg.model, cfg.refiner)?;
        let scenes = match &cfg.scenes {
            Some(dir) => SceneProvider::directory(dir.clone())?,
            None => SceneProvider::generated(cfg.corpus.clone()),
        };
        Ok(Self::new(model, scenes, cfg))
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }
}

pub type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/vocabulary", get(vocabulary))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/click", post(click))
        .route("/sessions/{id}/track", post(track))
        .route("/sessions/{id}/correct", post(correct))
        .route("/sessions/{id}/frames/{n}", get(get_frame))
        .route("/sessions/{id}/ground-truth", get(ground_truth))
        .route("/sessions/{id}/stream", get(stream_results))
        .with_state(state)
}

pub async fn serve(cfg: ServiceConfig) -> clicktrack_core::Result<()> {
    let state = Arc::new(AppState::from_config(&cfg)?);
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port)
        .parse()
        .map_err(|e| clicktrack_core::Error::Config(format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| clicktrack_core::Error::Config(format!("cannot bind {addr}: {e}")))?;
    eprintln!("listening on http://{addr}");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| clicktrack_core::Error::Config(format!("server stopped: {e}")))
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

#[derive(Serialize)]
struct VocabularyResponse {
    refiner: RefinerKind,
    guided: bool,
    vocabulary: Vec<String>,
}

async fn vocabulary(State(st): State<Shared>) -> Json<VocabularyResponse> {
    Json(VocabularyResponse {
        refiner: st.model.kind(),
        guided: st.model.kind() == RefinerKind::Gcr,
        vocabulary: st.model.vocabulary().to_vec(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    scene: Option<String>,
    /// Base64-encoded PNG frames.
    frames: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub id: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub state: SessionState,
    pub frame0: String,
}

async fn create_session(State(st): State<Shared>, body: Bytes) -> Result<(StatusCode, Json<CreateResponse>), ApiError> {
    let req: CreateRequest = parse(&body)?;
    let (source, frames, gt) = match (req.scene, req.frames) {
        (Some(scene), None) => {
            let (st2, id) = (st.clone(), scene.clone());
            let s = tokio::task::spawn_blocking(move || st2.scenes.get(&id))
                .await
                .map_err(|e| ApiError::internal(e.to_string()))??;
            (SourceInfo::Scene { scene }, s.frames, Some(s.objects))
        }
        (None, Some(encoded)) => {
            if encoded.is_empty() || encoded.len() > st.max_upload_frames {
                return Err(ApiError::malformed_upload(format!(
                    "upload needs 1 to {} frames, got {}",
                    st.max_upload_frames,
                    encoded.len()
                )));
            }
            let frames = tokio::task::spawn_blocking(move || decode_upload(&encoded))
                .await
                .map_err(|e| ApiError::internal(e.to_string()))??;
            (SourceInfo::Upload { frames: frames.len() }, Arc::new(frames), None)
        }
        _ => return Err(ApiError::bad_request("give exactly one of \"scene\" or \"frames\"")),
    };
    let mut sessions = st.sessions.write().await;
    if sessions.len() >= st.max_sessions {
        evict_idle(&mut sessions);
    }
    if sessions.len() >= st.max_sessions {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "too_many_sessions",
            format!("session limit {} reached", st.max_sessions),
        ));
    }
    let id = format!("s{:06}", st.next_id.fetch_add(1, Ordering::Relaxed));
    let (w, h) = (frames[0].width(), frames[0].height());
    let n = frames.len();
    let session = Session::new(id.clone(), source, frames, gt, st.tracker.clone());
    sessions.insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((
        StatusCode::CREATED,
        Json(CreateResponse {
            frame0: format!("/sessions/{id}/frames/0"),
            id,
            frames: n,
            width: w,
            height: h,
            state: SessionState::AwaitingClick,
        }),
    ))
}

/// Drops the least recently updated session that is neither tracking nor in
/// use by a request.
fn evict_idle(sessions: &mut HashMap<String, Arc<Mutex<Session>>>) {
    let oldest = sessions
        .iter()
        .filter_map(|(id, s)| {
            let s = s.try_lock().ok()?;
            (s.state != SessionState::Tracking).then(|| (s.updated_ms, id.clone()))
        })
        .min();
    if let Some((_, id)) = oldest {
        sessions.remove(&id);
    }
}

fn decode_upload(encoded: &[String]) -> Result<Vec<Image>, ApiError> {
    let frames = encoded
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(s.trim())
                .map_err(|e| ApiError::malformed_upload(format!("frame {i}: bad base64: {e}")))?;
            let img = Image::decode_png(&bytes).map_err(|e| ApiError::malformed_upload(format!("frame {i}: {e}")))?;
            img.check_min_size()
                .map_err(|e| ApiError::malformed_upload(format!("frame {i}: {e}")))?;
            Ok(img)
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    check_frames(&frames).map_err(|e| ApiError::malformed_upload(e.to_string()))?;
    Ok(frames)
}

async fn get_session(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<Snapshot>, ApiError> {
    let s = st.session(&id).await?;
    let snap = s.lock().await.snapshot();
    Ok(Json(snap))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClickRequest {
    x: f64,
    y: f64,
    category: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrectRequest {
    frame: usize,
    x: f64,
    y: f64,
    category: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RefineResponse {
    pub state: SessionState,
    pub generation: u64,
    #[serde(flatten)]
    pub refinement: Refinement,
}

/// Times only the refine call itself.
fn timed_refine(
    model: &Model<f32>,
    frame: &Image,
    frame_index: usize,
    p: Point,
    category: Option<String>,
) -> Result<Refinement, ApiError> {
    let start = Instant::now();
    let out = model.refine(frame, p, category.as_deref());
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(Refinement {
        frame: frame_index,
        point: p,
        category,
        output: out?,
        latency_ms,
    })
}

async fn click(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<RefineResponse>, ApiError> {
    let req: ClickRequest = parse(&body)?;
    let p = Point::new(req.x, req.y);
    let s = st.session(&id).await?;
    let guard = s.lock_owned().await;
    guard.check_click(p)?;
    st.model.guidance_kind(req.category.as_deref())?;
    let model = st.model.clone();
    let (guard, result) = tokio::task::spawn_blocking(move || {
        let frame = &guard.frames[0];
        let r = timed_refine(&model, frame, 0, p, req.category);
        (guard, r)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    let mut guard = guard;
    let refinement = result?;
    guard.apply_click(refinement.clone());
    Ok(Json(RefineResponse {
        state: guard.state,
        generation: guard.generation,
        refinement,
    }))
}

#[derive(Debug, Default, Deserialize)]
struct TrackQuery {
    /// Respond only after tracking has finished.
    #[serde(default)]
    wait: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrackResponse {
    pub state: SessionState,
    pub generation: u64,
    pub frames: usize,
    pub stream: String,
}

/// Runs the tracking loop for one generation, one frame per lock.
fn run_tracking(session: Arc<Mutex<Session>>, generation: u64) {
    loop {
        let mut s = session.blocking_lock();
        if !s.track_next(generation) {
            break;
        }
    }
}

async fn start_loop(session: Arc<Mutex<Session>>, generation: u64, wait: bool) -> Result<(), ApiError> {
    let task = tokio::task::spawn_blocking(move || run_tracking(session, generation));
    if wait {
        task.await.map_err(|e| ApiError::internal(e.to_string()))?;
    }
    Ok(())
}

async fn track(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TrackQuery>,
) -> Result<Json<TrackResponse>, ApiError> {
    let s = st.session(&id).await?;
    let (generation, frames, state) = {
        let mut guard = s.lock().await;
        let g = guard.begin_tracking()?;
        (g, guard.frame_count(), guard.state)
    };
    start_loop(s.clone(), generation, q.wait).await?;
    let state = if q.wait { s.lock().await.state } else { state };
    Ok(Json(TrackResponse {
        state,
        generation,
        frames,
        stream: format!("/sessions/{id}/stream"),
    }))
}

async fn correct(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TrackQuery>,
    body: Bytes,
) -> Result<Json<RefineResponse>, ApiError> {
    let req: CorrectRequest = parse(&body)?;
    let p = Point::new(req.x, req.y);
    let s = st.session(&id).await?;
    let guard = s.clone().lock_owned().await;
    guard.check_correction(req.frame, p)?;
    st.model.guidance_kind(req.category.as_deref())?;
    let model = st.model.clone();
    let (mut guard, result) = tokio::task::spawn_blocking(move || {
        let frame = &guard.frames[req.frame];
        let r = timed_refine(&model, frame, req.frame, p, req.category);
        (guard, r)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    let refinement = result?;
    let generation = guard.apply_correction(refinement.clone())?;
    let state = guard.state;
    drop(guard);
    start_loop(s.clone(), generation, q.wait).await?;
    let state = if q.wait { s.lock().await.state } else { state };
    Ok(Json(RefineResponse {
        state,
        generation,
        refinement,
    }))
}

async fn get_frame(
    State(st): State<Shared>,
    UrlPath((id, n)): UrlPath<(String, usize)>,
) -> Result<Response, ApiError> {
    let s = st.session(&id).await?;
    let frame = s.lock().await.frame(n)?.clone();
    let png = tokio::task::spawn_blocking(move || frame.encode_png())
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn ground_truth(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let s = st.session(&id).await?;
    let guard = s.lock().await;
    let gt = guard
        .ground_truth
        .as_ref()
        .ok_or_else(|| ApiError::not_found("uploaded sessions have no ground truth"))?;
    let objects: Vec<serde_json::Value> = gt
        .iter()
        .map(|o| serde_json::json!({ "id": o.id, "category": o.category, "parent": o.parent, "boxes": o.boxes }))
        .collect();
    Ok(Json(serde_json::json!({ "objects": objects })))
}

fn sse_event(e: &StreamEvent) -> Event {
    Event::default()
        .event(e.name())
        .data(serde_json::to_string(e).unwrap_or_default())
}

fn is_terminal(e: &StreamEvent, generation: u64) -> bool {
    match e {
        StreamEvent::Finished { generation: g } | StreamEvent::Failed { generation: g, .. } => *g >= generation,
        _ => false,
    }
}

/// Replays the current results, then forwards live events until the
/// newest tracking run ends. A consumer that falls behind gets a `lagged`
/// event and should fall back to polling the session.
async fn stream_results(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let s = st.session(&id).await?;
    let (replay, rx, done, generation) = {
        let guard = s.lock().await;
        let g = guard.generation;
        let mut replay: Vec<StreamEvent> = guard
            .results
            .iter()
            .map(|&record| StreamEvent::Frame { generation: g, record })
            .collect();
        let done = match guard.state {
            SessionState::Finished => {
                replay.push(StreamEvent::Finished { generation: g });
                true
            }
            SessionState::Error => {
                replay.push(StreamEvent::Failed {
                    generation: g,
                    message: guard.error.clone().unwrap_or_default(),
                });
                true
            }
            _ => false,
        };
        (replay, guard.subscribe(), done, g)
    };
    let head = stream::iter(replay.into_iter().map(|e| Ok(sse_event(&e))));
    let live = stream::unfold((rx, done), move |(mut rx, done)| async move {
        if done {
            return None;
        }
        match rx.recv().await {
            Ok(e) => {
                let end = is_terminal(&e, generation);
                Some((Ok(sse_event(&e)), (rx, end)))
            }
            Err(broadcast::error::RecvError::Lagged(n)) => {
                let e = Event::default().event("lagged").data(format!("{{\"skipped\":{n}}}"));
                Some((Ok(e), (rx, true)))
            }
            Err(broadcast::error::RecvError::Closed) => None,
        }
    });
    Ok(Sse::new(head.chain(live)).keep_alive(KeepAlive::default()))
}
