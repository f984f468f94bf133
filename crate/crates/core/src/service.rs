//! Stateful HTTP service for interactive tuning.
//!
//! A session holds one attacker image, the victim embedding, the current
//! layout with its optimizer state, and optionally the target layout that
//! calibration photos are compared against. Requests on one session are
//! serialized; different sessions run concurrently, sharing a pool of oracle
//! connections.
//!
//! ```text
//! POST   /sessions                 {attacker, victim | victim_embedding, target?, seed?, n_spots?}
//! GET    /sessions/{id}
//! DELETE /sessions/{id}
//! PUT    /sessions/{id}/config     PerturbationConfig
//! PUT    /sessions/{id}/target     PerturbationConfig
//! POST   /sessions/{id}/step       {n}
//! POST   /sessions/{id}/calibrate  {on, off}
//! ```
//!
//! Images travel as base64 PNG (a `data:` URL prefix is accepted). Errors are
//! `{"error": {"code", "message", "field"?}}`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::attack::{initial_config, objective, AttackConfig, AttackState, Goal};
use crate::calibration::{calibrate_once, CalibrationError, CalibrationSettings};
use crate::image::{decode_image, encode_png, Image};
use crate::oracle::{distance, Embedding, EmbeddingOracle, OracleError};
use crate::spot::{synthesize, ConfigError, PerturbationConfig};

/// Largest request body accepted; images are inlined as base64.
const BODY_LIMIT: usize = 64 << 20;

#[derive(Debug, Clone, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody { code, message: message.into(), field: None },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn with_field(mut self, field: impl Into<String>) -> Self {
        self.body.field = Some(field.into());
        self
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.body }))).into_response()
    }
}

impl From<OracleError> for ApiError {
    fn from(e: OracleError) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, "oracle_error", e.to_string())
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        if e.field == "$" {
            Self::bad_request(e.message)
        } else {
            Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.message).with_field(e.field)
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

/// A fixed set of oracle connections handed out one request at a time.
pub struct OraclePool {
    slots: Mutex<Vec<Box<dyn EmbeddingOracle>>>,
    ready: Condvar,
}

impl OraclePool {
    pub fn new(oracles: Vec<Box<dyn EmbeddingOracle>>) -> Self {
        assert!(!oracles.is_empty(), "pool needs at least one oracle");
        Self { slots: Mutex::new(oracles), ready: Condvar::new() }
    }

    /// Run `f` with an idle connection, blocking until one is free.
    pub fn with<R>(&self, f: impl FnOnce(&dyn EmbeddingOracle) -> R) -> R {
        let oracle = {
            let mut slots = self.slots.lock().expect("pool lock");
            loop {
                if let Some(o) = slots.pop() {
                    break o;
                }
                slots = self.ready.wait(slots).expect("pool lock");
            }
        };
        // hand the connection back even if `f` panics
        struct Return<'a>(&'a OraclePool, Option<Box<dyn EmbeddingOracle>>);
        impl Drop for Return<'_> {
            fn drop(&mut self) {
                if let Some(o) = self.1.take() {
                    self.0.slots.lock().expect("pool lock").push(o);
                    self.0.ready.notify_one();
                }
            }
        }
        let guard = Return(self, Some(oracle));
        f(guard.1.as_deref().expect("held"))
    }
}

#[derive(Debug, Clone)]
pub struct ServiceSettings {
    /// Template for every session's optimizer; `seed` and `n_spots` may be
    /// overridden per session.
    pub attack: AttackConfig,
    pub calibration: CalibrationSettings,
    pub idle_ttl: Duration,
    pub state_dir: Option<PathBuf>,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            calibration: CalibrationSettings::default(),
            idle_ttl: Duration::from_secs(3600),
            state_dir: None,
            cors_origin: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub revision: u64,
    pub loss: f64,
}

mod png_b64 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(img: &Image, s: S) -> Result<S::Ok, S::Error> {
        let png = encode_png(img).map_err(serde::ser::Error::custom)?;
        s.serialize_str(&B64.encode(png))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Image, D::Error> {
        let text = String::deserialize(d)?;
        super::decode_b64_image(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct Session {
    id: String,
    #[serde(with = "png_b64")]
    attacker: Image,
    victim: Embedding,
    attack: AttackConfig,
    state: AttackState,
    target: Option<PerturbationConfig>,
    initial_loss: f64,
    history: Vec<HistoryEntry>,
    revision: u64,
    #[serde(skip, default = "Instant::now")]
    last_used: Instant,
}

impl Session {
    fn loss(&self) -> f64 {
        self.history.last().map(|h| h.loss).unwrap_or(self.initial_loss)
    }

    fn commit(&mut self, loss: Option<f64>) -> u64 {
        self.revision += 1;
        if let Some(loss) = loss {
            self.history.push(HistoryEntry { revision: self.revision, loss });
        }
        self.revision
    }

    fn view(&self) -> serde_json::Value {
        json!({
            "id": self.id,
            "width": self.attacker.width(),
            "height": self.attacker.height(),
            "revision": self.revision,
            "initial_loss": self.initial_loss,
            "loss": self.loss(),
            "config": self.state.config,
            "target": self.target,
            "history": self.history,
            "dropped_spots": self.state.dropped_spots(),
            "iteration": self.state.iteration,
        })
    }
}

type SessionRef = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    sessions: RwLock<HashMap<String, SessionRef>>,
    pool: OraclePool,
    settings: ServiceSettings,
}

impl AppState {
    /// Build the state, reloading snapshots from `settings.state_dir`.
    pub fn new(pool: OraclePool, settings: ServiceSettings) -> std::io::Result<Arc<Self>> {
        let mut sessions = HashMap::new();
        if let Some(dir) = &settings.state_dir {
            std::fs::create_dir_all(dir)?;
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                match std::fs::read_to_string(&path)
                    .map_err(|e| e.to_string())
                    .and_then(|t| serde_json::from_str::<Session>(&t).map_err(|e| e.to_string()))
                {
                    Ok(s) => {
                        sessions.insert(s.id.clone(), Arc::new(tokio::sync::Mutex::new(s)));
                    }
                    Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping unreadable session snapshot"),
                }
            }
            tracing::info!(restored = sessions.len(), "sessions restored");
        }
        Ok(Arc::new(Self { sessions: RwLock::new(sessions), pool, settings }))
    }

    fn session(&self, id: &str) -> Result<SessionRef, ApiError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    fn snapshot_path(&self, id: &str) -> Option<PathBuf> {
        self.settings.state_dir.as_ref().map(|d| d.join(format!("{id}.json")))
    }

    fn persist(&self, session: &Session) {
        let Some(path) = self.snapshot_path(&session.id) else { return };
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(session).expect("session serializes");
        if let Err(e) = std::fs::write(&tmp, text).and_then(|_| std::fs::rename(&tmp, &path)) {
            tracing::warn!(path = %path.display(), error = %e, "session snapshot failed");
        }
    }

    fn forget(&self, id: &str) {
        if let Some(path) = self.snapshot_path(id) {
            let _ = std::fs::remove_file(path);
        }
    }

    /// Drop sessions idle for longer than the configured time. Returns how
    /// many were removed.
    pub fn expire_idle(&self) -> usize {
        let ttl = self.settings.idle_ttl;
        let mut sessions = self.sessions.write().expect("sessions lock");
        let stale: Vec<String> = sessions
            .iter()
            .filter(|(_, s)| s.try_lock().map(|s| s.last_used.elapsed() > ttl).unwrap_or(false))
            .map(|(id, _)| id.clone())
            .collect();
        for id in &stale {
            sessions.remove(id);
            self.forget(id);
            tracing::info!(session = %id, "session expired");
        }
        stale.len()
    }
}

fn decode_b64_image(text: &str) -> Result<Image, String> {
    let payload = match text.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => text,
    };
    let bytes = B64.decode(payload.trim()).map_err(|e| format!("base64: {e}"))?;
    decode_image(&bytes).map_err(|e| e.to_string())
}

fn image_field(text: &Option<String>, field: &str) -> Result<Option<Image>, ApiError> {
    text.as_deref()
        .map(|t| decode_b64_image(t).map_err(|e| ApiError::bad_request(e).with_field(field)))
        .transpose()
}

fn preview(img: &Image) -> String {
    B64.encode(encode_png(&img.clamped()).expect("png encodes"))
}

/// Run blocking oracle work off the async executor.
async fn blocking<R: Send + 'static>(f: impl FnOnce() -> R + Send + 'static) -> Result<R, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

#[derive(Debug, Deserialize)]
struct CreateRequest {
    attacker: Option<String>,
    victim: Option<String>,
    victim_embedding: Option<Vec<f64>>,
    target: Option<PerturbationConfig>,
    seed: Option<u64>,
    n_spots: Option<usize>,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    let attacker = image_field(&req.attacker, "attacker")?
        .ok_or_else(|| ApiError::bad_request("attacker image is required").with_field("attacker"))?;
    let victim = image_field(&req.victim, "victim")?;
    if victim.is_none() && req.victim_embedding.is_none() {
        return Err(ApiError::bad_request("victim image or victim_embedding is required").with_field("victim"));
    }
    if let Some(v) = &victim {
        if !v.same_shape(&attacker) {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "size_mismatch",
                format!("victim is {}x{}, attacker {}x{}", v.width(), v.height(), attacker.width(), attacker.height()),
            )
            .with_field("victim"));
        }
    }
    let (h, w) = (attacker.height(), attacker.width());
    if let Some(t) = &req.target {
        t.validate_for_canvas(h, w).map_err(|e| ApiError::from(e).with_field_prefix("target"))?;
    }
    let mut attack = app.settings.attack.clone();
    if let Some(seed) = req.seed {
        attack.seed = seed;
    }
    if let Some(n) = req.n_spots {
        if n == 0 {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", "n_spots must be >= 1")
                .with_field("n_spots"));
        }
        attack.n_spots = n;
    }

    let app2 = app.clone();
    let session = blocking(move || -> Result<Session, ApiError> {
        app2.pool.with(|oracle| {
            let victim = match (victim, req.victim_embedding) {
                (Some(img), _) => oracle.embed(&img.clamped())?,
                (None, Some(values)) => Embedding::from_values(values),
                (None, None) => unreachable!("checked above"),
            };
            let mut start = initial_config(h, w, attack.n_spots, attack.seed);
            start.amp = 0.0;
            let initial_loss = objective(&attacker, &victim, &start, oracle).map_err(|e| match e {
                OracleError::LengthMismatch(..) => {
                    ApiError::bad_request(e.to_string()).with_field("victim_embedding")
                }
                e => e.into(),
            })?;
            Ok(Session {
                id: format!("{:032x}", rand::rng().random::<u128>()),
                state: AttackState::new(Goal::Impersonate, start, &attack.adam),
                attacker,
                victim,
                attack,
                target: req.target,
                initial_loss,
                history: vec![HistoryEntry { revision: 0, loss: initial_loss }],
                revision: 0,
                last_used: Instant::now(),
            })
        })
    })
    .await??;
    app.persist(&session);
    let view = session.view();
    tracing::info!(session = %session.id, loss = session.initial_loss, "session created");
    app.sessions
        .write()
        .expect("sessions lock")
        .insert(session.id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)))
}

impl ApiError {
    fn with_field_prefix(mut self, prefix: &str) -> Self {
        self.body.field = Some(match self.body.field.take() {
            Some(f) => format!("{prefix}.{f}"),
            None => prefix.to_string(),
        });
        self
    }
}

async fn get_session(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let session = app.session(&id)?;
    let mut s = session.lock().await;
    s.last_used = Instant::now();
    Ok(Json(s.view()))
}

async fn delete_session(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<StatusCode, ApiError> {
    let removed = app.sessions.write().expect("sessions lock").remove(&id);
    match removed {
        Some(_) => {
            app.forget(&id);
            Ok(StatusCode::NO_CONTENT)
        }
        None => Err(ApiError::not_found(&id)),
    }
}

fn parse_config(body: &str, height: usize, width: usize) -> Result<PerturbationConfig, ApiError> {
    let cfg = PerturbationConfig::from_json(body)?;
    cfg.validate_for_canvas(height, width)?;
    Ok(cfg)
}

async fn put_config(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: String,
) -> Result<Json<serde_json::Value>, ApiError> {
    let session = app.session(&id)?;
    let mut s = session.lock_owned().await;
    s.last_used = Instant::now();
    let cfg = parse_config(&body, s.attacker.height(), s.attacker.width())?;
    let app2 = app.clone();
    blocking(move || {
        let synth = synthesize(&s.attacker, &cfg);
        let loss = app2.pool.with(|o| distance(&o.embed(&synth.clamped())?, &s.victim))?;
        s.state.override_config(cfg);
        let revision = s.commit(Some(loss));
        app2.persist(&s);
        Ok(Json(json!({ "revision": revision, "loss": loss, "preview": preview(&synth) })))
    })
    .await?
}

async fn put_target(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: String,
) -> Result<Json<serde_json::Value>, ApiError> {
    let session = app.session(&id)?;
    let mut s = session.lock().await;
    s.last_used = Instant::now();
    let cfg = parse_config(&body, s.attacker.height(), s.attacker.width())?;
    s.target = Some(cfg);
    let revision = s.commit(None);
    app.persist(&s);
    Ok(Json(json!({ "revision": revision })))
}

#[derive(Debug, Deserialize)]
struct StepRequest {
    n: i64,
}

async fn step(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<StepRequest>, JsonRejection>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let Json(req) = body?;
    let session = app.session(&id)?;
    if req.n < 1 {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", "n must be >= 1").with_field("n"));
    }
    let mut s = session.lock_owned().await;
    s.last_used = Instant::now();
    let app2 = app.clone();
    blocking(move || {
        let s = &mut *s;
        let (h, w) = (s.attacker.height(), s.attacker.width());
        let trajectory = app2.pool.with(|oracle| -> Result<Vec<f64>, ApiError> {
            let mut trajectory = Vec::with_capacity(req.n as usize);
            for _ in 0..req.n {
                let (value, grad, _) = s.state.evaluate(&s.attacker, &s.victim, oracle, &s.attack)?;
                if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(ApiError::new(StatusCode::BAD_GATEWAY, "oracle_error", "objective is not finite"));
                }
                trajectory.push(value);
                s.state.apply(&grad, &s.attack, h, w);
            }
            Ok(trajectory)
        })?;
        let loss = app2.pool.with(|o| objective(&s.attacker, &s.victim, &s.state.config, o))?;
        let revision = s.commit(Some(loss));
        app2.persist(s);
        Ok(Json(json!({
            "revision": revision,
            "config": s.state.config,
            "trajectory": trajectory,
            "loss": loss,
            "iteration": s.state.iteration,
            "dropped_spots": s.state.dropped_spots(),
        })))
    })
    .await?
}

#[derive(Debug, Deserialize)]
struct CalibrateRequest {
    on: Option<String>,
    off: Option<String>,
}

async fn calibrate(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<CalibrateRequest>, JsonRejection>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let Json(req) = body?;
    let session = app.session(&id)?;
    let on = image_field(&req.on, "on")?.ok_or_else(|| ApiError::bad_request("on image is required").with_field("on"))?;
    let off = image_field(&req.off, "off")?.ok_or_else(|| ApiError::bad_request("off image is required").with_field("off"))?;
    let mut s = session.lock_owned().await;
    s.last_used = Instant::now();
    let Some(target) = s.target.clone() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "no_target", "session has no target configuration"));
    };
    let app2 = app.clone();
    blocking(move || {
        let settings = app2.settings.calibration;
        let mut report = app2
            .pool
            .with(|o| calibrate_once(&on, &off, &target, &s.victim, o, &settings))
            .map_err(|e| match e {
                CalibrationError::Image(e) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "size_mismatch", e.to_string()),
                e => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "calibration_failed", e.to_string()),
            })?;
        report.timestamp = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
        Ok(Json(serde_json::to_value(report).expect("report serializes")))
    })
    .await?
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(app: Arc<AppState>) -> Router {
    let cors = match &app.settings.cors_origin {
        Some(origin) => match HeaderValue::from_str(origin) {
            Ok(v) => CorsLayer::new().allow_origin(AllowOrigin::exact(v)),
            Err(_) => {
                tracing::warn!(origin, "invalid CORS origin; allowing any");
                CorsLayer::new().allow_origin(AllowOrigin::any())
            }
        },
        None => CorsLayer::new().allow_origin(AllowOrigin::any()),
    }
    .allow_methods(tower_http::cors::Any)
    .allow_headers(tower_http::cors::Any);
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/config", put(put_config))
        .route("/sessions/{id}/target", put(put_target))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/calibrate", post(calibrate))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(cors)
        .with_state(app)
}

/// Serve on `listener` until Ctrl-C, expiring idle sessions in the background.
pub async fn serve(listener: tokio::net::TcpListener, app: Arc<AppState>) -> std::io::Result<()> {
    let reaper_app = app.clone();
    let period = (app.settings.idle_ttl / 4).clamp(Duration::from_millis(100), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            reaper_app.expire_idle();
        }
    });
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Whether `dir` holds a snapshot for session `id`.
pub fn has_snapshot(dir: &Path, id: &str) -> bool {
    dir.join(format!("{id}.json")).exists()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::ReferenceEmbedding;

    fn pool(n: usize) -> OraclePool {
        OraclePool::new((0..n).map(|_| Box::new(ReferenceEmbedding::new()) as Box<dyn EmbeddingOracle>).collect())
    }

    #[test]
    fn pool_hands_out_and_returns() {
        let p = pool(2);
        let img = Image::filled(8, 8, [0.5; 3]);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| p.with(|o| o.embed(&img).unwrap()));
            }
        });
        assert_eq!(p.slots.lock().unwrap().len(), 2);
    }

    #[test]
    fn data_url_prefix_accepted() {
        let img = Image::filled(3, 4, [0.2, 0.4, 0.6]).quantized();
        let b64 = B64.encode(encode_png(&img).unwrap());
        assert_eq!(decode_b64_image(&b64).unwrap(), img);
        assert_eq!(decode_b64_image(&format!("data:image/png;base64,{b64}")).unwrap(), img);
        assert!(decode_b64_image("!!!").is_err());
    }

    #[test]
    fn config_errors_map_to_status() {
        let e = ApiError::from(ConfigError { field: "spots[0].sigma".into(), message: "must be > 0".into() });
        assert_eq!(e.status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(e.body.field.as_deref(), Some("spots[0].sigma"));
        let e = ApiError::from(ConfigError { field: "$".into(), message: "EOF".into() });
        assert_eq!(e.status, StatusCode::BAD_REQUEST);
    }

    #[test]
    fn idle_sessions_expire() {
        let dir = tempfile::tempdir().unwrap();
        let settings = ServiceSettings {
            idle_ttl: Duration::from_millis(10),
            state_dir: Some(dir.path().to_path_buf()),
            ..ServiceSettings::default()
        };
        let app = AppState::new(pool(1), settings).unwrap();
        let img = Image::filled(16, 16, [0.4; 3]);
        let s = Session {
            id: "abc".into(),
            attacker: img.clone(),
            victim: Embedding::from_values(vec![1.0]),
            attack: AttackConfig::default(),
            state: AttackState::new(Goal::Impersonate, initial_config(16, 16, 1, 0), &Default::default()),
            target: None,
            initial_loss: 0.0,
            history: vec![],
            revision: 0,
            last_used: Instant::now(),
        };
        app.persist(&s);
        assert!(has_snapshot(dir.path(), "abc"));
        app.sessions.write().unwrap().insert("abc".into(), Arc::new(tokio::sync::Mutex::new(s)));
        std::thread::sleep(Duration::from_millis(30));
        assert_eq!(app.expire_idle(), 1);
        assert!(!has_snapshot(dir.path(), "abc"));
    }
}
