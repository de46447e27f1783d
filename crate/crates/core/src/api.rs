//! HTTP and WebSocket service around a running simulation engine.
//!
//! The engine lives on its own thread. Handlers send it closures through a
//! channel, so no request touches engine state while a tick is in progress.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{broadcast, oneshot};

use crate::bundle::{self, BundleError, BundleStatus, Priority, DEFAULT_TTL_S, ISS};
use crate::orbital::{GeodeticPosition, PropagatorSpec, TleSet};
use crate::sim::{BundleTrace, Engine, Receipt, ScenarioSpec, ScheduleSpec, SimError, StationState, Submission};
use crate::store::{Store, StoreError};
use crate::time::{self, Timestamp};

const STEPS_PER_WAKE: usize = 10_000;
const IDLE: Duration = Duration::from_millis(10);
/// Telemetry frames a client may fall behind before it is dropped.
pub const CLIENT_BUFFER: usize = 16;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("engine error: {0}")]
    Engine(String),
    #[error("engine is not running")]
    Stopped,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            Self::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Conflict(_) => StatusCode::CONFLICT,
            Self::Integrity(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Stopped => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let kind = match &self {
            Self::Validation(_) => "validation",
            Self::NotFound(_) => "not_found",
            Self::Conflict(_) => "conflict",
            Self::Integrity(_) => "integrity",
            _ => "internal",
        };
        (
            self.status(),
            Json(serde_json::json!({ "error": kind, "message": self.to_string() })),
        )
            .into_response()
    }
}

/// Maps submission errors onto client-facing categories.
fn submit_error(e: SimError) -> ApiError {
    match e {
        SimError::UnknownNode(n) => ApiError::Validation(format!("unknown station {n}")),
        SimError::Config(m) => ApiError::Validation(m),
        SimError::Bundle(b @ (BundleError::EmptyPlaintext | BundleError::ZeroTtl | BundleError::Endpoint(_))) => {
            ApiError::Validation(b.to_string())
        }
        other => ApiError::Engine(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Simulation,
    Emulation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiConfig {
    pub mode: Mode,
    pub listen: SocketAddr,
    pub store: Option<PathBuf>,
    pub tle: Option<PathBuf>,
    pub seed: u64,
    /// Virtual seconds per wall-clock second.
    pub speed: f64,
    /// Scenario TOML file or built-in profile name to start from.
    pub scenario: Option<String>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Simulation,
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            store: None,
            tle: None,
            seed: 1,
            speed: 1.0,
            scenario: None,
        }
    }
}

impl ApiConfig {
    /// Reads `DTNSIM_MODE`, `DTNSIM_LISTEN`, `DTNSIM_STORE`, `DTNSIM_TLE`,
    /// `DTNSIM_SEED`, `DTNSIM_SPEED` and `DTNSIM_SCENARIO`.
    pub fn from_env() -> Result<Self, ApiError> {
        Self::from_vars(|k| std::env::var(k).ok())
    }

    pub fn from_vars(get: impl Fn(&str) -> Option<String>) -> Result<Self, ApiError> {
        let mut c = Self::default();
        let bad = |k: &str, v: &str| ApiError::Config(format!("{k}={v:?} is invalid"));
        if let Some(v) = get("DTNSIM_MODE") {
            c.mode = match v.to_ascii_lowercase().as_str() {
                "simulation" | "sim" => Mode::Simulation,
                "emulation" | "emu" => Mode::Emulation,
                _ => return Err(bad("DTNSIM_MODE", &v)),
            };
        }
        if let Some(v) = get("DTNSIM_LISTEN") {
            c.listen = v.parse().map_err(|_| bad("DTNSIM_LISTEN", &v))?;
        }
        c.store = get("DTNSIM_STORE").filter(|s| !s.is_empty()).map(PathBuf::from);
        c.tle = get("DTNSIM_TLE").filter(|s| !s.is_empty()).map(PathBuf::from);
        if let Some(v) = get("DTNSIM_SEED") {
            c.seed = v.parse().map_err(|_| bad("DTNSIM_SEED", &v))?;
        }
        if let Some(v) = get("DTNSIM_SPEED") {
            c.speed = v.parse().ok().filter(|s: &f64| *s >= 0.0).ok_or_else(|| bad("DTNSIM_SPEED", &v))?;
        }
        c.scenario = get("DTNSIM_SCENARIO").filter(|s| !s.is_empty());
        Ok(c)
    }

    /// Scenario the service runs: the configured one, or an empty week-long
    /// run starting now. A TLE file switches to orbital contact prediction.
    pub fn scenario_spec(&self) -> Result<ScenarioSpec, ApiError> {
        let mut spec = match &self.scenario {
            Some(s) if s.ends_with(".toml") => ScenarioSpec::load(s),
            Some(s) => ScenarioSpec::profile(s),
            None => Ok(ScenarioSpec {
                name: "service".into(),
                start: time::truncate_ms(Utc::now()),
                duration_s: 7.0 * 86_400.0,
                ..ScenarioSpec::default()
            }),
        }
        .map_err(|e| ApiError::Config(e.to_string()))?;
        spec.seed = self.seed;
        if let Some(path) = &self.tle {
            let tle = TleSet::load(path).map_err(|e| ApiError::Config(e.to_string()))?;
            spec.schedule = ScheduleSpec::Orbital {
                propagator: PropagatorSpec::Sgp4 {
                    name: tle.name.clone(),
                    line1: tle.line1.clone(),
                    line2: tle.line2.clone(),
                },
                threshold_deg: 0.0,
            };
            spec.iss_rate_bps = None;
        }
        Ok(spec)
    }
}

type Job = Box<dyn FnOnce(&mut Engine) + Send>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceOptions {
    /// Virtual seconds per wall-clock second; 0 pauses the clock.
    pub speed: f64,
    pub telemetry_period: Duration,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            speed: 1.0,
            telemetry_period: Duration::from_secs(1),
        }
    }
}

/// Cloneable access to the engine thread.
#[derive(Clone)]
pub struct ApiHandle {
    jobs: mpsc::Sender<Job>,
    telemetry: broadcast::Sender<Arc<str>>,
    latest: Arc<Mutex<Option<Arc<str>>>>,
}

impl ApiHandle {
    /// Runs `f` on the engine thread between ticks and returns its result.
    pub async fn with_engine<T: Send + 'static>(
        &self,
        f: impl FnOnce(&mut Engine) -> T + Send + 'static,
    ) -> Result<T, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.jobs
            .send(Box::new(move |e| {
                let _ = tx.send(f(e));
            }))
            .map_err(|_| ApiError::Stopped)?;
        rx.await.map_err(|_| ApiError::Stopped)
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        self.telemetry.subscribe()
    }

    fn latest(&self) -> Option<Arc<str>> {
        self.latest.lock().expect("telemetry lock").clone()
    }
}

/// The engine thread. Dropping without [`EngineService::shutdown`] leaves
/// it running until every handle is gone.
pub struct EngineService {
    handle: ApiHandle,
    stop: Arc<AtomicBool>,
    thread: JoinHandle<Result<Engine, ApiError>>,
}

impl EngineService {
    pub fn spawn(mut engine: Engine, store: Option<Store>, opts: ServiceOptions) -> Self {
        let (jobs, rx) = mpsc::channel::<Job>();
        let (telemetry, _) = broadcast::channel(CLIENT_BUFFER);
        let handle = ApiHandle {
            jobs,
            telemetry: telemetry.clone(),
            latest: Arc::new(Mutex::new(None)),
        };
        let stop = Arc::new(AtomicBool::new(false));
        if store.is_some() {
            engine.enable_journal();
        }
        let thread = {
            let (stop, latest) = (stop.clone(), handle.latest.clone());
            thread::spawn(move || run_engine(engine, store, opts, rx, telemetry, latest, stop))
        };
        Self { handle, stop, thread }
    }

    pub fn handle(&self) -> ApiHandle {
        self.handle.clone()
    }

    /// Stops the engine thread and returns the engine.
    pub fn shutdown(self) -> Result<Engine, ApiError> {
        self.stop.store(true, Ordering::Relaxed);
        self.thread.join().map_err(|_| ApiError::Engine("engine thread panicked".into()))?
    }
}

fn run_engine(
    mut engine: Engine,
    store: Option<Store>,
    opts: ServiceOptions,
    jobs: Receiver<Job>,
    telemetry: broadcast::Sender<Arc<str>>,
    latest: Arc<Mutex<Option<Arc<str>>>>,
    stop: Arc<AtomicBool>,
) -> Result<Engine, ApiError> {
    let started = Instant::now();
    let virtual0 = engine.elapsed_s();
    let mut next_tick = Instant::now();
    let publish = |engine: &Engine| {
        let doc: Arc<str> = serde_json::to_string(&engine.telemetry()).expect("telemetry").into();
        *latest.lock().expect("telemetry lock") = Some(doc.clone());
        // no receivers is fine
        let _ = telemetry.send(doc);
    };
    publish(&engine);
    while !stop.load(Ordering::Relaxed) {
        loop {
            match jobs.try_recv() {
                Ok(job) => job(&mut engine),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Ok(engine),
            }
        }
        let target = virtual0 + started.elapsed().as_secs_f64() * opts.speed;
        let mut steps = 0;
        while engine.elapsed_s() < target && engine.now() <= engine.end() && steps < STEPS_PER_WAKE {
            engine.step().map_err(|e| ApiError::Engine(e.to_string()))?;
            steps += 1;
        }
        if let Some(s) = &store {
            s.persist_journal(&engine.drain_journal())?;
        }
        if Instant::now() >= next_tick {
            publish(&engine);
            next_tick += opts.telemetry_period;
        }
        if steps < STEPS_PER_WAKE {
            thread::sleep(IDLE);
        }
    }
    if let Some(s) = &store {
        s.persist_journal(&engine.drain_journal())?;
    }
    Ok(engine)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateBundleRequest {
    pub message: String,
    pub source: String,
    #[serde(default = "iss")]
    pub destination: String,
    #[serde(default)]
    pub priority: Priority,
    #[serde(default = "yes")]
    pub custody: bool,
    #[serde(default)]
    pub ttl_s: Option<u64>,
}

fn iss() -> String {
    ISS.into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    #[serde(flatten)]
    pub receipt: Receipt,
    pub source: String,
    pub destination: String,
    /// Broadcast bundles are flooded rather than routed.
    pub flood: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayRequest {
    pub message: String,
    pub destination: String,
    #[serde(default)]
    pub priority: Priority,
    #[serde(default = "yes")]
    pub custody: bool,
    #[serde(default)]
    pub ttl_s: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecryptRequest {
    pub bundle_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecryptResponse {
    pub bundle_id: String,
    /// Plaintext as UTF-8 with invalid sequences replaced.
    pub plaintext: String,
    pub plaintext_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InboxItem {
    pub bundle_id: String,
    pub source: String,
    #[serde(with = "time::iso_ms")]
    pub delivered_at: Timestamp,
    pub encrypted_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reassembly {
    pub parent_id: String,
    pub received: u32,
    pub total: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssState {
    #[serde(with = "time::iso_ms")]
    pub timestamp: Timestamp,
    pub position: Option<GeodeticPosition>,
    pub queue_depth: usize,
    pub inbox: Vec<InboxItem>,
    pub reassembly: Vec<Reassembly>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassWindow {
    #[serde(with = "time::iso_ms")]
    pub aos: Timestamp,
    #[serde(with = "time::iso_ms")]
    pub los: Timestamp,
    pub duration_s: f64,
}

#[derive(Debug, Deserialize)]
struct StatusQuery {
    status: Option<String>,
}

#[derive(Debug, Deserialize)]
struct PassQuery {
    station: String,
    #[serde(default)]
    hours: Option<f64>,
}

pub fn router(handle: ApiHandle) -> Router {
    Router::new()
        .route("/bundles", post(create_bundle).get(list_bundles))
        .route("/stations", get(stations))
        .route("/iss/state", get(iss_state))
        .route("/passes", get(passes))
        .route("/iss/relay", post(relay))
        .route("/iss/decrypt", post(decrypt))
        .route("/telemetry", get(telemetry))
        .with_state(handle)
}

async fn submit(h: &ApiHandle, sub: Submission) -> Result<BundleSummary, ApiError> {
    if sub.plaintext.is_empty() {
        return Err(ApiError::Validation("message must not be empty".into()));
    }
    let (source, destination) = (sub.source.clone(), sub.destination.clone());
    let receipt = h.with_engine(move |e| e.submit(sub)).await?.map_err(submit_error)?;
    Ok(BundleSummary {
        receipt,
        flood: destination == bundle::BROADCAST,
        source,
        destination,
    })
}

async fn create_bundle(
    State(h): State<ApiHandle>,
    Json(req): Json<CreateBundleRequest>,
) -> Result<(StatusCode, Json<BundleSummary>), ApiError> {
    let sub = Submission {
        source: req.source,
        destination: req.destination,
        plaintext: req.message.into_bytes(),
        priority: req.priority,
        custody: req.custody,
        ttl_s: req.ttl_s.unwrap_or(DEFAULT_TTL_S),
    };
    Ok((StatusCode::CREATED, Json(submit(&h, sub).await?)))
}

async fn relay(
    State(h): State<ApiHandle>,
    Json(req): Json<RelayRequest>,
) -> Result<(StatusCode, Json<BundleSummary>), ApiError> {
    if req.destination == bundle::BROADCAST {
        return Err(ApiError::Validation("the ISS cannot broadcast".into()));
    }
    let sub = Submission {
        source: ISS.into(),
        destination: req.destination,
        plaintext: req.message.into_bytes(),
        priority: req.priority,
        custody: req.custody,
        ttl_s: req.ttl_s.unwrap_or(DEFAULT_TTL_S),
    };
    Ok((StatusCode::CREATED, Json(submit(&h, sub).await?)))
}

async fn list_bundles(
    State(h): State<ApiHandle>,
    Query(q): Query<StatusQuery>,
) -> Result<Json<Vec<BundleTrace>>, ApiError> {
    let status = q
        .status
        .map(|s| s.parse::<BundleStatus>().map_err(|e| ApiError::Validation(e.to_string())))
        .transpose()?;
    let out = h
        .with_engine(move |e| {
            e.records()
                .values()
                .filter(|r| status.map_or(true, |s| r.status() == s))
                .map(|r| r.trace())
                .collect()
        })
        .await?;
    Ok(Json(out))
}

async fn stations(State(h): State<ApiHandle>) -> Result<Json<Vec<StationState>>, ApiError> {
    Ok(Json(h.with_engine(|e| e.station_states()).await?))
}

async fn iss_state(State(h): State<ApiHandle>) -> Result<Json<IssState>, ApiError> {
    let state = h
        .with_engine(|e| IssState {
            timestamp: e.now(),
            position: e.iss_position(),
            queue_depth: e.queue_depth(ISS),
            inbox: e
                .inbox(ISS)
                .map(|inbox| {
                    inbox
                        .iter()
                        .map(|(id, d)| InboxItem {
                            bundle_id: id.clone(),
                            source: d.bundle.source.to_string(),
                            delivered_at: d.at,
                            encrypted_bytes: d.bundle.encrypted_payload.len(),
                        })
                        .collect()
                })
                .unwrap_or_default(),
            reassembly: e
                .reassembly_progress(ISS)
                .into_iter()
                .map(|(parent_id, (received, total))| Reassembly {
                    parent_id,
                    received,
                    total,
                })
                .collect(),
        })
        .await?;
    Ok(Json(state))
}

async fn passes(State(h): State<ApiHandle>, Query(q): Query<PassQuery>) -> Result<Json<Vec<PassWindow>>, ApiError> {
    let hours = q.hours.unwrap_or(24.0);
    if !(hours > 0.0 && hours <= 24.0 * 14.0) {
        return Err(ApiError::Validation("hours must be in (0, 336]".into()));
    }
    let station = q.station;
    let windows = h
        .with_engine(move |e| e.passes(&station, time::from_seconds(hours * 3600.0)))
        .await?
        .map_err(|e| match e {
            SimError::UnknownNode(n) => ApiError::NotFound(format!("station {n}")),
            other => ApiError::Engine(other.to_string()),
        })?;
    Ok(Json(
        windows
            .into_iter()
            .map(|(aos, los)| PassWindow {
                aos,
                los,
                duration_s: time::seconds(los - aos),
            })
            .collect(),
    ))
}

async fn decrypt(
    State(h): State<ApiHandle>,
    Json(req): Json<DecryptRequest>,
) -> Result<Json<DecryptResponse>, ApiError> {
    let id = req.bundle_id;
    let plain = h
        .with_engine({
            let id = id.clone();
            move |e| {
                if let Some((got, total)) = e.reassembly_progress(ISS).get(&id) {
                    return Err(ApiError::Conflict(format!("{id} has {got} of {total} fragments")));
                }
                e.decrypt_at(ISS, &id).map_err(|err| match err {
                    SimError::NotFound(_) => ApiError::NotFound(format!("bundle {id} at ISS")),
                    SimError::Bundle(b) => ApiError::Integrity(b.to_string()),
                    SimError::Security(s) => ApiError::Integrity(s.to_string()),
                    other => ApiError::Engine(other.to_string()),
                })
            }
        })
        .await??;
    Ok(Json(DecryptResponse {
        bundle_id: id,
        plaintext: String::from_utf8_lossy(&plain).into_owned(),
        plaintext_b64: base64::engine::general_purpose::STANDARD.encode(&plain),
    }))
}

async fn telemetry(State(h): State<ApiHandle>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_telemetry(socket, h))
}

async fn stream_telemetry(mut socket: WebSocket, h: ApiHandle) {
    let mut rx = h.subscribe();
    if let Some(doc) = h.latest() {
        if socket.send(Message::Text(doc.to_string())).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(doc) => {
                    if socket.send(Message::Text(doc.to_string())).await.is_err() {
                        return;
                    }
                }
                // lagging clients are dropped rather than slowing the engine
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

/// Builds the engine from `cfg`, starts the service thread and serves HTTP
/// until `shutdown` resolves.
pub async fn serve(cfg: ApiConfig, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> Result<(), ApiError> {
    if cfg.mode == Mode::Emulation {
        return Err(ApiError::Config(
            "the service runs in simulation mode; use run-emulation for emulation experiments".into(),
        ));
    }
    let spec = cfg.scenario_spec()?;
    let engine = Engine::from_spec(&spec).map_err(|e| ApiError::Config(e.to_string()))?;
    let store = cfg.store.as_ref().map(Store::open).transpose()?;
    let service = EngineService::spawn(
        engine,
        store,
        ServiceOptions {
            speed: cfg.speed,
            ..ServiceOptions::default()
        },
    );
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    axum::serve(listener, router(service.handle()))
        .with_graceful_shutdown(shutdown)
        .await?;
    tokio::task::spawn_blocking(move || service.shutdown())
        .await
        .map_err(|e| ApiError::Engine(e.to_string()))??;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_parsing() {
        let vars = |k: &str| match k {
            "DTNSIM_MODE" => Some("emulation".to_string()),
            "DTNSIM_LISTEN" => Some("0.0.0.0:9000".to_string()),
            "DTNSIM_SEED" => Some("7".to_string()),
            "DTNSIM_SPEED" => Some("60".to_string()),
            _ => None,
        };
        let c = ApiConfig::from_vars(vars).unwrap();
        assert_eq!(c.mode, Mode::Emulation);
        assert_eq!(c.listen.port(), 9000);
        assert_eq!((c.seed, c.speed), (7, 60.0));
        assert!(c.store.is_none());
        assert!(ApiConfig::from_vars(|k| (k == "DTNSIM_SPEED").then(|| "-1".to_string())).is_err());
        assert!(ApiConfig::from_vars(|k| (k == "DTNSIM_MODE").then(|| "x".to_string())).is_err());
    }
}
