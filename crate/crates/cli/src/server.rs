//! HTTP/WebSocket API and TCP frame ingest for live sessions.
//!
//! Every session is owned by one actor task. Commands (from HTTP), frames
//! (from ingest) and clock ticks go through that task and nowhere else, so
//! the state machine sees a single ordered input stream. Emitted events are
//! broadcast to WebSocket subscribers.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gesture_core::ingestion::MAX_LINE_BYTES;
use gesture_core::session::{
    GestureLibrary, Session, SessionCommand, SessionConfig, SessionCounters, SessionError, SessionEvent, SessionInput, SessionMachine, SessionStage,
};
use gesture_core::{decode_frame_line, Body14Frame, PoseEncoding};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, oneshot, watch, Notify};
use uuid::Uuid;

/// Capacity of the per-session frame queue.
pub const FRAME_QUEUE_CAPACITY: usize = 256;
const EVENT_BUFFER: usize = 1024;
const TICK_PERIOD: Duration = Duration::from_millis(100);

/// Bounded frame queue that discards its oldest frame when full.
#[derive(Debug, Default)]
pub struct FrameQueue {
    frames: Mutex<VecDeque<Body14Frame>>,
    notify: Notify,
    dropped: AtomicU64,
    malformed: AtomicU64,
}

impl FrameQueue {
    pub fn push(&self, frame: Body14Frame) {
        {
            let mut q = self.frames.lock().expect("frame queue poisoned");
            if q.len() == FRAME_QUEUE_CAPACITY {
                q.pop_front();
                self.dropped.fetch_add(1, Ordering::Relaxed);
            }
            q.push_back(frame);
        }
        self.notify.notify_one();
    }

    fn pop(&self) -> Option<Body14Frame> {
        self.frames.lock().expect("frame queue poisoned").pop_front()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn malformed(&self) -> u64 {
        self.malformed.load(Ordering::Relaxed)
    }
}

/// What `GET /api/session/{id}` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub id: Uuid,
    pub stage: SessionStage,
    pub selected_gesture: Option<String>,
    pub capture_open: bool,
    pub clock: Option<f64>,
    pub next_sequence: u64,
    pub counters: SessionCounters,
    #[serde(default)]
    pub frames_dropped_queue: u64,
    #[serde(default)]
    pub frames_malformed: u64,
}

type CommandReply = Result<SessionSnapshot, SessionError>;

#[derive(Clone)]
struct SessionHandle {
    commands: mpsc::Sender<(SessionCommand, oneshot::Sender<CommandReply>)>,
    frames: Arc<FrameQueue>,
    events: broadcast::Sender<SessionEvent>,
    snapshot: watch::Receiver<SessionSnapshot>,
}

impl SessionHandle {
    fn snapshot(&self) -> SessionSnapshot {
        let mut s = self.snapshot.borrow().clone();
        s.frames_dropped_queue = self.frames.dropped();
        s.frames_malformed = self.frames.malformed();
        s
    }
}

pub struct AppState {
    library: Arc<GestureLibrary>,
    config: SessionConfig,
    log_dir: Option<PathBuf>,
    sessions: RwLock<HashMap<Uuid, SessionHandle>>,
}

impl AppState {
    pub fn new(library: GestureLibrary, config: SessionConfig, log_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            library: Arc::new(library),
            config,
            log_dir,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    fn session(&self, id: &str) -> Option<SessionHandle> {
        let id = Uuid::parse_str(id).ok()?;
        self.sessions.read().expect("session map poisoned").get(&id).cloned()
    }

    fn create_session(&self) -> io::Result<Uuid> {
        let id = Uuid::new_v4();
        let log: Box<dyn Write + Send> = match &self.log_dir {
            Some(dir) => Box::new(BufWriter::new(File::create(dir.join(format!("{id}.ndjson")))?)),
            None => Box::new(io::sink()),
        };
        let machine = SessionMachine::new(self.library.clone(), self.config);
        let session = Session::new(machine, LogSink::new(log, id));
        let (cmd_tx, cmd_rx) = mpsc::channel(64);
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        let frames = Arc::new(FrameQueue::default());
        let (snap_tx, snap_rx) = watch::channel(snapshot_of(id, &session));
        let actor = Actor {
            id,
            session,
            commands: cmd_rx,
            frames: frames.clone(),
            events: events.clone(),
            snapshot: snap_tx,
            last_input: Instant::now(),
        };
        tokio::spawn(actor.run());
        let handle = SessionHandle {
            commands: cmd_tx,
            frames,
            events,
            snapshot: snap_rx,
        };
        self.sessions.write().expect("session map poisoned").insert(id, handle);
        Ok(id)
    }
}

/// Session log writer that reports the first failure and then discards
/// output, so a full disk does not stop a live session.
struct LogSink {
    inner: Option<Box<dyn Write + Send>>,
    id: Uuid,
}

impl LogSink {
    fn new(inner: Box<dyn Write + Send>, id: Uuid) -> Self {
        Self { inner: Some(inner), id }
    }

    fn guard(&mut self, r: io::Result<()>) {
        if let Err(e) = r {
            eprintln!("session {}: log disabled after write error: {e}", self.id);
            self.inner = None;
        }
    }
}

impl Write for LogSink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if let Some(w) = self.inner.as_mut() {
            let r = w.write_all(buf);
            self.guard(r);
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if let Some(w) = self.inner.as_mut() {
            let r = w.flush();
            self.guard(r);
        }
        Ok(())
    }
}

fn snapshot_of(id: Uuid, session: &Session<LogSink>) -> SessionSnapshot {
    let s = session.state();
    SessionSnapshot {
        id,
        stage: s.stage,
        selected_gesture: s.selected_gesture.clone(),
        capture_open: s.capture.is_some(),
        clock: s.clock,
        next_sequence: s.next_sequence,
        counters: s.counters.clone(),
        frames_dropped_queue: 0,
        frames_malformed: 0,
    }
}

struct Actor {
    id: Uuid,
    session: Session<LogSink>,
    commands: mpsc::Receiver<(SessionCommand, oneshot::Sender<CommandReply>)>,
    frames: Arc<FrameQueue>,
    events: broadcast::Sender<SessionEvent>,
    snapshot: watch::Sender<SessionSnapshot>,
    /// Wall time of the last frame or command, used to extend stream time
    /// when frames stop arriving.
    last_input: Instant,
}

impl Actor {
    async fn run(mut self) {
        let mut ticker = tokio::time::interval(TICK_PERIOD);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        let frames = self.frames.clone();
        loop {
            tokio::select! {
                biased;
                msg = self.commands.recv() => {
                    let Some((command, reply)) = msg else { break };
                    self.last_input = Instant::now();
                    let outcome = self.apply(SessionInput::Command { command });
                    let _ = reply.send(outcome.map(|()| self.snapshot.borrow().clone()));
                }
                _ = frames.notify.notified() => {
                    while let Some(frame) = frames.pop() {
                        self.last_input = Instant::now();
                        let _ = self.apply(SessionInput::Frame { frame });
                    }
                }
                _ = ticker.tick() => self.tick(),
            }
        }
    }

    /// Stream time advances with wall time between inputs; a tick is only
    /// needed while a capture window is open.
    fn tick(&mut self) {
        let state = self.session.state();
        let (Some(clock), Some(capture)) = (state.clock, state.capture.as_ref()) else {
            return;
        };
        if capture.started_at.is_none() {
            return;
        }
        let time = clock + self.last_input.elapsed().as_secs_f64();
        let _ = self.apply(SessionInput::Tick { time });
    }

    fn apply(&mut self, input: SessionInput) -> Result<(), SessionError> {
        let events = self.session.apply(input).expect("log sink never fails")?;
        for e in events {
            let _ = self.events.send(e);
        }
        self.snapshot.send_replace(snapshot_of(self.id, &self.session));
        Ok(())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(get_session))
        .route("/api/session/{id}/command", post(post_command))
        .route("/api/session/{id}/events", get(events))
        .route("/api/gestures", get(list_gestures))
        .with_state(state)
}

fn error(status: StatusCode, kind: &str, message: String) -> Response {
    (status, Json(json!({ "error": kind, "message": message }))).into_response()
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}"))
}

async fn create_session(State(app): State<Arc<AppState>>) -> Response {
    match app.create_session() {
        Ok(id) => (StatusCode::CREATED, Json(json!({ "id": id }))).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "log_unavailable", e.to_string()),
    }
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match app.session(&id) {
        Some(h) => Json(h.snapshot()).into_response(),
        None => not_found(&id),
    }
}

async fn post_command(State(app): State<Arc<AppState>>, Path(id): Path<String>, Json(command): Json<SessionCommand>) -> Response {
    let Some(handle) = app.session(&id) else {
        return not_found(&id);
    };
    let (tx, rx) = oneshot::channel();
    if handle.commands.send((command, tx)).await.is_err() {
        return error(StatusCode::GONE, "session_closed", format!("session {id} has stopped"));
    }
    match rx.await {
        Ok(Ok(snap)) => Json(json!({ "stage": snap.stage, "selected_gesture": snap.selected_gesture })).into_response(),
        Ok(Err(e)) => {
            let (status, kind) = match &e {
                SessionError::IllegalTransition { .. } => (StatusCode::CONFLICT, "illegal_transition"),
                SessionError::NoGestureSelected => (StatusCode::CONFLICT, "no_gesture_selected"),
                SessionError::UnknownGesture(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_gesture"),
                _ => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_command"),
            };
            error(status, kind, e.to_string())
        }
        Err(_) => error(StatusCode::GONE, "session_closed", format!("session {id} has stopped")),
    }
}

#[derive(Serialize)]
struct GestureListing<'a> {
    id: &'a str,
    display_name: &'a str,
    uses_object: bool,
    encoding: PoseEncoding,
    components: usize,
    threshold: f64,
}

async fn list_gestures(State(app): State<Arc<AppState>>) -> Response {
    let list: Vec<GestureListing> = app
        .library
        .iter()
        .map(|g| GestureListing {
            id: &g.id,
            display_name: &g.display_name,
            uses_object: g.uses_object,
            encoding: g.encoding(),
            components: g.model.component_count(),
            threshold: g.calibration.threshold,
        })
        .collect();
    Json(list).into_response()
}

async fn events(State(app): State<Arc<AppState>>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Response {
    let Some(handle) = app.session(&id) else {
        return not_found(&id);
    };
    // Subscribe before the upgrade completes so no event emitted after the
    // handshake is missed.
    let rx = handle.events.subscribe();
    ws.on_upgrade(move |socket| forward_events(socket, rx))
}

async fn forward_events(mut socket: WebSocket, mut rx: broadcast::Receiver<SessionEvent>) {
    loop {
        tokio::select! {
            event = rx.recv() => match event {
                Ok(e) => {
                    let Ok(text) = serde_json::to_string(&e) else { continue };
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        return;
                    }
                }
                // A slow subscriber skips ahead; the gap shows in the sequence numbers.
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

enum Line {
    Complete,
    TooLong,
}

/// Reads one line into `buf` without holding more than the wire limit in
/// memory. `None` at end of stream.
async fn read_line_limited<R: AsyncBufRead + Unpin>(reader: &mut R, buf: &mut Vec<u8>) -> io::Result<Option<Line>> {
    buf.clear();
    let mut overflow = false;
    loop {
        let chunk = reader.fill_buf().await?;
        if chunk.is_empty() {
            return Ok(match (buf.is_empty() && !overflow, overflow) {
                (true, _) => None,
                (false, true) => Some(Line::TooLong),
                (false, false) => Some(Line::Complete),
            });
        }
        let (take, done) = match chunk.iter().position(|&b| b == b'\n') {
            Some(i) => (i + 1, true),
            None => (chunk.len(), false),
        };
        if !overflow {
            if buf.len() + take > MAX_LINE_BYTES + 1 {
                overflow = true;
                buf.clear();
            } else {
                buf.extend_from_slice(&chunk[..take]);
            }
        }
        reader.consume(take);
        if done {
            return Ok(Some(if overflow { Line::TooLong } else { Line::Complete }));
        }
    }
}

#[derive(Deserialize)]
struct Bind {
    session: String,
}

async fn handle_ingest(app: Arc<AppState>, stream: TcpStream, peer: SocketAddr) -> io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut reader = BufReader::new(read);
    let mut buf = Vec::new();
    let handle = match read_line_limited(&mut reader, &mut buf).await? {
        Some(Line::Complete) => {
            let bind = serde_json::from_slice::<Bind>(&buf).ok();
            bind.as_ref().and_then(|b| app.session(&b.session)).zip(bind)
        }
        _ => None,
    };
    let Some((handle, bind)) = handle else {
        write
            .write_all(b"{\"error\":\"first line must be {\\\"session\\\":\\\"<id>\\\"} naming a live session\"}\n")
            .await?;
        return Ok(());
    };
    write
        .write_all(format!("{}\n", json!({ "ok": true, "session": bind.session })).as_bytes())
        .await?;
    eprintln!("ingest {peer} bound to session {}", bind.session);
    while let Some(line) = read_line_limited(&mut reader, &mut buf).await? {
        let frame = match line {
            Line::Complete => std::str::from_utf8(&buf)
                .ok()
                .map(|s| s.trim_end_matches(['\n', '\r']))
                .filter(|s| !s.trim().is_empty())
                .map(decode_frame_line),
            Line::TooLong => {
                handle.frames.malformed.fetch_add(1, Ordering::Relaxed);
                continue;
            }
        };
        match frame {
            Some(Ok(f)) => handle.frames.push(f),
            Some(Err(_)) => {
                handle.frames.malformed.fetch_add(1, Ordering::Relaxed);
            }
            None => {}
        }
    }
    Ok(())
}

pub async fn ingest_loop(app: Arc<AppState>, listener: TcpListener) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                let _ = stream.set_nodelay(true);
                let app = app.clone();
                tokio::spawn(async move {
                    if let Err(e) = handle_ingest(app, stream, peer).await {
                        eprintln!("ingest {peer}: {e}");
                    }
                });
            }
            Err(e) => eprintln!("ingest accept failed: {e}"),
        }
    }
}

/// Serves the API and ingest on already-bound listeners until the HTTP
/// server stops.
pub async fn serve(app: Arc<AppState>, http: TcpListener, ingest: TcpListener) -> io::Result<()> {
    tokio::spawn(ingest_loop(app.clone(), ingest));
    axum::serve(http, router(app)).await
}

pub async fn run(http: SocketAddr, ingest: SocketAddr, library: GestureLibrary, config: SessionConfig, log_dir: Option<PathBuf>) -> Result<()> {
    let http_listener = TcpListener::bind(http).await.with_context(|| format!("binding {http}"))?;
    let ingest_listener = TcpListener::bind(ingest).await.with_context(|| format!("binding {ingest}"))?;
    eprintln!("http on {}, ingest on {}", http_listener.local_addr()?, ingest_listener.local_addr()?);
    serve(AppState::new(library, config, log_dir), http_listener, ingest_listener).await?;
    Ok(())
}
