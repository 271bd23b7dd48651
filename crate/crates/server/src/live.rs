//! Live takeover sessions. One pacing task per session owns the engine;
//! sockets hand it raw lines through a queue and receive frames from a
//! broadcast channel.

use crate::{blocking, ApiError, ApiResult, AppState};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::response::Response;
use axum::Json;
use coopbench_core::api::{ScenarioRef, SessionInfo, SessionRequest};
use coopbench_core::bench::{BuiltinSuite, DemonstrationLog};
use coopbench_core::bridge::{BridgeSession, ServerFrame};
use coopbench_core::scenario::parse_scenario_dir;
use coopbench_core::sim::Bindings;
use futures_util::{SinkExt, StreamExt};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::time::MissedTickBehavior;

enum Input {
    Line(u64, String),
    Attach,
    Detach(u64),
    Demos(oneshot::Sender<Vec<DemonstrationLog>>),
    Close,
}

#[derive(Clone)]
pub struct SessionHandle {
    pub info: SessionInfo,
    tx: mpsc::Sender<Input>,
    frames: broadcast::Sender<String>,
    next_conn: Arc<AtomicU64>,
}

struct Pacer {
    id: String,
    session: BridgeSession,
    frames: broadcast::Sender<String>,
    demo_dir: Option<PathBuf>,
    saved: usize,
    /// Connection that last claimed takeover.
    driver: Option<u64>,
    started: bool,
}

impl Pacer {
    fn emit(&self, out: Vec<ServerFrame>) {
        for f in out {
            // no receivers is fine
            let _ = self.frames.send(f.to_line());
        }
    }

    fn save_demos(&mut self) {
        let Some(dir) = &self.demo_dir else { return };
        while self.saved < self.session.demos().len() {
            let path = dir.join(format!("{}_{}.json", self.id, self.saved));
            match self.session.demos()[self.saved].save(&path) {
                Ok(()) => tracing::info!("demo written to {}", path.display()),
                Err(e) => tracing::error!("demo not written: {e}"),
            }
            self.saved += 1;
        }
    }

    /// Returns false once the session should end.
    fn handle(&mut self, input: Input) -> bool {
        match input {
            Input::Line(conn, l) => {
                let was = self.session.takeover();
                let out = self.session.handle_line(&l);
                if self.session.takeover() && (!was || self.driver.is_none()) {
                    self.driver = Some(conn);
                } else if !self.session.takeover() {
                    self.driver = None;
                }
                self.emit(out);
                self.save_demos();
            }
            Input::Attach => {
                self.started = true;
                self.emit(vec![self.session.state_frame()]);
            }
            Input::Detach(conn) => {
                if self.driver == Some(conn) {
                    self.driver = None;
                    let out = self.session.disconnect();
                    self.emit(out);
                }
            }
            Input::Demos(reply) => {
                let _ = reply.send(self.session.demos().to_vec());
            }
            Input::Close => return false,
        }
        true
    }

    async fn run(mut self, mut rx: mpsc::Receiver<Input>, period: Duration) {
        let mut ticker = tokio::time::interval(period);
        ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = ticker.tick() => {
                    if self.started {
                        let out = self.session.step();
                        self.emit(out);
                    }
                }
                msg = rx.recv() => match msg {
                    Some(m) => if !self.handle(m) { break },
                    None => break,
                },
            }
        }
        tracing::info!("bridge session {} closed", self.id);
    }
}

pub async fn create(State(app): State<AppState>, Json(req): Json<SessionRequest>) -> ApiResult<SessionInfo> {
    let session = blocking(move || {
        let scenario = match &req.scenario {
            ScenarioRef::Dir(d) => parse_scenario_dir(d).map_err(ApiError::bad)?,
            ScenarioRef::Builtin(id) => {
                BuiltinSuite::find(id).ok_or_else(|| ApiError::bad(format!("no built-in scenario {id}")))?
            }
        };
        let bindings = Bindings::uniform(&scenario, req.policy.clone());
        BridgeSession::new(scenario, bindings, req.episode.clone(), req.seed, &req.cav).map_err(ApiError::bad)
    })
    .await?;
    let id = app.session_id();
    let info = SessionInfo {
        id: id.clone(),
        scenario_id: session.episode().scenario().id.clone(),
        cav: session.cav().to_string(),
        ws_path: format!("/v1/bridge/sessions/{id}/ws"),
    };
    let (tx, rx) = mpsc::channel(256);
    let (frames, _) = broadcast::channel(1024);
    let pacer = Pacer {
        id: id.clone(),
        session,
        frames: frames.clone(),
        demo_dir: app.cfg.demo_dir.clone(),
        saved: 0,
        driver: None,
        started: false,
    };
    tokio::spawn(pacer.run(rx, app.cfg.tick_interval));
    let handle = SessionHandle {
        info: info.clone(),
        tx,
        frames,
        next_conn: Arc::default(),
    };
    app.sessions.lock().expect("session table").insert(id, handle);
    Ok(Json(info))
}

fn handle(app: &AppState, id: &str) -> Result<SessionHandle, ApiError> {
    app.sessions
        .lock()
        .expect("session table")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
}

pub async fn list(State(app): State<AppState>) -> Json<Vec<SessionInfo>> {
    let mut v: Vec<SessionInfo> = app.sessions.lock().expect("session table").values().map(|h| h.info.clone()).collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    Json(v)
}

pub async fn close(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionInfo> {
    let h = app
        .sessions
        .lock()
        .expect("session table")
        .remove(&id)
        .ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
    let _ = h.tx.send(Input::Close).await;
    Ok(Json(h.info))
}

pub async fn demos(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Vec<DemonstrationLog>> {
    let h = handle(&app, &id)?;
    let (tx, rx) = oneshot::channel();
    h.tx.send(Input::Demos(tx))
        .await
        .map_err(|_| ApiError::not_found(format!("session {id} has ended")))?;
    rx.await
        .map(Json)
        .map_err(|_| ApiError::not_found(format!("session {id} has ended")))
}

pub async fn socket(State(app): State<AppState>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Result<Response, ApiError> {
    let h = handle(&app, &id)?;
    Ok(ws.on_upgrade(move |socket| attach(socket, h)))
}

async fn attach(socket: WebSocket, h: SessionHandle) {
    let (mut sink, mut stream) = socket.split();
    let conn = h.next_conn.fetch_add(1, Ordering::SeqCst);
    let mut frames = h.frames.subscribe();
    if h.tx.send(Input::Attach).await.is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        loop {
            match frames.recv().await {
                Ok(line) => {
                    if sink.send(Message::Text(line.into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => tracing::warn!("viewer skipped {n} frames"),
                Err(broadcast::error::RecvError::Closed) => break,
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            Message::Text(t) => {
                for line in t.lines() {
                    if h.tx.send(Input::Line(conn, line.to_string())).await.is_err() {
                        break;
                    }
                }
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    let _ = h.tx.send(Input::Detach(conn)).await;
    writer.abort();
}
