//! Operator API: state snapshot, command relay and the NDJSON event stream.
//!
//! The service only reads the snapshot the runner publishes and forwards
//! commands to it over a channel; it never touches controller state.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use super::world::{ApiCommand, StreamEvent};
use super::OrchestratorError;

pub type CommandReply = oneshot::Sender<Result<String, String>>;
pub type CommandRequest = (ApiCommand, CommandReply);

const STREAM_BUFFER: usize = 4096;

/// State shared between a runner (live or replay) and the HTTP service.
#[derive(Debug)]
pub struct Shared {
    snapshot: RwLock<Value>,
    stream: broadcast::Sender<String>,
    commands: Mutex<Option<mpsc::Sender<CommandRequest>>>,
    closing: watch::Sender<bool>,
}

impl Shared {
    pub fn new() -> Arc<Self> {
        let (stream, _) = broadcast::channel(STREAM_BUFFER);
        Arc::new(Self {
            snapshot: RwLock::new(json!({ "status": "idle" })),
            stream,
            commands: Mutex::new(None),
            closing: watch::channel(false).0,
        })
    }

    pub fn snapshot(&self) -> Value {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn set_snapshot(&self, v: Value) {
        *self.snapshot.write().expect("snapshot lock") = v;
    }

    /// Sends one event to every connected stream client.
    pub fn publish(&self, ev: &StreamEvent) {
        // no receivers is fine
        let _ = self.stream.send(ev.to_line());
    }

    pub fn subscribe(&self) -> broadcast::Receiver<String> {
        self.stream.subscribe()
    }

    pub fn stream_clients(&self) -> usize {
        self.stream.receiver_count()
    }

    /// Installs (or with `None` removes) the runner's command inbox.
    pub fn set_command_sink(&self, sink: Option<mpsc::Sender<CommandRequest>>) {
        *self.commands.lock().expect("command lock") = sink;
    }

    /// Ends every open stream connection.
    pub fn close_streams(&self) {
        self.closing.send_replace(true);
    }

    fn command_sink(&self) -> Option<mpsc::Sender<CommandRequest>> {
        self.commands.lock().expect("command lock").clone()
    }
}

pub struct ServiceHandle {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl ServiceHandle {
    pub async fn shutdown(mut self) {
        self.shared.close_streams();
        if let Some(s) = self.shutdown.take() {
            let _ = s.send(());
        }
        let _ = self.task.await;
    }
}

async fn get_state(State(shared): State<Arc<Shared>>) -> Json<Value> {
    Json(shared.snapshot())
}

fn rejected(code: StatusCode, msg: String) -> (StatusCode, Json<Value>) {
    (code, Json(json!({ "accepted": false, "error": msg })))
}

async fn post_command(State(shared): State<Arc<Shared>>, body: Option<Json<Value>>) -> (StatusCode, Json<Value>) {
    let Some(Json(body)) = body else {
        return rejected(StatusCode::BAD_REQUEST, "body must be a JSON object".into());
    };
    let cmd = match ApiCommand::parse(&body) {
        Ok(c) => c,
        Err(e) => return rejected(StatusCode::BAD_REQUEST, e),
    };
    let Some(sink) = shared.command_sink() else {
        return rejected(StatusCode::CONFLICT, "no run in progress".into());
    };
    let (tx, rx) = oneshot::channel();
    if sink.send((cmd, tx)).await.is_err() {
        return rejected(StatusCode::CONFLICT, "run has ended".into());
    }
    match rx.await {
        Ok(Ok(cmd_id)) => (StatusCode::OK, Json(json!({ "accepted": true, "cmd_id": cmd_id }))),
        Ok(Err(e)) => rejected(StatusCode::CONFLICT, e),
        Err(_) => rejected(StatusCode::CONFLICT, "run has ended".into()),
    }
}

async fn stream(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> impl IntoResponse {
    let rx = shared.subscribe();
    let closing = shared.closing.subscribe();
    ws.on_upgrade(move |socket| pump(socket, rx, closing))
}

async fn pump(mut socket: WebSocket, mut rx: broadcast::Receiver<String>, mut closing: watch::Receiver<bool>) {
    loop {
        if *closing.borrow() {
            let _ = socket.send(Message::Close(None)).await;
            return;
        }
        tokio::select! {
            _ = closing.changed() => {}
            msg = rx.recv() => match msg {
                Ok(line) => {
                    if socket.send(Message::Text(line.into())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("stream client lagged, skipped {n} events"),
                Err(broadcast::error::RecvError::Closed) => {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

pub fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/command", post(post_command))
        .route("/api/stream", get(stream))
        .with_state(shared)
}

/// Binds `addr` (port 0 picks a free port) and serves until shut down.
pub async fn serve_operator(addr: SocketAddr, shared: Arc<Shared>) -> Result<ServiceHandle, OrchestratorError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| OrchestratorError::Service(format!("cannot bind {addr}: {e}")))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(shared.clone());
    let task = tokio::spawn(async move {
        let server = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = server.await {
            log::error!("operator service stopped: {e}");
        }
    });
    log::info!("operator API on http://{addr}/api/state");
    Ok(ServiceHandle { addr, shared, shutdown: Some(tx), task })
}
