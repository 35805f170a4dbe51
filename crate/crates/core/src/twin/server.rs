//! WebSocket and HTTP front of a [`Session`].
//!
//! One actor task owns the session. Connections talk to it over a command
//! queue and receive fan-out frames from a bounded broadcast channel; a
//! client that falls behind gets a `lagged` error and is dropped.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot};

use super::protocol::{ErrorCode, Message};
use super::session::{Session, Snapshot};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Wall-clock period of the simulation driver.
    pub tick: Duration,
    /// Frames buffered per client before it counts as lagging.
    pub client_buffer: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { tick: Duration::from_millis(50), client_buffer: 4096 }
    }
}

pub async fn bind(port: u16) -> Result<TcpListener, ServeError> {
    TcpListener::bind(SocketAddr::from(([0, 0, 0, 0], port))).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServeError::PortInUse(port),
        _ => ServeError::Io(e),
    })
}

enum Cmd {
    Join(oneshot::Sender<(String, broadcast::Receiver<Arc<str>>)>),
    Leave,
    Scene(oneshot::Sender<Snapshot>),
    Frame(String, oneshot::Sender<String>),
}

#[derive(Clone)]
struct AppState {
    tx: mpsc::Sender<Cmd>,
}

/// Serves until `shutdown` resolves, then hands the session back.
pub async fn serve(
    session: Session,
    listener: TcpListener,
    opts: ServeOptions,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<Session, ServeError> {
    let (tx, rx) = mpsc::channel(256);
    let (stop_tx, stop_rx) = oneshot::channel();
    let actor = tokio::spawn(run_actor(session, rx, stop_rx, opts));
    let app = Router::new()
        .route("/twin", get(ws_upgrade))
        .route("/healthz", get(|| async { "ok" }))
        .route("/scene", get(scene))
        .with_state(AppState { tx });
    // stopping the actor first closes every client stream
    let stop = async move {
        shutdown.await;
        let _ = stop_tx.send(());
    };
    axum::serve(listener, app).with_graceful_shutdown(stop).await?;
    Ok(actor.await.expect("session actor panicked"))
}

async fn run_actor(
    mut session: Session,
    mut rx: mpsc::Receiver<Cmd>,
    mut stop: oneshot::Receiver<()>,
    opts: ServeOptions,
) -> Session {
    let (fanout, _) = broadcast::channel::<Arc<str>>(opts.client_buffer.max(1));
    let mut clients = 0usize;
    let mut clock = tokio::time::interval(opts.tick);
    clock.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut last = tokio::time::Instant::now();
    let send_all = |msgs: Vec<Message>| {
        for m in msgs {
            // no receivers is fine
            let _ = fanout.send(Arc::from(m.to_text()));
        }
    };
    loop {
        tokio::select! {
            _ = &mut stop => break,
            now = clock.tick() => {
                let dt = now.duration_since(last).as_secs_f64();
                last = now;
                send_all(session.advance(dt));
            }
            cmd = rx.recv() => match cmd {
                None => break,
                Some(Cmd::Join(reply)) => {
                    clients += 1;
                    session.set_clients(clients);
                    let _ = reply.send((session.snapshot_message().to_text(), fanout.subscribe()));
                }
                Some(Cmd::Leave) => {
                    clients = clients.saturating_sub(1);
                    session.set_clients(clients);
                }
                Some(Cmd::Scene(reply)) => {
                    let _ = reply.send(session.snapshot());
                }
                Some(Cmd::Frame(text, reply)) => {
                    let out = session.handle_text(&text);
                    let _ = reply.send(out.reply.to_text());
                    send_all(out.broadcast);
                }
            }
        }
    }
    session
}

async fn scene(State(st): State<AppState>) -> Response {
    let (tx, rx) = oneshot::channel();
    if st.tx.send(Cmd::Scene(tx)).await.is_err() {
        return (axum::http::StatusCode::SERVICE_UNAVAILABLE, "shutting down").into_response();
    }
    match rx.await {
        Ok(s) => Json(s).into_response(),
        Err(_) => (axum::http::StatusCode::SERVICE_UNAVAILABLE, "shutting down").into_response(),
    }
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(st): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| client(socket, st))
}

async fn client(socket: WebSocket, st: AppState) {
    let (mut sink, mut stream) = socket.split();
    if sink.send(WsMessage::Text(Message::hello().to_text())).await.is_err() {
        return;
    }
    let (tx, rx) = oneshot::channel();
    if st.tx.send(Cmd::Join(tx)).await.is_err() {
        return;
    }
    let Ok((snapshot, mut frames)) = rx.await else {
        return;
    };
    if sink.send(WsMessage::Text(snapshot)).await.is_ok() {
        loop {
            tokio::select! {
                f = frames.recv() => match f {
                    Ok(text) => {
                        if sink.send(WsMessage::Text(text.to_string())).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        let m = Message::error(None, ErrorCode::Lagged, format!("dropped after missing {n} frames"));
                        let _ = sink.send(WsMessage::Text(m.to_text())).await;
                        let _ = sink.send(WsMessage::Close(None)).await;
                        break;
                    }
                    Err(broadcast::error::RecvError::Closed) => {
                        let _ = sink.send(WsMessage::Close(None)).await;
                        break;
                    }
                },
                m = stream.next() => match m {
                    Some(Ok(WsMessage::Text(text))) => {
                        let (tx, rx) = oneshot::channel();
                        if st.tx.send(Cmd::Frame(text, tx)).await.is_err() {
                            break;
                        }
                        let Ok(reply) = rx.await else { break };
                        if sink.send(WsMessage::Text(reply)).await.is_err() {
                            break;
                        }
                    }
                    Some(Ok(WsMessage::Binary(_))) => {
                        let m = Message::error(None, ErrorCode::BadJson, "binary frames are not supported");
                        if sink.send(WsMessage::Text(m.to_text())).await.is_err() {
                            break;
                        }
                    }
                    Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => {}
                },
            }
        }
    }
    let _ = st.tx.send(Cmd::Leave).await;
}
