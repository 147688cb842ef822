//! HTTP and WebSocket gateway for browser consoles.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use iort_core::broker::{command_queue, BrokerError};
use iort_core::protocol::{decode, encode_string, ClientKind, JointCommand, Message, SeqCounter, SeqTracker};
use iort_core::scenario::receipt_json;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::mpsc::unbounded_channel;

use crate::server::{session_event, OperatorCtx, Shared};

pub fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/arms", get(list_arms))
        .route("/arms/{id}/commands", post(post_command))
        .route("/arms/{id}/patterns", get(list_patterns))
        .route("/ws", get(ws_upgrade))
        .with_state(shared)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": message.into()}))).into_response()
}

async fn list_arms(State(shared): State<Arc<Shared>>) -> Json<Value> {
    let b = shared.lock();
    Json(json!({"arms": b.arms(), "profile": b.config().profile}))
}

async fn list_patterns(State(shared): State<Arc<Shared>>, Path(arm): Path<String>) -> Response {
    let b = shared.lock();
    if b.queue(&command_queue(&arm)).is_none() {
        return error(StatusCode::NOT_FOUND, format!("unknown arm {arm}"));
    }
    Json(json!({"arm_id": arm, "patterns": b.patterns(&arm)})).into_response()
}

async fn post_command(
    State(shared): State<Arc<Shared>>,
    Path(arm): Path<String>,
    body: Bytes,
) -> Response {
    let mut value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}")),
    };
    if let Some(obj) = value.as_object_mut() {
        obj.entry("arm_id").or_insert_with(|| Value::String(arm.clone()));
    }
    let cmd: JointCommand = match serde_json::from_value(value) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if cmd.arm_id != arm {
        return error(
            StatusCode::BAD_REQUEST,
            format!("body arm_id {} does not match path {arm}", cmd.arm_id),
        );
    }
    let result = shared.lock().submit_command(cmd, None);
    match result {
        Ok(sub) => {
            shared.work.notify_waiters();
            (
                StatusCode::ACCEPTED,
                Json(json!({"receipt": receipt_json(&sub.receipt), "prompt": sub.prompt})),
            )
                .into_response()
        }
        Err(BrokerError::Rejected(v)) => {
            (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({"violations": v}))).into_response()
        }
        Err(BrokerError::NotFound(_)) => error(StatusCode::NOT_FOUND, format!("unknown arm {arm}")),
        Err(BrokerError::Invalid(m)) => error(StatusCode::BAD_REQUEST, m),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Debug, Deserialize)]
struct WsParams {
    client: String,
    #[serde(default)]
    topics: Option<String>,
}

async fn ws_upgrade(
    State(shared): State<Arc<Shared>>,
    Query(params): Query<WsParams>,
    ws: WebSocketUpgrade,
) -> Response {
    if params.client.is_empty() {
        return error(StatusCode::BAD_REQUEST, "client must not be empty");
    }
    ws.on_upgrade(move |socket| ws_session(shared, params, socket))
}

async fn ws_session(shared: Arc<Shared>, params: WsParams, socket: WebSocket) {
    let session = match shared.lock().register(ClientKind::Operator, &params.client) {
        Ok(s) => s,
        Err(e) => {
            tracing::warn!(client = %params.client, error = %e, "websocket registration refused");
            return;
        }
    };
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        let mut out = SeqCounter::default();
        while let Some(msg) = rx.recv().await {
            let Ok(text) = encode_string(&out.wrap(msg)) else {
                continue;
            };
            if sink.send(WsMessage::Text(text.trim_end().into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let mut ctx = OperatorCtx::new(shared.clone(), session, params.client.clone(), tx.clone());
    let topics: Vec<String> = params
        .topics
        .as_deref()
        .unwrap_or_default()
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    let topics = if topics.is_empty() {
        vec![format!("operator.{}.#", params.client)]
    } else {
        topics
    };
    ctx.subscribe(topics.clone());
    let _ = tx.send(session_event("registered", json!({"session": session, "topics": topics})));

    let mut incoming = SeqTracker::default();
    while let Some(frame) = stream.next().await {
        let text = match frame {
            Ok(WsMessage::Text(t)) => t,
            Ok(WsMessage::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        match decode(text.as_bytes()) {
            Ok(env) => {
                if let Err(e) = incoming.check(env.seq) {
                    let _ = tx.send(session_event("error", json!({"code": "protocol", "message": e.to_string()})));
                    continue;
                }
                ctx.handle(env.body);
            }
            Err(e) => {
                let _ = tx.send(session_event("error", json!({"code": "protocol", "message": e.to_string()})));
            }
        }
    }
    ctx.close();
    drop(ctx);
    drop(tx);
    let _ = writer.await;
}
