//! HTTP/WebSocket front end. Handlers only talk to the simulation through
//! [`SimHandle`]; register and link operations become driver requests.
//!
//! | method | path | body / query |
//! |---|---|---|
//! | GET | `/api/device` | |
//! | POST | `/api/device/plug`, `/api/device/unplug` | |
//! | GET | `/api/registers` | `?offset=&len=` |
//! | POST | `/api/registers` | `{offset, len, data}` |
//! | POST | `/api/links/{port}/enable`, `/api/links/{port}/reset` | |
//! | GET | `/api/ports` | |
//! | POST | `/api/acquire` | optional `{max_bytes}` |
//! | POST, DELETE | `/api/inject` | `{x, y, z}` |
//! | POST | `/api/tick` | `{n}` |
//! | GET | `/api/trace`, `/api/audit` | |
//! | WS | `/api/stream` | frames `{tick, x, y, z}` |
//!
//! Offsets and data are decimal JSON integers.

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use spw_core::device::split_frames;
use spw_core::ioctl::SpwCommand;
use spw_core::net::AccelSample;
use spw_core::wdf::Status;
use tokio::sync::broadcast::error::RecvError;

use crate::service::{CommandResult, ControlService, FailureReason, ServiceError};
use crate::sim::{SimGone, SimHandle};

/// Largest single `/api/tick` step.
pub const MAX_TICK_STEP: u64 = 1_000_000;
pub const DEFAULT_ACQUIRE_BYTES: u32 = 4096;

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

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<SimGone> for ApiError {
    fn from(e: SimGone) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::NoSuchPort(_) => StatusCode::NOT_FOUND,
            ServiceError::NotFound(_) | ServiceError::DeviceNotStarted(_) | ServiceError::HandleClosed | ServiceError::Lifecycle(_) => {
                StatusCode::CONFLICT
            }
            ServiceError::Testbed(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

fn failure_status(reason: &FailureReason) -> StatusCode {
    match reason {
        FailureReason::Status(Status::InvalidParameter | Status::NotSupported | Status::BufferTooSmall) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

/// JSON body parsed by hand so that every malformed body is a 400,
/// whatever the content type.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

#[derive(Clone)]
pub struct AppState {
    pub sim: SimHandle,
}

pub fn router(sim: SimHandle) -> Router {
    Router::new()
        .route("/api/device", get(device))
        .route("/api/device/plug", post(plug))
        .route("/api/device/unplug", post(unplug))
        .route("/api/registers", get(read_register).post(write_register))
        .route("/api/links/{port}/enable", post(link_enable))
        .route("/api/links/{port}/reset", post(link_reset))
        .route("/api/ports", get(ports))
        .route("/api/acquire", post(acquire))
        .route("/api/inject", post(inject).delete(clear_injection))
        .route("/api/tick", post(tick))
        .route("/api/trace", get(trace))
        .route("/api/audit", get(audit))
        .route("/api/stream", get(stream))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such endpoint") })
        .with_state(AppState { sim })
}

/// Runs `cmd` through the driver, mapping failures to HTTP errors.
async fn run(sim: &SimHandle, cmd: SpwCommand) -> Result<CommandResult, ApiError> {
    let result = sim.call(move |svc| svc.execute(&cmd)).await??;
    match result.failure() {
        Some(reason) => Err(ApiError::new(failure_status(reason), reason.to_string())),
        None => Ok(result),
    }
}

async fn run_on_port(sim: &SimHandle, port: u32, cmd: SpwCommand) -> Result<CommandResult, ApiError> {
    sim.call(move |svc: &mut ControlService| svc.check_port(port)).await??;
    run(sim, cmd).await
}

async fn device(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    let info = s.sim.call(|svc| svc.info()).await?;
    Ok(Json(serde_json::to_value(info).expect("serializable")))
}

async fn plug(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    let (trace, state) = s.sim.call(|svc| svc.plug().map(|t| (t, svc.lifecycle()))).await??;
    let names: Vec<_> = trace.iter().map(|c| c.name()).collect();
    Ok(Json(json!({ "lifecycle": state, "trace": names })))
}

async fn unplug(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    let (trace, state) = s.sim.call(|svc| svc.unplug().map(|t| (t, svc.lifecycle()))).await??;
    let names: Vec<_> = trace.iter().map(|c| c.name()).collect();
    Ok(Json(json!({ "lifecycle": state, "trace": names })))
}

#[derive(Debug, Deserialize)]
struct RegisterQuery {
    offset: u32,
    len: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterWrite {
    offset: u32,
    len: u32,
    data: u32,
}

#[derive(Debug, Serialize)]
struct RegisterReply {
    offset: u32,
    len: u32,
    data: u32,
    datasize: u32,
}

async fn read_register(
    State(s): State<AppState>,
    q: Result<Query<RegisterQuery>, QueryRejection>,
) -> Result<Json<RegisterReply>, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let r = run(&s.sim, SpwCommand::ReadReg { offset: q.offset, length: q.len }).await?;
    let data = r.payload.and_then(|p| p.register_value()).expect("register reply");
    Ok(Json(RegisterReply {
        offset: q.offset,
        len: q.len,
        data,
        datasize: q.len,
    }))
}

async fn write_register(State(s): State<AppState>, body: Bytes) -> Result<Json<RegisterReply>, ApiError> {
    let w: RegisterWrite = parse_body(&body)?;
    if !matches!(w.len, 1 | 2 | 4) {
        return Err(ApiError::bad_request("len must be 1, 2 or 4"));
    }
    if w.len < 4 && w.data >> (w.len * 8) != 0 {
        return Err(ApiError::bad_request(format!("data {} does not fit in {} bytes", w.data, w.len)));
    }
    run(&s.sim, SpwCommand::write_value(w.offset, w.len, w.data)).await?;
    Ok(Json(RegisterReply {
        offset: w.offset,
        len: w.len,
        data: w.data,
        datasize: w.len,
    }))
}

fn port_param(port: Result<Path<u32>, PathRejection>) -> Result<u32, ApiError> {
    port.map(|Path(p)| p).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn link_enable(State(s): State<AppState>, port: Result<Path<u32>, PathRejection>) -> Result<Json<Value>, ApiError> {
    let port = port_param(port)?;
    run_on_port(&s.sim, port, SpwCommand::LinkEnable { port }).await?;
    Ok(Json(json!({ "port": port, "action": "enable" })))
}

async fn link_reset(State(s): State<AppState>, port: Result<Path<u32>, PathRejection>) -> Result<Json<Value>, ApiError> {
    let port = port_param(port)?;
    run_on_port(&s.sim, port, SpwCommand::LinkReset { port }).await?;
    Ok(Json(json!({ "port": port, "action": "reset" })))
}

async fn ports(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    let r = run(&s.sim, SpwCommand::PortDiscovery).await?;
    let mask = match r.payload {
        Some(spw_core::ioctl::SpwResponse::PortMask { mask }) => mask,
        other => unreachable!("discovery reply {other:?}"),
    };
    Ok(Json(json!({ "mask": mask })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AcquireBody {
    max_bytes: u32,
}

async fn acquire(State(s): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let max_bytes = if body.iter().all(u8::is_ascii_whitespace) {
        DEFAULT_ACQUIRE_BYTES
    } else {
        parse_body::<AcquireBody>(&body)?.max_bytes
    };
    let r = run(&s.sim, SpwCommand::AcquireData { max_bytes }).await?;
    let frames = match r.payload {
        Some(spw_core::ioctl::SpwResponse::Data { frames }) => frames,
        other => unreachable!("acquire reply {other:?}"),
    };
    let samples: Vec<Value> = split_frames(&frames)
        .into_iter()
        .map(|p| match AccelSample::parse_payload(p) {
            Some((x, y, z)) => json!({ "x": x, "y": y, "z": z }),
            None => json!({ "raw": p.iter().map(|b| format!("{b:02x}")).collect::<String>() }),
        })
        .collect();
    Ok(Json(json!({
        "bytes": frames.len(),
        "samples": samples,
        "frames": frames.iter().map(|b| format!("{b:02x}")).collect::<String>(),
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InjectBody {
    x: i32,
    y: i32,
    z: i32,
}

async fn inject(State(s): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let InjectBody { x, y, z } = parse_body(&body)?;
    s.sim.call(move |svc| svc.inject(x, y, z)).await?;
    Ok(Json(json!({ "x": x, "y": y, "z": z })))
}

async fn clear_injection(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    s.sim.call(|svc| svc.clear_injection()).await?;
    Ok(Json(json!({ "injected": false })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TickBody {
    n: u64,
}

async fn tick(State(s): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let TickBody { n } = parse_body(&body)?;
    if n > MAX_TICK_STEP {
        return Err(ApiError::bad_request(format!("n must be at most {MAX_TICK_STEP}")));
    }
    let (now, delivered) = s.sim.call(move |svc| {
        let d = svc.tick(n);
        (svc.now(), d.len())
    })
    .await?;
    Ok(Json(json!({ "tick": now, "delivered": delivered })))
}

async fn trace(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    let t = s.sim.call(|svc| serde_json::to_value(svc.trace()).expect("serializable")).await?;
    Ok(Json(t))
}

async fn audit(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    let a = s.sim.call(|svc| svc.audit()).await?;
    Ok(Json(json!({ "consistent": a.consistent(), "counters": a })))
}

async fn stream(State(s): State<AppState>, ws: WebSocketUpgrade) -> Response {
    let rx = s.sim.subscribe();
    ws.on_upgrade(move |socket| forward_samples(socket, rx))
}

async fn forward_samples(mut socket: WebSocket, mut rx: tokio::sync::broadcast::Receiver<spw_core::testbed::DeliveredSample>) {
    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
            sample = rx.recv() => match sample {
                Ok(s) => {
                    let frame = serde_json::to_string(&s).expect("serializable");
                    if socket.send(Message::Text(frame.into())).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Lagged(_)) => {}
                Err(RecvError::Closed) => return,
            },
        }
    }
}

/// Serves the API on `listener` until the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, sim: SimHandle) -> std::io::Result<()> {
    axum::serve(listener, router(sim)).await
}
