//! Admin HTTP API, the status event stream and the console page.

use std::convert::Infallible;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use snap_core::model::normalize_serial;
use snap_core::protocol::{Action, ErrorBody};
use snap_core::registry::{RegistrationRecord, RegistryError};
use snap_core::service::ServiceError;
use snap_core::session::{SessionError, SessionRecord};
use tokio::sync::broadcast;
use tracing::warn;

use crate::Shared;

const CONSOLE: &str = include_str!("console.html");

pub(crate) fn router(shared: Shared) -> Router {
    Router::new()
        .route("/", get(console))
        .route("/api/devices/registered", get(list_registered))
        .route("/api/devices/connected", get(list_connected))
        .route("/api/devices", post(register))
        .route("/api/devices/{serial}", delete(revoke))
        .route("/api/devices/{serial}/disable", post(disable))
        .route("/api/devices/{serial}/enable", post(enable))
        .route("/api/rescan", post(rescan))
        .route("/api/events", get(events))
        .with_state(shared)
}

pub(crate) struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn bad_request(detail: impl ToString) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                reason: "bad-request".into(),
                detail: detail.to_string(),
            },
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::BadSerial(_) | ServiceError::BadIp(_) => StatusCode::BAD_REQUEST,
            ServiceError::Registry(RegistryError::InvalidSerial(_)) => StatusCode::BAD_REQUEST,
            ServiceError::Registry(RegistryError::NotRegistered(_)) => StatusCode::NOT_FOUND,
            ServiceError::Session(SessionError::NoSuchSession(_)) => StatusCode::NOT_FOUND,
            ServiceError::Session(SessionError::CannotEnableDenied(_)) => StatusCode::CONFLICT,
            ServiceError::Registry(_) | ServiceError::Session(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            warn!(error = %e, "admin request failed");
        }
        ApiError {
            status,
            body: e.to_error_body(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn console() -> Html<&'static str> {
    Html(CONSOLE)
}

async fn list_registered(State(s): State<Shared>) -> Json<Vec<RegistrationRecord>> {
    Json(s.service.list_registered().into_iter().filter(|r| !r.revoked).collect())
}

async fn list_connected(State(s): State<Shared>) -> Json<Vec<SessionRecord>> {
    Json(s.service.list_connected())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterBody {
    serial: String,
    #[serde(default)]
    label: String,
}

async fn register(
    State(s): State<Shared>,
    body: Result<Json<RegisterBody>, JsonRejection>,
) -> Result<(StatusCode, Json<RegistrationRecord>), ApiError> {
    let Json(body) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let record = s.service.register(&body.serial, &body.label)?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn revoke(State(s): State<Shared>, Path(serial): Path<String>) -> ApiResult<RegistrationRecord> {
    Ok(Json(s.service.revoke(&serial)?))
}

fn control(s: &Shared, serial: &str, action: Action) -> ApiResult<SessionRecord> {
    let serial = normalize_serial(serial).map_err(ServiceError::BadSerial)?;
    Ok(Json(s.service.set_status(&serial, action, "admin-api")?))
}

async fn disable(State(s): State<Shared>, Path(serial): Path<String>) -> ApiResult<SessionRecord> {
    control(&s, &serial, Action::Disable)
}

async fn enable(State(s): State<Shared>, Path(serial): Path<String>) -> ApiResult<SessionRecord> {
    control(&s, &serial, Action::Enable)
}

#[derive(Debug, Serialize)]
struct RescanReply {
    purged: usize,
}

async fn rescan(State(s): State<Shared>) -> ApiResult<RescanReply> {
    Ok(Json(RescanReply {
        purged: s.service.rescan()?,
    }))
}

/// Every status event as an SSE `status` event whose data is the JSON
/// `{"ap_id","serial","status","cause"}`. A subscriber that falls behind
/// gets a `resync` event and should re-read the tables. Ends when the server
/// shuts down.
async fn events(State(s): State<Shared>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = s.events.subscribe();
    let stop = s.shutdown.clone();
    let stream = futures::stream::unfold((rx, stop), |(mut rx, mut stop)| async move {
        let ev = tokio::select! {
            ev = rx.recv() => ev,
            _ = crate::stopped(&mut stop) => return None,
        };
        let event = match ev {
            Ok(ev) => {
                let data = serde_json::to_string(&ev).expect("event serializes");
                Event::default().event("status").data(data)
            }
            Err(broadcast::error::RecvError::Lagged(n)) => {
                warn!(skipped = n, "event stream subscriber fell behind");
                Event::default().event("resync").data(n.to_string())
            }
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        Some((Ok(event), (rx, stop)))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
