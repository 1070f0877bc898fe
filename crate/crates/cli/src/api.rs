//! HTTP API used by the control panel and by scripts.
//!
//! | route                   | body / query                  |
//! |-------------------------|-------------------------------|
//! | `GET /devices`          |                               |
//! | `POST /commands`        | `{"text": "cooker 1 1800"}`   |
//! | `POST /virtual-sms`     | `{"sender": "+234…", "body": "ac 1"}` |
//! | `GET /messages`         | `?since_id=&limit=&kind=`     |
//!
//! Every API route requires `X-Auth-Token`. Static panel assets under `/`
//! are public. Error responses always carry `{"error": "<Kind>"}`.

use std::path::PathBuf;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use homectl_core::controller::DeviceView;
use homectl_core::engine::CommandOutcome;
use homectl_core::registry::Msisdn;
use homectl_core::store::{Event, EventFilter, EventKind};
use homectl_core::Timestamp;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::runtime::{Service, ServiceError};

pub const AUTH_HEADER: &str = "x-auth-token";
pub const DEFAULT_MESSAGE_LIMIT: usize = 100;
pub const MAX_MESSAGE_LIMIT: usize = 1000;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    detail: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str) -> Self {
        ApiError { status, kind, detail: None }
    }

    fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BadRequest").detail(detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.kind });
        if let Some(d) = self.detail {
            body["detail"] = d.into();
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Halted(reason) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "Halted").detail(reason),
            ServiceError::Stopped => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "Stopped"),
            ServiceError::Io(detail) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "StorageFailure").detail(detail),
        }
    }
}

fn tokens_match(given: &[u8], expected: &[u8]) -> bool {
    given.len() == expected.len() && given.iter().zip(expected).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
}

async fn require_token(State(svc): State<Service>, headers: HeaderMap, req: Request, next: Next) -> Response {
    match headers.get(AUTH_HEADER) {
        Some(v) if tokens_match(v.as_bytes(), svc.token().as_bytes()) => next.run(req).await,
        _ => ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized").into_response(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DevicesResponse {
    pub devices: Vec<DeviceView>,
    pub server_time: Timestamp,
}

async fn get_devices(State(svc): State<Service>) -> Json<DevicesResponse> {
    let (devices, server_time) = svc.devices();
    Json(DevicesResponse { devices, server_time })
}

#[derive(Debug, Deserialize)]
pub struct CommandRequest {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CommandResponse {
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

async fn post_commands(
    State(svc): State<Service>,
    body: Result<Json<CommandRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let response = match svc.submit_text(req.text).await? {
        CommandOutcome::Accepted { event_id, command, .. } => (
            StatusCode::OK,
            Json(CommandResponse {
                accepted: true,
                event_id: Some(event_id),
                command: Some(command.to_string()),
                error: None,
                detail: None,
            }),
        ),
        CommandOutcome::Rejected { event_id, reason, detail } => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(CommandResponse {
                accepted: false,
                event_id: Some(event_id),
                command: None,
                error: Some(reason.as_str().to_string()),
                detail: Some(detail),
            }),
        ),
    };
    Ok(response.into_response())
}

#[derive(Debug, Deserialize)]
pub struct VirtualSmsRequest {
    pub sender: String,
    pub body: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VirtualSmsResponse {
    pub outcome: String,
    pub file: String,
}

async fn post_virtual_sms(
    State(svc): State<Service>,
    body: Result<Json<VirtualSmsRequest>, JsonRejection>,
) -> Result<Json<VirtualSmsResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let sender = Msisdn::parse(&req.sender).ok_or_else(|| {
        ApiError::new(StatusCode::BAD_REQUEST, "BadMsisdn").detail(format!("{:?} is not +<7..15 digits>", req.sender))
    })?;
    let file = svc.deliver_sms(sender, req.body).await?;
    Ok(Json(VirtualSmsResponse {
        outcome: "queued".into(),
        file,
    }))
}

#[derive(Debug, Deserialize)]
pub struct MessagesQuery {
    pub since_id: Option<u64>,
    pub limit: Option<usize>,
    pub kind: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessagesResponse {
    pub events: Vec<Event>,
}

async fn get_messages(
    State(svc): State<Service>,
    query: Result<Query<MessagesQuery>, QueryRejection>,
) -> Result<Json<MessagesResponse>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let limit = q.limit.unwrap_or(DEFAULT_MESSAGE_LIMIT);
    if limit == 0 {
        return Err(ApiError::bad_request("limit must be at least 1"));
    }
    let kind = q
        .kind
        .map(|k| k.parse::<EventKind>())
        .transpose()
        .map_err(ApiError::bad_request)?;
    let filter = EventFilter {
        since_id: q.since_id,
        kind,
        limit: limit.min(MAX_MESSAGE_LIMIT),
    };
    Ok(Json(MessagesResponse {
        events: svc.messages(filter).await?,
    }))
}

const PLACEHOLDER: &str = "<!doctype html>\n<title>homectl</title>\n<p>homectl is running. \
The control panel is not installed; start <code>homectld</code> with <code>--panel-dir</code>.</p>\n";

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER)
}

/// Builds the full router. `panel_dir`, when given, is served at `/`.
pub fn router(service: Service, panel_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/devices", get(get_devices))
        .route("/commands", post(post_commands))
        .route("/virtual-sms", post(post_virtual_sms))
        .route("/messages", get(get_messages))
        .route_layer(middleware::from_fn_with_state(service.clone(), require_token))
        .with_state(service);

    match panel_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(placeholder)),
    }
}
