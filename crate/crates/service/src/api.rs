//! JSON-over-HTTP inference endpoints.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use facefill_core::checkpoint::Model;
use facefill_core::Error;
use serde::{Deserialize, Serialize};

use crate::{complete_encoded, parse_encoded, random_seed};

pub const MAX_BODY_BYTES: usize = 8 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompleteRequestWire {
    /// Base64 PNG, RGB.
    pub image: String,
    /// Base64 single-channel PNG, 255 = missing.
    pub mask: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_blend")]
    pub blend: bool,
}

fn default_blend() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteResponseWire {
    pub completed: String,
    pub seed_used: u64,
    pub mask_area: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseRequestWire {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseResponseWire {
    /// Base64 colour-coded label map PNG.
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthWire {
    pub status: String,
    pub model_tag: String,
    pub stage: Option<u8>,
    pub digest: String,
    pub parser: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorWire {
    pub error: String,
}

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

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Format(_) | Error::Shape(_) | Error::Argument(_) | Error::Domain(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorWire { error: self.message })).into_response()
    }
}

/// Read-only model snapshot shared by every request.
#[derive(Debug)]
pub struct AppState {
    pub model: Model,
}

fn decode_b64(field: &str, value: &str) -> Result<Vec<u8>, ApiError> {
    STANDARD
        .decode(value.trim())
        .map_err(|e| ApiError::bad_request(format!("{field}: invalid base64: {e}")))
}

fn decode_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn complete_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<CompleteResponseWire>, ApiError> {
    let req: CompleteRequestWire = decode_json(&body)?;
    let image = decode_b64("image", &req.image)?;
    let mask = decode_b64("mask", &req.mask)?;
    let seed = req.seed.unwrap_or_else(random_seed);
    let out = blocking(move || Ok(complete_encoded(&state.model, &image, &mask, seed, req.blend)?)).await?;
    Ok(Json(CompleteResponseWire {
        completed: STANDARD.encode(&out.png),
        seed_used: out.seed_used,
        mask_area: out.mask_area,
        warnings: out.warnings,
    }))
}

async fn parse_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<ParseResponseWire>, ApiError> {
    if state.model.parser.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no parser in the loaded checkpoint"));
    }
    let req: ParseRequestWire = decode_json(&body)?;
    let image = decode_b64("image", &req.image)?;
    let png = blocking(move || {
        let parser = state.model.parser.as_ref().expect("checked above");
        Ok(parse_encoded(parser, &image)?)
    })
    .await?;
    Ok(Json(ParseResponseWire {
        labels: STANDARD.encode(png),
    }))
}

async fn health_handler(State(state): State<Arc<AppState>>) -> Json<HealthWire> {
    let m = &state.model;
    Json(HealthWire {
        status: "ok".into(),
        model_tag: m.model_tag.clone(),
        stage: m.stage.map(|s| s.number()),
        digest: m.digest.clone(),
        parser: m.parser.is_some(),
    })
}

pub fn router(model: Model) -> Router {
    let state = Arc::new(AppState { model });
    Router::new()
        .route("/complete", post(complete_handler))
        .route("/parse", post(parse_handler))
        .route("/health", get(health_handler))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

pub async fn serve(model: Model, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(model))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
