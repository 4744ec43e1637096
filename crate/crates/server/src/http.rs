//! HTTP surface: `POST /infer`, `GET /health`, `GET /meta`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use pgan_core::conditioning::{LANDMARK_GROUPS, N_LANDMARKS};
use pgan_core::data::{face_landmarks, sample_identity};

use crate::service::{Model, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::Malformed(_) => StatusCode::BAD_REQUEST,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        } else {
            log::debug!("rejected request: {self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

pub fn router(model: Arc<Model>) -> Router {
    Router::new()
        .route("/infer", post(infer))
        .route("/health", get(health))
        .route("/meta", get(meta))
        .fallback(|| async { (StatusCode::NOT_FOUND, Json(json!({ "error": "no such endpoint" }))) })
        .with_state(model)
}

async fn infer(State(model): State<Arc<Model>>, body: Bytes) -> Response {
    // each request builds its own graph; the parameters are only read
    let result = tokio::task::spawn_blocking(move || model.infer_json(&body)).await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ServiceError::Internal(format!("inference task failed: {e}")).into_response(),
    }
}

async fn health(State(model): State<Arc<Model>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "checkpoint_id": model.checkpoint_id(),
        "model_resolution": model.resolution(),
        "n_modalities": model.n_modalities(),
    }))
}

async fn meta(State(model): State<Arc<Model>>) -> Json<serde_json::Value> {
    let template = face_landmarks(&sample_identity(0));
    Json(json!({
        "n_landmarks": N_LANDMARKS,
        "coordinates": "normalised [x, y] in [0,1], origin top-left, y down",
        "groups": LANDMARK_GROUPS,
        "template": template.points(),
        "model_resolution": model.resolution(),
        "n_modalities": model.n_modalities(),
        "image_format": "base64 PNG, RGB",
    }))
}

/// Bind `addr` and serve until interrupted.
pub async fn serve(model: Arc<Model>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {addr}: {e}"))?;
    log::info!("serving checkpoint {} on http://{}", model.checkpoint_id(), listener.local_addr()?);
    axum::serve(listener, router(model))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
