//! Model wire protocol server: exposes any gateway at the `/v1/...` paths a
//! remote provider calls.

use std::sync::Arc;

use axum::body::Bytes;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use iviq_core::gateway::wire::{dispatch, ErrorBody, CODE_BAD_REQUEST};
use iviq_core::gateway::{Endpoint, ModelGateway};
use serde_json::Value;

async fn serve(gateway: Arc<dyn ModelGateway>, endpoint: Endpoint, body: Bytes) -> (StatusCode, Json<Value>) {
    let request: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => {
            let err = ErrorBody::new(CODE_BAD_REQUEST, format!("request body is not JSON: {e}"));
            return (StatusCode::BAD_REQUEST, Json(serde_json::to_value(err).expect("error serializes")));
        }
    };
    let outcome = tokio::task::spawn_blocking(move || dispatch(gateway.as_ref(), endpoint, request)).await;
    match outcome {
        Ok((status, value)) => (
            StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            Json(value),
        ),
        Err(e) => {
            let err = ErrorBody::new("internal", e.to_string());
            (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(serde_json::to_value(err).expect("error serializes")),
            )
        }
    }
}

/// One POST route per endpoint.
pub fn router(gateway: Arc<dyn ModelGateway>) -> Router {
    Endpoint::ALL.into_iter().fold(Router::new(), |r, endpoint| {
        let gateway = gateway.clone();
        r.route(
            endpoint.path(),
            post(move |body: Bytes| serve(gateway, endpoint, body)),
        )
    })
}
