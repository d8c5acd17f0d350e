// SPDX-License-Identifier: Apache-2.0

use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, Method, StatusCode, Uri};
use axum::{Json, Router};
use bolted::api::{Api, Request, CALLER_HEADER};
use serde_json::{json, Value};

type Shared = Arc<Mutex<Api>>;

/// Routes every request into the service API. Requests are handled one
/// at a time, in arrival order.
pub fn router(api: Api) -> Router {
    Router::new().fallback(handle).with_state(Arc::new(Mutex::new(api)))
}

async fn handle(State(api): State<Shared>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> (StatusCode, Json<Value>) {
    let caller = headers
        .get(CALLER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let body = if body.is_empty() {
        Value::Null
    } else {
        match serde_json::from_slice(&body) {
            Ok(v) => v,
            Err(e) => {
                return (
                    StatusCode::BAD_REQUEST,
                    Json(json!({ "code": "bad_request", "message": format!("body is not JSON: {e}") })),
                )
            }
        }
    };
    let request = Request {
        method: method.as_str().to_string(),
        path: uri.path_and_query().map_or("/", |p| p.as_str()).to_string(),
        caller,
        body,
    };
    let response = api.lock().expect("api lock poisoned").handle(&request);
    let status = StatusCode::from_u16(response.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(response.body))
}

pub async fn serve(listener: tokio::net::TcpListener, api: Api) -> std::io::Result<()> {
    axum::serve(listener, router(api)).await
}
