// SPDX-License-Identifier: Apache-2.0

use bolted::api::{Request, Response, CALLER_HEADER};
use bolted::orchestrator::{Endpoints, Transport, TransportError};
use serde_json::Value;

/// Blocking JSON-over-HTTP transport. Do not use from inside an async
/// runtime.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoints: Endpoints,
}

impl HttpTransport {
    pub fn new(endpoints: Endpoints) -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
            endpoints,
        }
    }
}

impl Transport for HttpTransport {
    fn call(&mut self, request: &Request) -> Result<Response, TransportError> {
        let base = self.endpoints.base_for(&request.path).trim_end_matches('/');
        let url = format!("{base}{}", request.path);
        let method = reqwest::Method::from_bytes(request.method.as_bytes()).map_err(|e| TransportError(e.to_string()))?;
        let mut builder = self.client.request(method, &url);
        if let Some(caller) = &request.caller {
            builder = builder.header(CALLER_HEADER, caller);
        }
        if !request.body.is_null() {
            builder = builder.json(&request.body);
        }
        let response = builder.send().map_err(|e| TransportError(format!("{url}: {e}")))?;
        let status = response.status().as_u16();
        let body: Value = response.json().map_err(|e| TransportError(format!("{url}: {e}")))?;
        Ok(Response { status, body })
    }
}
