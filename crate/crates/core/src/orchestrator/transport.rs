// SPDX-License-Identifier: Apache-2.0

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::api::{Api, Request, Response};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("transport: {0}")]
pub struct TransportError(pub String);

/// Carries service requests. The in-process [`Api`] is one; the CLI adds
/// an HTTP client.
pub trait Transport {
    fn call(&mut self, request: &Request) -> Result<Response, TransportError>;
}

impl Transport for Api {
    fn call(&mut self, request: &Request) -> Result<Response, TransportError> {
        Ok(self.handle(request))
    }
}

/// Base URLs of the services. Provider-run and tenant-run attestation
/// instances are both reached through `attestation`, by instance name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Endpoints {
    pub isolation: String,
    pub provisioning: String,
    pub attestation: String,
    pub sim: String,
}

impl Default for Endpoints {
    fn default() -> Self {
        let local = "http://127.0.0.1:7878".to_string();
        Self {
            isolation: local.clone(),
            provisioning: local.clone(),
            attestation: local.clone(),
            sim: local,
        }
    }
}

impl Endpoints {
    /// Base URL serving `path`.
    pub fn base_for(&self, path: &str) -> &str {
        match path.trim_start_matches('/').split('/').next().unwrap_or("") {
            "projects" | "nodes" | "networks" => &self.isolation,
            "images" | "sessions" => &self.provisioning,
            "attestation" | "registrar" | "verifier" => &self.attestation,
            _ => &self.sim,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CallError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{code}: {message}")]
    Service { status: u16, code: String, message: String },
    #[error("unexpected response body: {0}")]
    Decode(String),
}

impl CallError {
    pub fn code(&self) -> &str {
        match self {
            CallError::Service { code, .. } => code,
            CallError::Transport(_) => "transport",
            CallError::Decode(_) => "decode",
        }
    }
}

/// A transport bound to one caller identity.
pub struct Client<'a> {
    transport: &'a mut dyn Transport,
    caller: Option<String>,
}

impl<'a> Client<'a> {
    pub fn new(transport: &'a mut dyn Transport, caller: Option<&str>) -> Self {
        Self {
            transport,
            caller: caller.map(str::to_string),
        }
    }

    pub fn call(&mut self, method: &str, path: &str, body: Value) -> Result<Value, CallError> {
        let request = Request::new(method, path, self.caller.as_deref(), body);
        let response = self.transport.call(&request)?;
        if response.is_ok() {
            return Ok(response.body);
        }
        Err(CallError::Service {
            status: response.status,
            code: response.error_code().unwrap_or("unknown").to_string(),
            message: response.body["message"].as_str().unwrap_or_default().to_string(),
        })
    }

    pub fn call_as<T: DeserializeOwned>(&mut self, method: &str, path: &str, body: Value) -> Result<T, CallError> {
        let value = self.call(method, path, body)?;
        serde_json::from_value(value).map_err(|e| CallError::Decode(e.to_string()))
    }

    pub fn get(&mut self, path: &str) -> Result<Value, CallError> {
        self.call("GET", path, Value::Null)
    }

    pub fn post(&mut self, path: &str, body: Value) -> Result<Value, CallError> {
        self.call("POST", path, body)
    }

    pub fn delete(&mut self, path: &str) -> Result<Value, CallError> {
        self.call("DELETE", path, Value::Null)
    }
}
