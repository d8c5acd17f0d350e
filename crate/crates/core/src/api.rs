// SPDX-License-Identifier: Apache-2.0

//! JSON request router over a [`Datacenter`]. The HTTP server and the
//! in-process transport both feed requests through [`Api::handle`], so the
//! two are interchangeable.
//!
//! Binary fields (image content, blocks, frame payloads) are base64.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attestation::{AgentId, AgentRegistration, Cause, MeasurementList};
use crate::bootchain::BootStage;
use crate::datacenter::{Datacenter, SimError, PROVIDER_INSTANCE};
use crate::fabric::{BootMode, FirmwareKind, Observer, TraceEvent};
use crate::ids::{NetworkId, NodeId, ProjectId};
use crate::isolation::{AllocationState, Caller, NetworkPurpose};
use crate::provisioning::{ImageId, SessionId};
use crate::tpm::{AikPublic, EkPublic};
use crate::crypto::SymmetricKey;

/// Header naming the calling project, or `provider`.
pub const CALLER_HEADER: &str = "x-bolted-caller";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub method: String,
    pub path: String,
    #[serde(default)]
    pub caller: Option<String>,
    #[serde(default)]
    pub body: Value,
}

impl Request {
    pub fn new(method: &str, path: impl Into<String>, caller: Option<&str>, body: Value) -> Self {
        Self {
            method: method.to_ascii_uppercase(),
            path: path.into(),
            caller: caller.map(str::to_string),
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub status: u16,
    pub body: Value,
}

impl Response {
    fn ok(body: Value) -> Self {
        Self { status: 200, body }
    }

    pub fn is_ok(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// The `code` of an error response.
    pub fn error_code(&self) -> Option<&str> {
        if self.is_ok() {
            return None;
        }
        self.body.get("code").and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ApiError {
    code: String,
    message: String,
}

impl ApiError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new("bad_request", message)
    }

    fn status(&self) -> u16 {
        match self.code.as_str() {
            "authorization" => 403,
            "not_found" => 404,
            "capacity" | "state" | "conflict" => 409,
            "policy" | "format" => 422,
            _ => 400,
        }
    }

    fn into_response(self) -> Response {
        Response {
            status: self.status(),
            body: json!({ "code": self.code, "message": self.message }),
        }
    }
}

impl From<SimError> for ApiError {
    fn from(e: SimError) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}

type ApiResult = Result<Value, ApiError>;

fn parse_caller(caller: Option<&str>) -> Result<Caller, ApiError> {
    match caller {
        Some("provider") => Ok(Caller::Provider),
        Some(name) if !name.is_empty() => Ok(Caller::tenant(name)),
        _ => Err(ApiError::new("authorization", format!("missing {CALLER_HEADER} header"))),
    }
}

fn tenant_of(caller: &Caller) -> Result<ProjectId, ApiError> {
    match caller {
        Caller::Tenant(p) => Ok(p.clone()),
        Caller::Provider => Err(ApiError::new("authorization", "operation needs a tenant project")),
    }
}

fn body<T: DeserializeOwned>(value: &Value) -> Result<T, ApiError> {
    let value = if value.is_null() { json!({}) } else { value.clone() };
    serde_json::from_value(value).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

fn segment<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, ApiError> {
    s.parse()
        .map_err(|_| ApiError::bad_request(format!("invalid {what} {s:?}")))
}

fn b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

fn unb64(s: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(s)
        .map_err(|e| ApiError::bad_request(format!("invalid base64: {e}")))
}

fn query_u64(query: &str, key: &str) -> Result<Option<u64>, ApiError> {
    query
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| segment(v, key))
        .transpose()
}

#[derive(Deserialize)]
struct NameBody {
    name: String,
}

#[derive(Deserialize)]
struct NetworkBody {
    purpose: NetworkPurpose,
    #[serde(default)]
    services: Vec<String>,
}

#[derive(Deserialize)]
struct NicBody {
    #[serde(default)]
    nic: usize,
    network: Option<NetworkId>,
}

#[derive(Deserialize)]
struct PowerBody {
    #[serde(default)]
    mode: BootMode,
}

#[derive(Deserialize)]
struct StateBody {
    state: AllocationState,
}

#[derive(Deserialize)]
struct ImageBody {
    name: String,
    content: String,
    size_blocks: Option<u64>,
}

#[derive(Deserialize)]
struct SessionBody {
    image: ImageId,
    node: NodeId,
}

#[derive(Deserialize)]
struct CloseBody {
    save_as: Option<String>,
}

#[derive(Deserialize)]
struct EnrollBody {
    node: NodeId,
    ek: EkPublic,
    aik: AikPublic,
}

#[derive(Deserialize)]
struct ConfirmBody {
    agent_id: AgentId,
    response: String,
}

#[derive(Deserialize)]
struct RevokeBody {
    cause: Option<Cause>,
}

#[derive(Deserialize)]
struct AdvanceBody {
    #[serde(default = "one")]
    ticks: u64,
}

fn one() -> u64 {
    1
}

#[derive(Deserialize)]
struct ExecBody {
    path: String,
    content: Option<String>,
}

#[derive(Deserialize)]
struct SendBody {
    to: NodeId,
    payload: String,
}

#[derive(Deserialize)]
struct TamperBody {
    stage: BootStage,
    #[serde(default)]
    bit: usize,
}

#[derive(Deserialize)]
struct MemoryBody {
    offset: usize,
    len: Option<usize>,
    data: Option<String>,
}

#[derive(Deserialize)]
struct EmitBody {
    component: String,
    event: String,
    node_id: Option<NodeId>,
    network_id: Option<NetworkId>,
    #[serde(default)]
    detail: Value,
}

#[derive(Deserialize)]
struct TapBody {
    #[serde(default)]
    keys: Vec<SymmetricKey>,
}

/// The service API of one datacenter.
pub struct Api {
    dc: Datacenter,
}

impl Api {
    pub fn new(dc: Datacenter) -> Self {
        Self { dc }
    }

    pub fn datacenter(&self) -> &Datacenter {
        &self.dc
    }

    pub fn datacenter_mut(&mut self) -> &mut Datacenter {
        &mut self.dc
    }

    pub fn into_datacenter(self) -> Datacenter {
        self.dc
    }

    pub fn handle(&mut self, request: &Request) -> Response {
        match self.route(request) {
            Ok(body) => Response::ok(body),
            Err(e) => e.into_response(),
        }
    }

    fn route(&mut self, req: &Request) -> ApiResult {
        let (path, query) = req.path.split_once('?').unwrap_or((&req.path, ""));
        let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
        let method = req.method.as_str();
        match (segs.first().copied().unwrap_or(""), method) {
            ("projects" | "nodes" | "networks", _) => self.isolation(method, &segs, req),
            ("images" | "sessions", _) => self.provisioning(method, &segs, req),
            ("registrar" | "verifier", _) => {
                let mut full = vec!["attestation", PROVIDER_INSTANCE];
                full.extend(&segs);
                self.attestation(method, &full, req)
            }
            ("attestation", _) => self.attestation(method, &segs, req),
            ("sim", _) => self.sim(method, &segs, query, req),
            ("bootchain", "GET") => self.bootchain(&segs),
            _ => Err(ApiError::new("not_found", format!("no route for {method} {path}"))),
        }
    }

    fn isolation(&mut self, method: &str, segs: &[&str], req: &Request) -> ApiResult {
        let dc = &mut self.dc;
        match (method, segs) {
            ("POST", ["projects"]) => {
                let caller = parse_caller(req.caller.as_deref())?;
                if caller != Caller::Provider {
                    return Err(ApiError::new("authorization", "only the provider registers projects"));
                }
                let b: NameBody = body(&req.body)?;
                dc.create_project(&ProjectId::new(b.name.clone()))?;
                Ok(json!({ "project": b.name }))
            }
            ("GET", ["nodes"]) => Ok(json!(dc
                .isolation
                .nodes()
                .iter()
                .map(|(id, r)| json!({ "node": id, "state": r.state, "owner": r.owner }))
                .collect::<Vec<_>>())),
            ("POST", ["nodes", id, "allocate"]) => {
                let caller = parse_caller(req.caller.as_deref())?;
                let wanted = if *id == "_" { None } else { Some(NodeId(segment(id, "node id")?)) };
                let (node, metadata) = dc.allocate(&caller, wanted)?;
                Ok(json!({ "node": node, "metadata": metadata }))
            }
            ("GET", ["nodes", id, "metadata"]) => {
                let node = NodeId(segment(id, "node id")?);
                Ok(json!(dc.isolation.metadata(node).map_err(SimError::from)?))
            }
            ("GET", ["nodes", id]) => {
                let node = NodeId(segment(id, "node id")?);
                Ok(json!(dc.isolation.node(node).map_err(SimError::from)?))
            }
            ("POST", ["nodes", id, action]) => {
                let caller = parse_caller(req.caller.as_deref())?;
                let node = NodeId(segment(id, "node id")?);
                match *action {
                    "connect" => {
                        let b: NicBody = body(&req.body)?;
                        let network = b.network.ok_or_else(|| ApiError::bad_request("missing network"))?;
                        dc.connect(&caller, node, b.nic, network)?;
                    }
                    "detach" => {
                        let b: NicBody = body(&req.body)?;
                        dc.detach(&caller, node, b.nic)?;
                    }
                    "power_cycle" => {
                        let b: PowerBody = body(&req.body)?;
                        let outcome = dc.power_cycle(&caller, node, b.mode)?;
                        return Ok(json!({ "power_cycle": outcome }));
                    }
                    "state" => {
                        let b: StateBody = body(&req.body)?;
                        dc.set_state(&caller, node, b.state)?;
                    }
                    "remediate" => dc.remediate(&caller, node)?,
                    other => return Err(ApiError::new("not_found", format!("no node action {other}"))),
                }
                Ok(json!({ "node": node }))
            }
            ("POST", ["networks"]) => {
                let caller = parse_caller(req.caller.as_deref())?;
                let b: NetworkBody = body(&req.body)?;
                let id = dc.create_network(&caller, b.purpose, b.services)?;
                let vlan = dc.isolation.network(id).map_err(SimError::from)?.vlan;
                Ok(json!({ "network": id, "vlan": vlan }))
            }
            ("GET", ["networks", id]) => {
                let id = NetworkId(segment(id, "network id")?);
                Ok(json!(dc.isolation.network(id).map_err(SimError::from)?))
            }
            ("DELETE", ["networks", id]) => {
                let caller = parse_caller(req.caller.as_deref())?;
                let id = NetworkId(segment(id, "network id")?);
                dc.delete_network(&caller, id)?;
                Ok(json!({ "network": id }))
            }
            _ => Err(ApiError::new("not_found", format!("no route for {method} /{}", segs.join("/")))),
        }
    }

    fn provisioning(&mut self, method: &str, segs: &[&str], req: &Request) -> ApiResult {
        let owner = tenant_of(&parse_caller(req.caller.as_deref())?)?;
        let dc = &mut self.dc;
        match (method, segs) {
            ("POST", ["images"]) => {
                let b: ImageBody = body(&req.body)?;
                let content = unb64(&b.content)?;
                let id = dc.create_image(&owner, &b.name, &content, b.size_blocks)?;
                Ok(json!({ "image": id }))
            }
            ("GET", ["images"]) => Ok(json!(dc.provisioning.list(&owner))),
            ("GET", ["images", id]) => {
                let id = ImageId(segment(id, "image id")?);
                Ok(json!(dc.provisioning.info(&owner, id).map_err(SimError::from)?))
            }
            ("GET", ["images", id, "boot_info"]) => {
                let id = ImageId(segment(id, "image id")?);
                Ok(json!(dc.provisioning.boot_info(&owner, id).map_err(SimError::from)?))
            }
            ("POST", ["images", id, op @ ("clone" | "snapshot")]) => {
                let id = ImageId(segment(id, "image id")?);
                let b: NameBody = body(&req.body)?;
                let new = if *op == "clone" {
                    dc.provisioning.clone_image(&owner, id, &b.name)
                } else {
                    dc.provisioning.snapshot(&owner, id, &b.name)
                }
                .map_err(SimError::from)?;
                Ok(json!({ "image": new }))
            }
            ("DELETE", ["images", id]) => {
                let id = ImageId(segment(id, "image id")?);
                dc.provisioning.delete(&owner, id).map_err(SimError::from)?;
                Ok(json!({ "image": id }))
            }
            ("POST", ["sessions"]) => {
                let b: SessionBody = body(&req.body)?;
                let id = dc.open_session(&owner, b.image, b.node)?;
                Ok(json!({ "session": id }))
            }
            ("POST", ["sessions", id, "close"]) => {
                let id = SessionId(segment(id, "session id")?);
                let b: CloseBody = body(&req.body)?;
                let saved = dc.close_session(&owner, id, b.save_as.as_deref())?;
                Ok(json!({ "session": id, "saved_as": saved }))
            }
            ("GET", ["sessions", id, "blocks", index]) => {
                let id = SessionId(segment(id, "session id")?);
                let index: u64 = segment(index, "block index")?;
                if dc.provisioning.session(id).map_err(SimError::from)?.project != owner {
                    return Err(ApiError::new("authorization", format!("{id} belongs to another project")));
                }
                let block = dc.provisioning.serve_block(id, index).map_err(SimError::from)?;
                Ok(json!({ "block": b64(&block) }))
            }
            _ => Err(ApiError::new("not_found", format!("no route for {method} /{}", segs.join("/")))),
        }
    }

    fn attestation(&mut self, method: &str, segs: &[&str], req: &Request) -> ApiResult {
        let dc = &mut self.dc;
        match (method, segs) {
            ("POST", ["attestation", "instances"]) => {
                let owner = match parse_caller(req.caller.as_deref())? {
                    Caller::Provider => None,
                    Caller::Tenant(p) => Some(p),
                };
                let b: NameBody = body(&req.body)?;
                dc.create_attestation_instance(&b.name, owner)?;
                Ok(json!({ "instance": b.name }))
            }
            ("POST", ["attestation", inst, "registrar", "enroll"]) => {
                let b: EnrollBody = body(&req.body)?;
                let credential = dc.registrar_enroll(inst, b.node, b.ek, b.aik)?;
                Ok(json!({ "agent_id": AgentId::for_node(b.node), "credential": credential }))
            }
            ("POST", ["attestation", inst, "registrar", "confirm"]) => {
                let b: ConfirmBody = body(&req.body)?;
                let response = hex::decode(&b.response).map_err(|e| ApiError::bad_request(e.to_string()))?;
                dc.registrar_confirm(inst, &b.agent_id, &response)?;
                Ok(json!({ "agent_id": b.agent_id }))
            }
            ("POST", ["attestation", inst, "verifier", "agents"]) => {
                let caller = parse_caller(req.caller.as_deref())?;
                let reg: AgentRegistration = body(&req.body)?;
                dc.check_agent_access(&caller, inst, reg.node)?;
                if let Caller::Tenant(_) = caller {
                    dc.isolation.require_node_access(&caller, reg.node).map_err(SimError::from)?;
                }
                let agent = reg.agent_id.clone();
                let first = dc.register_agent(inst, reg)?;
                Ok(json!({ "agent_id": agent, "first_poll": first }))
            }
            ("GET", ["attestation", inst, "verifier", "agents", id, "status"]) => {
                let caller = parse_caller(req.caller.as_deref())?;
                let status = dc.agent_status(inst, &AgentId(id.to_string()))?;
                dc.check_agent_access(&caller, inst, status.node)?;
                Ok(json!(status))
            }
            ("POST", ["attestation", inst, "verifier", "agents", id, "revoke"]) => {
                let caller = parse_caller(req.caller.as_deref())?;
                let b: RevokeBody = body(&req.body)?;
                let agent = AgentId(id.to_string());
                dc.check_agent_access(&caller, inst, dc.agent_status(inst, &agent)?.node)?;
                dc.revoke_agent(inst, &agent, b.cause.unwrap_or(Cause::Manual))?;
                Ok(json!(dc.agent_status(inst, &agent)?))
            }
            ("DELETE", ["attestation", inst, "verifier", "agents", id]) => {
                let caller = parse_caller(req.caller.as_deref())?;
                let agent = AgentId(id.to_string());
                dc.check_agent_access(&caller, inst, dc.agent_status(inst, &agent)?.node)?;
                dc.retire_agent(inst, &agent)?;
                Ok(json!({ "agent_id": agent }))
            }
            _ => Err(ApiError::new("not_found", format!("no route for {method} /{}", segs.join("/")))),
        }
    }

    /// Published firmware: reference register values per profile and the
    /// blobs themselves, so a tenant can rebuild the whitelist.
    fn bootchain(&self, segs: &[&str]) -> ApiResult {
        match segs {
            ["bootchain", "whitelist", kind] => {
                let kind: FirmwareKind = body(&json!(kind))?;
                Ok(json!(self.dc.provider_whitelist(kind)))
            }
            ["bootchain", "blobs", stage] => {
                let stage: BootStage = body(&json!(stage))?;
                Ok(json!({ "stage": stage, "blob": b64(self.dc.corpus().blob(stage)) }))
            }
            _ => Err(ApiError::new("not_found", format!("no route for GET /{}", segs.join("/")))),
        }
    }

    fn sim(&mut self, method: &str, segs: &[&str], query: &str, req: &Request) -> ApiResult {
        let dc = &mut self.dc;
        match (method, segs) {
            ("GET", ["sim", "now"]) => Ok(json!({ "tick": dc.now() })),
            ("POST", ["sim", "advance"]) => {
                let b: AdvanceBody = body(&req.body)?;
                let events = dc.advance(b.ticks);
                Ok(json!({ "tick": dc.now(), "events": events }))
            }
            ("GET", ["sim", "trace"]) => {
                let since = query_u64(query, "since")?.unwrap_or(0) as usize;
                let events = dc.trace().events();
                let start = since.min(events.len());
                Ok(json!({ "next": events.len(), "events": &events[start..] }))
            }
            ("POST", ["sim", "emit"]) => {
                let b: EmitBody = body(&req.body)?;
                let mut event = TraceEvent::new(dc.now(), &b.component, &b.event).detail(b.detail);
                if let Some(node) = b.node_id {
                    event = event.node(node);
                }
                if let Some(network) = b.network_id {
                    event = event.network(network);
                }
                dc.emit(event);
                Ok(json!({ "tick": dc.now() }))
            }
            ("POST", ["sim", "tap"]) => {
                let b: TapBody = body(&req.body)?;
                let observer = if b.keys.is_empty() {
                    Observer::Provider
                } else {
                    Observer::KeyHolder(b.keys)
                };
                let frames: Vec<Value> = dc
                    .tap(&observer)
                    .into_iter()
                    .map(|o| {
                        json!({
                            "seq": o.seq,
                            "encrypted": o.encrypted,
                            "wire": b64(&o.wire),
                            "plaintext": o.plaintext.as_deref().map(b64),
                        })
                    })
                    .collect();
                Ok(json!({ "frames": frames }))
            }
            ("GET", ["sim", "nodes", id, what]) => {
                let node = NodeId(segment(id, "node id")?);
                match *what {
                    "status" => Ok(dc.node_status(node)?),
                    "console" => Ok(json!(dc.console(node))),
                    other => Err(ApiError::new("not_found", format!("no node view {other}"))),
                }
            }
            ("POST", ["sim", "nodes", id, action]) => {
                let node = NodeId(segment(id, "node id")?);
                match *action {
                    "exec" => {
                        let b: ExecBody = body(&req.body)?;
                        let content = b.content.as_deref().map(unb64).transpose()?;
                        dc.exec(node, &b.path, content)?;
                        Ok(json!({ "node": node }))
                    }
                    "send" => {
                        let b: SendBody = body(&req.body)?;
                        let delivery = dc.send(node, b.to, &unb64(&b.payload)?)?;
                        Ok(json!({ "delivery": delivery }))
                    }
                    "tamper" => {
                        let b: TamperBody = body(&req.body)?;
                        dc.tamper(node, b.stage, b.bit)?;
                        Ok(json!({ "node": node }))
                    }
                    "forge_list" => {
                        let list: MeasurementList = body(&req.body)?;
                        dc.forge_list(node, list)?;
                        Ok(json!({ "node": node }))
                    }
                    "memory_write" => {
                        let b: MemoryBody = body(&req.body)?;
                        let data = unb64(b.data.as_deref().unwrap_or(""))?;
                        dc.tenant_write(node, b.offset, &data)?;
                        Ok(json!({ "node": node }))
                    }
                    "memory_read" => {
                        let b: MemoryBody = body(&req.body)?;
                        let data = dc.tenant_read(node, b.offset, b.len.unwrap_or(0))?;
                        Ok(json!({ "data": b64(&data) }))
                    }
                    other => Err(ApiError::new("not_found", format!("no sim action {other}"))),
                }
            }
            _ => Err(ApiError::new("not_found", format!("no route for {method} /{}", segs.join("/")))),
        }
    }
}
