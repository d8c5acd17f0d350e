// SPDX-License-Identifier: Apache-2.0

//! Per-node boot state machine. One phase runs per scheduler step; the
//! environment supplies the node, the network and the remote services.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;
use serde_json::{json, Value};

use super::{BootError, BootStage, Phase, FIRMWARE_SCRATCH, INITRD_BASE};
use crate::attestation::{MeasurementEntry, MeasurementList, Payload, PeerNotice};
use crate::crypto::SymmetricKey;
use crate::fabric::{BootMode, BootPath, Delivery, Destination, EmulatedNode, FabricError, FirmwareKind, Frame};
use crate::fabric::TraceEvent;
use crate::ids::{NicId, NodeId};
use crate::provisioning::image::{self, BootManifest, FileTable};
use crate::provisioning::{ProvisioningError, SessionId};
use crate::tpm::{AikPublic, Credential, Digest, EkPublic, PCR_RUNTIME};

/// Outcome of fetching a stage from the boot server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fetch {
    Blob(Vec<u8>),
    /// The server answered but has no such blob.
    Missing,
    /// No route to the server; the firmware retries.
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnrollError {
    Unreachable,
    Refused(String),
}

/// What a booting node can see of the world.
pub trait BootEnv {
    fn now(&self) -> u64;
    fn node(&mut self, id: NodeId) -> &mut EmulatedNode;
    fn emit(&mut self, event: TraceEvent);
    fn random_bytes(&mut self, out: &mut [u8]);
    fn fetch_stage(&mut self, node: NodeId, stage: BootStage) -> Fetch;
    fn enroll(&mut self, node: NodeId, ek: EkPublic, aik: AikPublic) -> Result<Credential, EnrollError>;
    fn confirm(&mut self, node: NodeId, response: &[u8]) -> Result<(), EnrollError>;
    /// Drains every inbox of the node.
    fn receive(&mut self, node: NodeId) -> Vec<Frame>;
    fn send(&mut self, frame: Frame) -> Result<Delivery, FabricError>;
    fn node_of_nic(&self, nic: &NicId) -> Option<NodeId>;
    /// The node's boot session, provided the provisioning service is reachable.
    fn boot_session(&mut self, node: NodeId) -> Option<SessionId>;
    fn serve_block(&mut self, session: SessionId, index: u64) -> Result<Vec<u8>, ProvisioningError>;
    fn acknowledge_revocation(&mut self, revoked: NodeId, by: NodeId);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RuntimeState {
    Off,
    Post,
    /// The next step runs this phase.
    Phase { phase: Phase },
    AwaitingPayload,
    Running,
    Halted { reason: String },
}

#[derive(Clone, Default, PartialEq, Eq)]
pub struct TenantKeys {
    pub disk_key: Option<SymmetricKey>,
    pub network_key: Option<SymmetricKey>,
    pub peers: BTreeMap<NodeId, SymmetricKey>,
}

impl TenantKeys {
    fn from_payload(payload: &Payload) -> Self {
        Self {
            disk_key: payload.disk_key.clone(),
            network_key: payload.network_key.clone(),
            peers: payload.peers.clone(),
        }
    }

    /// Raw key bytes, in the order kexec writes them to the initrd.
    pub fn material(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for key in self.disk_key.iter().chain(&self.network_key).chain(self.peers.values()) {
            out.extend_from_slice(key.as_bytes());
        }
        out
    }
}

impl std::fmt::Debug for TenantKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TenantKeys")
            .field("disk_key", &self.disk_key.is_some())
            .field("network_key", &self.network_key.is_some())
            .field("peers", &self.peers.keys().collect::<Vec<_>>())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct TenantOs {
    pub cmdline: String,
    pub keys: TenantKeys,
    pub ima: MeasurementList,
    pub session: SessionId,
    manifest: Option<BootManifest>,
    table: Option<FileTable>,
    pub received: Vec<(Option<NodeId>, Vec<u8>)>,
}

#[derive(Debug, Clone)]
pub struct NodeRuntime {
    node: NodeId,
    epoch: u64,
    mode: BootMode,
    state: RuntimeState,
    kind: Option<FirmwareKind>,
    announced: Option<Phase>,
    payload: Option<Payload>,
    bootstrap_key: Option<SymmetricKey>,
    pending_credential: Option<Credential>,
    session: Option<SessionId>,
    agent_running: bool,
    control: VecDeque<PeerNotice>,
    tenant: Option<TenantOs>,
    forged_list: Option<MeasurementList>,
}

fn stage_event(env: &dyn BootEnv, node: NodeId, event: &str) -> TraceEvent {
    TraceEvent::new(env.now(), "bootchain", event).node(node)
}

impl NodeRuntime {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            epoch: 0,
            mode: BootMode::Attested,
            state: RuntimeState::Off,
            kind: None,
            announced: None,
            payload: None,
            bootstrap_key: None,
            pending_credential: None,
            session: None,
            agent_running: false,
            control: VecDeque::new(),
            tenant: None,
            forged_list: None,
        }
    }

    /// Starts a fresh boot. Everything volatile is lost; node memory is not
    /// touched here.
    pub fn power_on(&mut self, epoch: u64, mode: BootMode) {
        *self = Self {
            epoch,
            mode,
            state: RuntimeState::Post,
            ..Self::new(self.node)
        };
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn mode(&self) -> BootMode {
        self.mode
    }

    pub fn state(&self) -> &RuntimeState {
        &self.state
    }

    pub fn kind(&self) -> Option<FirmwareKind> {
        self.kind
    }

    pub fn tenant(&self) -> Option<&TenantOs> {
        self.tenant.as_ref()
    }

    pub fn agent_running(&self) -> bool {
        self.agent_running
    }

    pub fn in_firmware(&self) -> bool {
        matches!(
            self.state,
            RuntimeState::Post | RuntimeState::Phase { .. } | RuntimeState::AwaitingPayload
        )
    }

    /// Keys the firmware holds for the tenant before kexec. Tests use this
    /// to prove none survive the handoff.
    pub fn firmware_key_material(&self) -> Vec<u8> {
        let mut out = self
            .payload
            .as_ref()
            .map(|p| TenantKeys::from_payload(p).material())
            .unwrap_or_default();
        if let Some(k) = &self.bootstrap_key {
            out.extend_from_slice(k.as_bytes());
        }
        out
    }

    pub fn status(&self) -> Value {
        json!({
            "node": self.node,
            "epoch": self.epoch,
            "mode": self.mode,
            "kind": self.kind,
            "runtime": self.state,
            "agent_running": self.agent_running,
            "tenant": self.tenant.as_ref().map(|t| json!({
                "cmdline": t.cmdline,
                "session": t.session,
                "ima_entries": t.ima.len(),
                "peers": t.keys.peers.keys().collect::<Vec<_>>(),
                "encrypted_network": t.keys.network_key.is_some(),
                "frames_received": t.received.len(),
            })),
        })
    }

    /// Credential half of a payload delivery; the bundle itself arrives as
    /// a frame.
    pub fn deliver_credential(&mut self, credential: Credential) -> bool {
        if self.agent_running {
            self.pending_credential = Some(credential);
        }
        self.agent_running
    }

    pub fn notify(&mut self, notice: PeerNotice) -> bool {
        if self.agent_running {
            self.control.push_back(notice);
        }
        self.agent_running
    }

    /// The measurement list the agent reports. An adversary may substitute
    /// a forged one.
    pub fn reported_list(&self) -> Option<MeasurementList> {
        if !self.agent_running {
            return None;
        }
        if let Some(forged) = &self.forged_list {
            return Some(forged.clone());
        }
        Some(self.tenant.as_ref().map(|t| t.ima.clone()).unwrap_or_default())
    }

    pub fn forge_list(&mut self, list: MeasurementList) {
        self.forged_list = Some(list);
    }

    /// Advances one phase. Returns whether the node wants another step.
    pub fn step(&mut self, env: &mut dyn BootEnv) -> bool {
        match self.state.clone() {
            RuntimeState::Off | RuntimeState::Halted { .. } => false,
            RuntimeState::Post => self.post(env),
            RuntimeState::Phase { phase } => self.run_phase(phase, env),
            RuntimeState::AwaitingPayload => {
                self.await_payload(env);
                true
            }
            RuntimeState::Running => {
                self.service(env);
                true
            }
        }
    }

    fn halt(&mut self, env: &mut dyn BootEnv, reason: impl Into<String>) -> bool {
        let reason = reason.into();
        env.emit(stage_event(env, self.node, "boot_halt").detail(json!({ "reason": reason })));
        self.state = RuntimeState::Halted { reason };
        self.agent_running = false;
        self.payload = None;
        self.bootstrap_key = None;
        false
    }

    fn measure(&mut self, env: &mut dyn BootEnv, stage: BootStage, blob: &[u8]) {
        let digest = Digest::of(blob);
        env.node(self.node)
            .tpm
            .extend(stage.pcr(), &digest)
            .expect("stage registers are in range");
        env.emit(stage_event(env, self.node, "boot_stage").detail(json!({
            "stage": stage,
            "pcr_index": stage.pcr(),
            "digest": digest,
        })));
    }

    fn announce(&mut self, env: &mut dyn BootEnv, phase: Phase) {
        if self.announced != Some(phase) {
            self.announced = Some(phase);
            env.emit(stage_event(env, self.node, "boot_phase").detail(json!({
                "phase": phase.label(),
                "name": phase.name(),
            })));
        }
    }

    fn scrub(&mut self, env: &mut dyn BootEnv) {
        let node = env.node(self.node);
        node.zero_memory();
        let bytes = node.memory_size();
        env.emit(stage_event(env, self.node, "memory_scrub").detail(json!({ "bytes": bytes })));
    }

    fn goto(&mut self, phase: Phase) -> bool {
        self.state = RuntimeState::Phase { phase };
        true
    }

    fn after_runtime(&mut self) -> bool {
        match self.mode {
            BootMode::Attested => self.goto(Phase::IV),
            BootMode::Direct => self.goto(Phase::VI),
        }
    }

    fn post(&mut self, env: &mut dyn BootEnv) -> bool {
        let BootPath::Flash(flash) = env.node(self.node).boot_path().clone() else {
            return self.halt(env, "no firmware in flash");
        };
        self.kind = Some(flash.kind);
        if flash.post.is_empty() {
            return self.halt(env, "post: blob missing");
        }
        self.measure(env, BootStage::Post, &flash.post);
        match flash.kind {
            FirmwareKind::UefiChain => {
                if flash.pxe.is_empty() {
                    return self.halt(env, "pxe: blob missing");
                }
                self.measure(env, BootStage::Pxe, &flash.pxe);
                self.goto(Phase::I)
            }
            FirmwareKind::LinuxbootFlash => {
                // The runtime is already executing from flash.
                self.scrub(env);
                self.after_runtime()
            }
        }
    }

    fn download(&mut self, env: &mut dyn BootEnv, stage: BootStage) -> Option<Vec<u8>> {
        match env.fetch_stage(self.node, stage) {
            Fetch::Blob(blob) => Some(blob),
            Fetch::Missing => {
                self.halt(env, format!("{stage}: blob missing"));
                None
            }
            Fetch::Unreachable => None,
        }
    }

    fn run_phase(&mut self, phase: Phase, env: &mut dyn BootEnv) -> bool {
        self.announce(env, phase);
        match phase {
            Phase::I | Phase::II | Phase::IV => {
                let (stage, next) = match phase {
                    Phase::I => (BootStage::Ipxe, Phase::II),
                    Phase::II => (BootStage::LinuxbootRuntime, Phase::III),
                    _ => (BootStage::KeylimeAgent, Phase::V),
                };
                match self.download(env, stage) {
                    Some(blob) => {
                        self.measure(env, stage, &blob);
                        self.goto(next)
                    }
                    None => !matches!(self.state, RuntimeState::Halted { .. }),
                }
            }
            Phase::III => {
                self.scrub(env);
                self.after_runtime()
            }
            Phase::V => self.start_agent(env),
            Phase::VI => {
                if let Some(session) = env.boot_session(self.node) {
                    self.session = Some(session);
                    self.goto(Phase::VII);
                }
                true
            }
            Phase::VII => match self.kexec_handoff(env) {
                Ok(()) => true,
                Err(e) => self.halt(env, e.to_string()),
            },
        }
    }

    fn start_agent(&mut self, env: &mut dyn BootEnv) -> bool {
        let id = self.node;
        let ek = env.node(id).tpm.ek_public();
        let aik = match env.node(id).tpm.aik_public() {
            Some(aik) => aik,
            None => {
                let mut seed = [0u8; 32];
                env.random_bytes(&mut seed);
                env.node(id).tpm.create_aik(seed)
            }
        };
        let credential = match env.enroll(id, ek, aik) {
            Ok(c) => c,
            Err(EnrollError::Unreachable) => return true,
            Err(EnrollError::Refused(reason)) => return self.halt(env, format!("enrollment refused: {reason}")),
        };
        let response = match env.node(id).tpm.activate_credential(&credential) {
            Ok(r) => r,
            Err(e) => return self.halt(env, format!("credential activation failed: {e}")),
        };
        match env.confirm(id, &response) {
            Ok(()) => {}
            Err(EnrollError::Unreachable) => return true,
            Err(EnrollError::Refused(reason)) => return self.halt(env, format!("certification refused: {reason}")),
        }
        self.agent_running = true;
        env.emit(TraceEvent::new(env.now(), "bootchain", "agent_registered").node(id).detail(json!({ "aik": aik })));
        self.state = RuntimeState::AwaitingPayload;
        true
    }

    fn await_payload(&mut self, env: &mut dyn BootEnv) {
        if let Some(credential) = self.pending_credential.take() {
            match env.node(self.node).tpm.activate_credential(&credential) {
                Ok(bytes) if bytes.len() == 32 => {
                    self.bootstrap_key = Some(SymmetricKey::from_bytes(bytes.try_into().expect("length checked")));
                }
                _ => {
                    env.emit(stage_event(env, self.node, "payload_rejected").detail(json!({ "reason": "credential" })));
                }
            }
        }
        let Some(key) = self.bootstrap_key.clone() else {
            return;
        };
        let key_id = key.id();
        let frames = env.receive(self.node);
        let Some(payload) = frames
            .iter()
            .filter(|f| f.key.as_ref() == Some(&key_id))
            .find_map(|f| f.open(&key).ok().and_then(|b| Payload::open(&b)))
        else {
            return;
        };
        // The firmware keeps the keys in its scratch area until kexec.
        let material = TenantKeys::from_payload(&payload).material();
        let scratch = material.len().min(FIRMWARE_SCRATCH);
        let node = env.node(self.node);
        if node.memory_size() >= FIRMWARE_SCRATCH {
            let _ = node.write_memory(0, &material[..scratch]);
        }
        self.payload = Some(payload);
        self.bootstrap_key = None;
        env.emit(stage_event(env, self.node, "payload_received"));
        self.goto(Phase::VI);
    }

    /// Zeroes all node memory. Only the firmware may do this.
    pub fn scrub_memory(&mut self, node: &mut EmulatedNode) -> Result<(), BootError> {
        if !self.in_firmware() {
            return Err(BootError::Policy("memory scrub is only available to the firmware".into()));
        }
        node.zero_memory();
        Ok(())
    }

    /// Measures the tenant kernel, moves the keys into the initrd, wipes
    /// the firmware's own copy and starts the tenant OS.
    pub fn kexec_handoff(&mut self, env: &mut dyn BootEnv) -> Result<(), BootError> {
        if !self.in_firmware() {
            return Err(BootError::Policy("kexec is only available to the firmware".into()));
        }
        let (kernel, cmdline, keys) = match self.mode {
            BootMode::Attested => {
                let payload = self
                    .payload
                    .as_ref()
                    .ok_or_else(|| BootError::Policy("no PASS verdict for this boot".into()))?;
                (payload.kernel.clone(), payload.cmdline.clone(), TenantKeys::from_payload(payload))
            }
            BootMode::Direct => {
                let session = self.session.ok_or_else(|| BootError::Policy("no boot session".into()))?;
                let info = image::read_boot_info(&mut |i| env.serve_block(session, i))
                    .map_err(|e| BootError::Policy(format!("boot info: {e}")))?;
                (info.kernel, info.cmdline, TenantKeys::default())
            }
        };
        let session = self.session.ok_or_else(|| BootError::Policy("no boot session".into()))?;
        self.measure(env, BootStage::TenantKernel, &kernel);
        self.announce(env, Phase::VII);

        let node = env.node(self.node);
        let scratch = FIRMWARE_SCRATCH.min(node.memory_size());
        node.write_memory(0, &vec![0u8; scratch]).expect("scratch is in range");
        let material = keys.material();
        if !material.is_empty() && node.memory_size() >= INITRD_BASE + material.len() {
            node.write_memory(INITRD_BASE, &material).expect("initrd fits");
        }
        self.payload = None;
        self.bootstrap_key = None;
        self.state = RuntimeState::Running;

        let mut os = TenantOs {
            cmdline,
            keys,
            ima: MeasurementList::default(),
            session,
            manifest: None,
            table: None,
            received: Vec::new(),
        };
        let mut init = Vec::new();
        match image::parse_manifest(&env.serve_block(session, 0).unwrap_or_default()) {
            Ok(manifest) if manifest.rootfs.is_some() => {
                match image::read_file_table(&mut |i| env.serve_block(session, i), &manifest, os.keys.disk_key.as_ref()) {
                    Ok(table) => {
                        init = table.init.clone();
                        os.table = Some(table);
                    }
                    Err(e) => self.disk_error(env, &e),
                }
                os.manifest = Some(manifest);
            }
            Ok(manifest) => os.manifest = Some(manifest),
            Err(e) => self.disk_error(env, &e),
        }
        self.tenant = Some(os);
        env.emit(TraceEvent::new(env.now(), "node", "tenant_os_started").node(self.node).detail(json!({
            "mode": self.mode,
            "session": session,
        })));
        for path in init {
            self.exec(env, &path, None)?;
        }
        Ok(())
    }

    fn disk_error(&self, env: &mut dyn BootEnv, err: &ProvisioningError) {
        let event = match err {
            ProvisioningError::DiskAuthentication(_) => "disk_auth_failure",
            _ => "rootfs_unreadable",
        };
        env.emit(TraceEvent::new(env.now(), "node", event).node(self.node).detail(json!({ "error": err.to_string() })));
    }

    fn running_os(&mut self) -> Result<&mut TenantOs, BootError> {
        match (&self.state, self.tenant.as_mut()) {
            (RuntimeState::Running, Some(os)) => Ok(os),
            _ => Err(BootError::Policy(format!("{} is not running a tenant OS", self.node))),
        }
    }

    /// Runs a program in the tenant OS. Without `content` the file is read
    /// from the root filesystem. Every execution is measured first.
    pub fn exec(&mut self, env: &mut dyn BootEnv, path: &str, content: Option<Vec<u8>>) -> Result<Digest, BootError> {
        let node = self.node;
        let os = self.running_os()?;
        let content = match content {
            Some(c) => c,
            None => {
                let (Some(manifest), Some(table)) = (&os.manifest, &os.table) else {
                    return Err(BootError::NotFound(format!("{path}: no root filesystem")));
                };
                let session = os.session;
                let key = os.keys.disk_key.clone();
                image::read_file(&mut |i| env.serve_block(session, i), manifest, table, path, key.as_ref())
                    .map_err(|e| BootError::NotFound(format!("{path}: {e}")))?
            }
        };
        let entry = MeasurementEntry::of(path, &content);
        env.node(node).tpm.extend(PCR_RUNTIME, &entry.sha256).expect("runtime register");
        let digest = entry.sha256;
        os.ima.push(entry);
        env.emit(TraceEvent::new(env.now(), "node", "exec").node(node).detail(json!({ "path": path, "sha256": digest })));
        Ok(digest)
    }

    /// Sends a frame to another node's primary NIC, sealed under the pairwise
    /// key when the tenant has one.
    pub fn send(&mut self, env: &mut dyn BootEnv, to: NodeId, payload: &[u8]) -> Result<Delivery, BootError> {
        let node = self.node;
        let os = self.running_os()?;
        let src = NicId::node_nic(node, 0);
        let dst = Destination::Nic(NicId::node_nic(to, 0));
        let frame = match (os.keys.peers.get(&to), &os.keys.network_key) {
            (Some(key), _) => {
                let mut nonce = [0u8; 12];
                env.random_bytes(&mut nonce);
                Frame::sealed(src, dst, key, nonce, payload)
            }
            (None, Some(_)) => return Err(BootError::Policy(format!("no session key for {to}"))),
            (None, None) => Frame::plain(src, dst, payload.to_vec()),
        };
        let encrypted = frame.is_encrypted();
        let delivery = env
            .send(frame)
            .map_err(|e| BootError::Policy(e.to_string()))?;
        env.emit(TraceEvent::new(env.now(), "node", "frame_sent").node(node).detail(json!({
            "to": to,
            "encrypted": encrypted,
            "delivery": delivery,
        })));
        Ok(delivery)
    }

    fn service(&mut self, env: &mut dyn BootEnv) {
        let node = self.node;
        while let Some(notice) = self.control.pop_front() {
            let Some(os) = self.tenant.as_mut() else { break };
            match notice {
                PeerNotice::Revoked { node: revoked } => {
                    os.keys.peers.remove(&revoked);
                    env.emit(TraceEvent::new(env.now(), "node", "peer_keys_deleted").node(node).detail(json!({ "revoked": revoked })));
                    env.acknowledge_revocation(revoked, node);
                }
                PeerNotice::PeerAdded { node: peer, key } => {
                    let opened = os.keys.network_key.as_ref().and_then(|wrap| key.open(wrap));
                    if let Some(k) = opened {
                        os.keys.peers.insert(peer, k);
                    }
                    env.emit(TraceEvent::new(env.now(), "node", "peer_key_added").node(node).detail(json!({ "peer": peer })));
                }
            }
        }
        let frames = env.receive(node);
        let Some(os) = self.tenant.as_mut() else { return };
        for frame in frames {
            let sender = env.node_of_nic(&frame.src);
            let opened = match &frame.key {
                Some(_) => sender
                    .and_then(|s| os.keys.peers.get(&s))
                    .ok_or("no session key for sender")
                    .and_then(|k| frame.open(k).map_err(|_| "authentication failed")),
                None if os.keys.network_key.is_some() => Err("unencrypted frame"),
                None => Ok(frame.payload.clone()),
            };
            let event = TraceEvent::new(env.now(), "node", if opened.is_ok() { "frame_received" } else { "frame_rejected" }).node(node);
            match opened {
                Ok(bytes) => {
                    env.emit(event.detail(json!({ "from": sender, "encrypted": frame.is_encrypted(), "bytes": bytes.len() })));
                    os.received.push((sender, bytes));
                }
                Err(reason) => env.emit(event.detail(json!({ "from": sender, "reason": reason }))),
            }
        }
    }
}
