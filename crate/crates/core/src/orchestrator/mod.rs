// SPDX-License-Identifier: Apache-2.0

//! Tenant-side orchestration. Every action goes through the service APIs
//! via a [`Transport`]; the only state kept here is the enclave registry.
//! Waiting is done by advancing the simulation one tick at a time.

pub mod scenario;
pub mod transport;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::attestation::verifier::StatusView;
use crate::attestation::{
    AgentId, AgentRegistration, BootWhitelist, Cause, Payload, Provenance, RuntimeWhitelist, SealedKey, Status,
};
use crate::bootchain::{BlobCorpus, BootStage, Phase, RuntimeState};
use crate::crypto::{kdf, SymmetricKey};
use crate::datacenter::{attestation_service, PROVIDER_INSTANCE, SVC_BOOT, SVC_PROVISIONING};
use crate::fabric::{BootMode, FirmwareKind};
use crate::ids::{NetworkId, NodeId};
use crate::isolation::{AllocationState, NetworkPurpose, NodeMetadata};
use crate::provisioning::image::{BootInfo, ImageBuilder, PackedImage};
use crate::provisioning::{ImageId, ProvisioningError, SessionId, MAX_IMAGE_BLOCKS};
use crate::tpm::PCR_PLATFORM;

pub use transport::{CallError, Client, Endpoints, Transport, TransportError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityTier {
    /// No attestation and no encryption.
    Basic,
    /// Provider-run attestation of the boot state.
    #[default]
    Attested,
    /// Tenant-run attestation with continuous runtime checks, plus disk
    /// and network encryption.
    Full,
}

impl SecurityTier {
    pub const ALL: [SecurityTier; 3] = [Self::Basic, Self::Attested, Self::Full];

    pub fn attests(self) -> bool {
        self != SecurityTier::Basic
    }

    pub fn encrypts(self) -> bool {
        self == SecurityTier::Full
    }

    pub fn name(self) -> &'static str {
        match self {
            SecurityTier::Basic => "basic",
            SecurityTier::Attested => "attested",
            SecurityTier::Full => "full",
        }
    }
}

impl fmt::Display for SecurityTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SecurityTier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown tier {s:?}; expected basic, attested or full"))
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Call(#[from] CallError),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("timed out after {ticks} ticks waiting for {what}")]
    Timeout { what: String, ticks: u64 },
    #[error("registry {path}: {message}")]
    Registry { path: String, message: String },
    #[error(transparent)]
    Image(#[from] ProvisioningError),
}

impl OrchestratorError {
    pub fn code(&self) -> &str {
        match self {
            OrchestratorError::Call(e) => e.code(),
            OrchestratorError::NotFound(_) => "not_found",
            OrchestratorError::Conflict(_) => "conflict",
            OrchestratorError::Timeout { .. } => "timeout",
            OrchestratorError::Registry { .. } => "registry",
            OrchestratorError::Image(e) => e.code(),
        }
    }
}

pub type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSpec {
    pub path: String,
    pub content: String,
    /// Run at startup.
    #[serde(default)]
    pub init: bool,
}

/// The tenant OS image an enclave boots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageSpec {
    pub name: String,
    pub kernel: String,
    pub initrd: String,
    pub cmdline: String,
    pub files: Vec<FileSpec>,
    pub size_blocks: u64,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            name: "tenant-os".into(),
            kernel: "vmlinuz tenant kernel".into(),
            initrd: "initrd tenant".into(),
            cmdline: "root=/dev/nbd0 ro".into(),
            files: vec![
                FileSpec {
                    path: "/sbin/init".into(),
                    content: "init v1".into(),
                    init: true,
                },
                FileSpec {
                    path: "/usr/bin/worker".into(),
                    content: "worker v1".into(),
                    init: false,
                },
            ],
            size_blocks: MAX_IMAGE_BLOCKS,
        }
    }
}

impl ImageSpec {
    fn builder(&self) -> ImageBuilder {
        let mut b = ImageBuilder::new(
            self.kernel.as_bytes().to_vec(),
            self.initrd.as_bytes().to_vec(),
            self.cmdline.clone(),
        )
        .size_blocks(self.size_blocks);
        for f in &self.files {
            let content = f.content.as_bytes().to_vec();
            b = if f.init {
                b.init_file(f.path.clone(), content)
            } else {
                b.file(f.path.clone(), content)
            };
        }
        b
    }

    pub fn build(&self, disk_key: Option<SymmetricKey>) -> Result<PackedImage> {
        let b = self.builder();
        Ok(match disk_key {
            Some(key) => b.encrypted(key).build()?,
            None => b.build()?,
        })
    }

    /// Every file of the image is allowed to run.
    pub fn runtime_whitelist(&self) -> RuntimeWhitelist {
        self.builder().file_digests().into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub session: SessionId,
    pub agent: Option<AgentId>,
    #[serde(default)]
    pub revoked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enclave {
    pub id: String,
    pub tenant: String,
    pub tier: SecurityTier,
    pub network: NetworkId,
    /// Attestation instance the members enroll with.
    pub instance: Option<String>,
    pub image: ImageId,
    pub runtime_whitelist: Option<RuntimeWhitelist>,
    /// Airlock kept across node additions when running with one airlock.
    #[serde(default)]
    pub airlock: Option<NetworkId>,
    #[serde(default)]
    pub members: BTreeMap<NodeId, Member>,
    #[serde(default)]
    pub rejected: BTreeSet<NodeId>,
    /// Counter for peer-key sealing nonces.
    #[serde(default)]
    pub sealed: u64,
}

impl Enclave {
    pub fn active_members(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.members.iter().filter(|(_, m)| !m.revoked).map(|(n, _)| *n)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub enclaves: BTreeMap<String, Enclave>,
}

impl Registry {
    /// Reads a registry file; a missing file is an empty registry.
    pub fn load(path: &Path) -> Result<Self> {
        let err = |message: String| OrchestratorError::Registry {
            path: path.display().to_string(),
            message,
        };
        match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| err(e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(err(e.to_string())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("registry serializes");
        std::fs::write(path, text).map_err(|e| OrchestratorError::Registry {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub tenant: String,
    pub tier: SecurityTier,
    pub poll_interval: u64,
    /// Keep one airlock network per enclave instead of one per node.
    pub single_airlock: bool,
    /// Enclave secrets derive from this and the enclave name.
    pub secret_seed: u64,
    /// Longest wait, in ticks, for any single life-cycle step.
    pub max_wait: u64,
    /// Also power-cycle a revoked node into firmware, which scrubs memory.
    pub reboot_on_revoke: bool,
    pub endpoints: Endpoints,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            tenant: "tenant".into(),
            tier: SecurityTier::default(),
            poll_interval: 1,
            single_airlock: false,
            secret_seed: 0,
            max_wait: 256,
            reboot_on_revoke: false,
            endpoints: Endpoints::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum NodeAddOutcome {
    Member { node: NodeId },
    Rejected { node: NodeId, cause: Option<Cause> },
}

impl NodeAddOutcome {
    pub fn node(&self) -> NodeId {
        match self {
            NodeAddOutcome::Member { node } | NodeAddOutcome::Rejected { node, .. } => *node,
        }
    }

    pub fn is_member(&self) -> bool {
        matches!(self, NodeAddOutcome::Member { .. })
    }
}

fn decode<T: serde::de::DeserializeOwned>(value: Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| CallError::Decode(e.to_string()).into())
}

fn runtime_state(status: &Value) -> Option<RuntimeState> {
    let state = &status["runtime"];
    Some(match state["state"].as_str()? {
        "off" => RuntimeState::Off,
        "post" => RuntimeState::Post,
        "phase" => RuntimeState::Phase {
            phase: serde_json::from_value(state["phase"].clone()).ok()?,
        },
        "awaiting_payload" => RuntimeState::AwaitingPayload,
        "running" => RuntimeState::Running,
        "halted" => RuntimeState::Halted {
            reason: state["reason"].as_str().unwrap_or_default().to_string(),
        },
        _ => return None,
    })
}

pub struct Orchestrator {
    config: OrchestratorConfig,
    registry: Registry,
    registry_path: Option<PathBuf>,
}

impl Orchestrator {
    pub fn new(config: OrchestratorConfig) -> Self {
        Self {
            config,
            registry: Registry::default(),
            registry_path: None,
        }
    }

    /// An orchestrator whose registry lives in `path`, loading it if present.
    pub fn with_registry(config: OrchestratorConfig, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        Ok(Self {
            config,
            registry: Registry::load(&path)?,
            registry_path: Some(path),
        })
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn enclave(&self, id: &str) -> Result<&Enclave> {
        self.registry
            .enclaves
            .get(id)
            .ok_or_else(|| OrchestratorError::NotFound(format!("enclave {id}")))
    }

    fn save(&self) -> Result<()> {
        match &self.registry_path {
            Some(path) => self.registry.save(path),
            None => Ok(()),
        }
    }

    fn client<'a>(&self, transport: &'a mut dyn Transport) -> Client<'a> {
        Client::new(transport, Some(&self.config.tenant))
    }

    fn secret(&self, enclave: &str) -> [u8; 32] {
        kdf(
            b"bolted/enclave-secret",
            &[
                &self.config.secret_seed.to_le_bytes(),
                self.config.tenant.as_bytes(),
                enclave.as_bytes(),
            ],
        )
    }

    fn derive(&self, enclave: &str, label: &str) -> SymmetricKey {
        SymmetricKey::from_bytes(kdf(b"bolted/enclave-key", &[&self.secret(enclave), label.as_bytes()]))
    }

    pub fn disk_key(&self, enclave: &str) -> SymmetricKey {
        self.derive(enclave, "disk")
    }

    /// Per-node key that wraps pairwise keys sent to that node.
    pub fn network_key(&self, enclave: &str, node: NodeId) -> SymmetricKey {
        self.derive(enclave, &format!("net/{}", node.0))
    }

    pub fn pair_key(&self, enclave: &str, a: NodeId, b: NodeId) -> SymmetricKey {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        self.derive(enclave, &format!("pair/{}/{}", lo.0, hi.0))
    }

    /// Every pairwise key among the enclave's current members.
    pub fn session_keys(&self, enclave: &str) -> Result<Vec<SymmetricKey>> {
        let members: Vec<NodeId> = self.enclave(enclave)?.members.keys().copied().collect();
        let mut keys = Vec::new();
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                keys.push(self.pair_key(enclave, *a, *b));
            }
        }
        Ok(keys)
    }

    fn seal_nonce(&self, enclave: &str, counter: u64) -> [u8; 12] {
        let full = kdf(b"bolted/seal-nonce", &[&self.secret(enclave), &counter.to_le_bytes()]);
        full[..12].try_into().expect("12 bytes")
    }

    fn emit(c: &mut Client, event: &str, node: Option<NodeId>, detail: Value) -> Result<()> {
        c.post(
            "/sim/emit",
            json!({ "component": "orchestrator", "event": event, "node_id": node, "detail": detail }),
        )?;
        Ok(())
    }

    fn lifecycle(c: &mut Client, enclave: &Enclave, node: NodeId, step: u8) -> Result<()> {
        Self::emit(
            c,
            "lifecycle_step",
            Some(node),
            json!({ "step": step, "enclave": enclave.id, "tier": enclave.tier }),
        )
    }

    /// Advances the simulation until `done` holds.
    fn wait_until(&self, c: &mut Client, what: &str, mut done: impl FnMut(&mut Client) -> Result<bool>) -> Result<()> {
        for _ in 0..=self.config.max_wait {
            if done(c)? {
                return Ok(());
            }
            c.post("/sim/advance", json!({ "ticks": 1 }))?;
        }
        Err(OrchestratorError::Timeout {
            what: what.to_string(),
            ticks: self.config.max_wait,
        })
    }

    fn node_runtime(c: &mut Client, node: NodeId) -> Result<Option<RuntimeState>> {
        let status = c.get(&format!("/sim/nodes/{}/status", node.0))?;
        Ok(runtime_state(&status))
    }

    pub fn enclave_create(
        &mut self,
        transport: &mut dyn Transport,
        id: &str,
        tier: Option<SecurityTier>,
        image: &ImageSpec,
    ) -> Result<&Enclave> {
        if self.registry.enclaves.contains_key(id) {
            return Err(OrchestratorError::Conflict(format!("enclave {id} exists")));
        }
        let tier = tier.unwrap_or(self.config.tier);
        let instance = match tier {
            SecurityTier::Basic => None,
            SecurityTier::Attested => Some(PROVIDER_INSTANCE.to_string()),
            SecurityTier::Full => Some(format!("{}.{id}", self.config.tenant)),
        };
        let mut services = vec![SVC_PROVISIONING.to_string()];
        if tier.encrypts() {
            services.extend(instance.as_deref().map(attestation_service));
        }
        let disk_key = tier.encrypts().then(|| self.disk_key(id));
        let packed = image.build(disk_key)?;
        let runtime_whitelist = tier.encrypts().then(|| image.runtime_whitelist());

        let mut c = self.client(transport);
        // An unknown tenant fails here, before anything else is created.
        let network: NetworkId = decode(
            c.post("/networks", json!({ "purpose": NetworkPurpose::Enclave, "services": services }))?["network"]
                .take(),
        )?;
        if tier.encrypts() {
            c.post("/attestation/instances", json!({ "name": instance }))?;
        }
        let image_id: ImageId = decode(
            c.post(
                "/images",
                json!({
                    "name": format!("{id}/{}", image.name),
                    "content": base64_encode(&packed.content),
                    "size_blocks": packed.size_blocks,
                }),
            )?["image"]
                .take(),
        )?;
        let enclave = Enclave {
            id: id.to_string(),
            tenant: self.config.tenant.clone(),
            tier,
            network,
            instance,
            image: image_id,
            runtime_whitelist,
            airlock: None,
            members: BTreeMap::new(),
            rejected: BTreeSet::new(),
            sealed: 0,
        };
        Self::emit(
            &mut c,
            "enclave_created",
            None,
            json!({ "enclave": id, "tier": tier, "network": network, "instance": enclave.instance }),
        )?;
        self.registry.enclaves.insert(id.to_string(), enclave);
        self.save()?;
        Ok(&self.registry.enclaves[id])
    }

    /// Expected boot registers. The attested tier takes the provider's
    /// published values; the full tier rebuilds them from the firmware
    /// blobs. Both cross-check the platform register published for the
    /// node.
    fn boot_whitelist(&self, c: &mut Client, tier: SecurityTier, metadata: &NodeMetadata) -> Result<BootWhitelist> {
        let kind = metadata.firmware;
        let whitelist = if tier.encrypts() {
            let mut blobs = BTreeMap::new();
            for stage in BootStage::FIRMWARE.into_iter().filter(|s| s.used_by(kind)) {
                let body = c.get(&format!("/bootchain/blobs/{}", stage.name()))?;
                let blob = base64_decode(body["blob"].as_str().unwrap_or_default())?;
                blobs.insert(stage, blob);
            }
            let mut wl = BlobCorpus::from_blobs(blobs).expected_whitelist(kind);
            wl.provenance = Provenance::TenantBuilt;
            wl
        } else {
            decode(c.get(&format!("/bootchain/whitelist/{}", firmware_name(kind)))?)?
        };
        let matches = metadata.platform_pcr_whitelist.get(&PCR_PLATFORM) == whitelist.expected.get(&PCR_PLATFORM);
        Self::emit(
            c,
            "security_check",
            Some(metadata.node_id),
            json!({ "check": "platform_reference", "ok": matches, "provenance": whitelist.provenance }),
        )?;
        Ok(whitelist)
    }

    /// Runs the server life cycle for one new node. A failed attestation
    /// is a result, not an error: the node ends up in the rejected pool.
    pub fn node_add(&mut self, transport: &mut dyn Transport, enclave_id: &str, wanted: Option<NodeId>) -> Result<NodeAddOutcome> {
        let mut enclave = self.enclave(enclave_id)?.clone();
        let tier = enclave.tier;
        let mut c = self.client(transport);

        // 1: allocate, create an airlock and move the node into it.
        let slot = wanted.map_or("_".to_string(), |n| n.0.to_string());
        let mut alloc = c.post(&format!("/nodes/{slot}/allocate"), Value::Null)?;
        let node: NodeId = decode(alloc["node"].take())?;
        let metadata: NodeMetadata = decode(alloc["metadata"].take())?;
        let airlock = match enclave.airlock.filter(|_| self.config.single_airlock) {
            Some(net) => net,
            None => {
                let mut services = vec![SVC_BOOT.to_string()];
                services.extend(enclave.instance.as_deref().map(attestation_service));
                let net: NetworkId = decode(
                    c.post("/networks", json!({ "purpose": NetworkPurpose::Airlock, "services": services }))?
                        ["network"]
                        .take(),
                )?;
                if self.config.single_airlock {
                    enclave.airlock = Some(net);
                }
                net
            }
        };
        let n = node.0;
        c.post(&format!("/nodes/{n}/connect"), json!({ "nic": 0, "network": airlock }))?;
        c.post(&format!("/nodes/{n}/state"), json!({ "state": AllocationState::Airlock }))?;
        Self::lifecycle(&mut c, &enclave, node, 1)?;

        let leave_airlock = |c: &mut Client, to: AllocationState| -> Result<()> {
            c.post(&format!("/nodes/{n}/detach"), json!({ "nic": 0 }))?;
            if !self.config.single_airlock {
                c.delete(&format!("/networks/{}", airlock.0))?;
            }
            c.post(&format!("/nodes/{n}/state"), json!({ "state": to }))?;
            Ok(())
        };

        let agent = if tier.attests() {
            // 2: boot the measured firmware, which starts the agent.
            let whitelist = self.boot_whitelist(&mut c, tier, &metadata)?;
            c.post(&format!("/nodes/{n}/power_cycle"), json!({ "mode": BootMode::Attested }))?;
            let instance = enclave.instance.clone().expect("attesting tiers have an instance");
            let agent = AgentId::for_node(node);
            let registration = self.registration(&mut c, &mut enclave, node, &metadata, whitelist)?;
            c.post(&format!("/attestation/{instance}/verifier/agents"), json!(registration))?;
            Self::lifecycle(&mut c, &enclave, node, 2)?;

            // 3: wait for the boot verdict.
            let status_path = format!("/attestation/{instance}/verifier/agents/{agent}/status");
            let mut verdict: Option<StatusView> = None;
            self.wait_until(&mut c, "boot verdict", |c| {
                let view: StatusView = decode(c.get(&status_path)?)?;
                let done = view.status != Status::Pending;
                verdict = Some(view);
                Ok(done)
            })?;
            Self::lifecycle(&mut c, &enclave, node, 3)?;
            let verdict = verdict.expect("set by the wait");

            if verdict.status != Status::Passed {
                // 5: the rejected pool.
                leave_airlock(&mut c, AllocationState::Rejected)?;
                Self::lifecycle(&mut c, &enclave, node, 5)?;
                enclave.rejected.insert(node);
                self.registry.enclaves.insert(enclave_id.to_string(), enclave);
                self.save()?;
                return Ok(NodeAddOutcome::Rejected {
                    node,
                    cause: verdict.cause,
                });
            }
            // 4: into the enclave.
            leave_airlock(&mut c, AllocationState::Allocated)?;
            c.post(&format!("/nodes/{n}/connect"), json!({ "nic": 0, "network": enclave.network }))?;
            Self::lifecycle(&mut c, &enclave, node, 4)?;
            Some(agent)
        } else {
            // 2: boot firmware straight to the provisioning phase.
            c.post(&format!("/nodes/{n}/power_cycle"), json!({ "mode": BootMode::Direct }))?;
            Self::lifecycle(&mut c, &enclave, node, 2)?;
            let ready = RuntimeState::Phase { phase: Phase::VI };
            self.wait_until(&mut c, "firmware", |c| Ok(Self::node_runtime(c, node)?.as_ref() == Some(&ready)))?;
            leave_airlock(&mut c, AllocationState::Allocated)?;
            c.post(&format!("/nodes/{n}/connect"), json!({ "nic": 0, "network": enclave.network }))?;
            None
        };

        // 6: network-boot the tenant OS and hand off to it.
        let session: SessionId = decode(
            c.post("/sessions", json!({ "image": enclave.image, "node": node }))?["session"].take(),
        )?;
        self.wait_until(&mut c, "tenant OS", |c| {
            Ok(Self::node_runtime(c, node)? == Some(RuntimeState::Running))
        })?;
        Self::lifecycle(&mut c, &enclave, node, 6)?;
        enclave.members.insert(
            node,
            Member {
                session,
                agent,
                revoked: false,
            },
        );
        self.registry.enclaves.insert(enclave_id.to_string(), enclave);
        self.save()?;
        Ok(NodeAddOutcome::Member { node })
    }

    fn registration(
        &self,
        c: &mut Client,
        enclave: &mut Enclave,
        node: NodeId,
        metadata: &NodeMetadata,
        boot_whitelist: BootWhitelist,
    ) -> Result<AgentRegistration> {
        let info: BootInfo = decode(c.get(&format!("/images/{}/boot_info", enclave.image.0))?)?;
        let mut payload = Payload {
            kernel: info.kernel,
            initrd: info.initrd,
            cmdline: info.cmdline,
            script: format!("join {}", enclave.id),
            ..Payload::default()
        };
        let mut peer_updates = BTreeMap::new();
        if enclave.tier.encrypts() {
            payload.disk_key = Some(self.disk_key(&enclave.id));
            payload.network_key = Some(self.network_key(&enclave.id, node));
            for peer in enclave.active_members().collect::<Vec<_>>() {
                let pair = self.pair_key(&enclave.id, node, peer);
                let nonce = self.seal_nonce(&enclave.id, enclave.sealed);
                enclave.sealed += 1;
                peer_updates.insert(peer, SealedKey::seal(&self.network_key(&enclave.id, peer), &pair, nonce));
                payload.peers.insert(peer, pair);
            }
        }
        Ok(AgentRegistration {
            agent_id: AgentId::for_node(node),
            node,
            expected_ek: metadata.ek_public,
            boot_whitelist,
            runtime_whitelist: enclave.runtime_whitelist.clone(),
            poll_interval: self.config.poll_interval,
            group: enclave.tier.encrypts().then(|| enclave.id.clone()),
            payload,
            peer_updates,
        })
    }

    /// Returns a member node to the free pool: its agent is retired (so
    /// peers drop its keys), its boot session closed, its memory scrubbed
    /// by a firmware boot.
    pub fn node_release(&mut self, transport: &mut dyn Transport, enclave_id: &str, node: NodeId) -> Result<()> {
        let mut enclave = self.enclave(enclave_id)?.clone();
        let member = enclave
            .members
            .remove(&node)
            .ok_or_else(|| OrchestratorError::NotFound(format!("{node} is not a member of {enclave_id}")))?;
        let mut c = self.client(transport);
        let n = node.0;
        if let (Some(agent), Some(instance)) = (&member.agent, &enclave.instance) {
            c.delete(&format!("/attestation/{instance}/verifier/agents/{agent}"))?;
        }
        c.post(&format!("/sessions/{}/close", member.session.0), json!({}))?;
        if !member.revoked {
            c.post(&format!("/nodes/{n}/detach"), json!({ "nic": 0 }))?;
        }
        let scrub_net: NetworkId = decode(
            c.post(
                "/networks",
                json!({ "purpose": NetworkPurpose::ProvisioningAccess, "services": [SVC_BOOT] }),
            )?["network"]
                .take(),
        )?;
        c.post(&format!("/nodes/{n}/connect"), json!({ "nic": 0, "network": scrub_net }))?;
        c.post(&format!("/nodes/{n}/power_cycle"), json!({ "mode": BootMode::Direct }))?;
        self.wait_until(&mut c, "memory scrub", |c| {
            let status = c.get(&format!("/sim/nodes/{n}/status"))?;
            Ok(status["scrub_complete"] == json!(true))
        })?;
        c.post(&format!("/nodes/{n}/detach"), json!({ "nic": 0 }))?;
        c.delete(&format!("/networks/{}", scrub_net.0))?;
        c.post(&format!("/nodes/{n}/state"), json!({ "state": AllocationState::Free }))?;
        Self::emit(&mut c, "node_released", Some(node), json!({ "enclave": enclave_id }))?;
        self.registry.enclaves.insert(enclave_id.to_string(), enclave);
        self.save()
    }

    /// Acts on revocations: a revoked member loses its enclave network
    /// attachment. Returns the nodes acted on.
    pub fn enforce(&mut self, transport: &mut dyn Transport, enclave_id: &str) -> Result<Vec<NodeId>> {
        let mut enclave = self.enclave(enclave_id)?.clone();
        let Some(instance) = enclave.instance.clone() else {
            return Ok(Vec::new());
        };
        let reboot = self.config.reboot_on_revoke;
        let mut c = self.client(transport);
        let mut acted = Vec::new();
        for (node, member) in enclave.members.iter_mut().filter(|(_, m)| !m.revoked) {
            let Some(agent) = &member.agent else { continue };
            let view: StatusView = decode(c.get(&format!("/attestation/{instance}/verifier/agents/{agent}/status"))?)?;
            if view.status != Status::Revoked {
                continue;
            }
            c.post(&format!("/nodes/{}/detach", node.0), json!({ "nic": 0 }))?;
            if reboot {
                c.post(&format!("/nodes/{}/power_cycle", node.0), json!({ "mode": BootMode::Direct }))?;
            }
            member.revoked = true;
            Self::emit(
                &mut c,
                "revocation_enforced",
                Some(*node),
                json!({ "enclave": enclave_id, "cause": view.cause, "rebooted": reboot }),
            )?;
            acted.push(*node);
        }
        self.registry.enclaves.insert(enclave_id.to_string(), enclave);
        self.save()?;
        Ok(acted)
    }

    pub fn node_status(&self, transport: &mut dyn Transport, enclave_id: &str, node: NodeId) -> Result<Value> {
        let enclave = self.enclave(enclave_id)?;
        let member = enclave
            .members
            .get(&node)
            .ok_or_else(|| OrchestratorError::NotFound(format!("{node} is not a member of {enclave_id}")))?;
        let mut c = self.client(transport);
        let record = c.get(&format!("/nodes/{}", node.0))?;
        let runtime = c.get(&format!("/sim/nodes/{}/status", node.0))?;
        let attestation = match (&member.agent, &enclave.instance) {
            (Some(agent), Some(instance)) => c.get(&format!("/attestation/{instance}/verifier/agents/{agent}/status"))?,
            _ => Value::Null,
        };
        Ok(json!({
            "enclave": enclave_id,
            "member": member,
            "node": record,
            "runtime": runtime,
            "attestation": attestation,
        }))
    }
}

fn firmware_name(kind: FirmwareKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn base64_encode(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn base64_decode(text: &str) -> Result<Vec<u8>> {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| CallError::Decode(e.to_string()).into())
}
