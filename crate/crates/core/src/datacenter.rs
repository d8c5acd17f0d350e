// SPDX-License-Identifier: Apache-2.0

//! The emulated cloud as one deterministic value: hardware, the three
//! services, per-node firmware runtimes and the event scheduler. Every
//! externally visible effect lands in the trace log.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::attestation::verifier::StatusView;
use crate::attestation::{
    AgentId, AgentLink, AgentRegistration, AttestationError, BootWhitelist, Cause, LinkError, MeasurementList,
    PeerNotice, Registrar, Verifier, DEFAULT_GRACE,
};
use crate::bootchain::{
    flip_bit, BlobCorpus, BootEnv, BootError, BootServer, BootStage, EnrollError, Fetch, NodeRuntime, RuntimeState,
};
use crate::crypto::SymmetricKey;
use crate::fabric::{
    BootMode, BootPath, Delivery, Destination, EmulatedNode, Fabric, FabricError, FirmwareKind, Frame, Observed,
    Observer, PowerCycle, Scheduler, TraceEvent, TraceLog, DEFAULT_MEMORY_BYTES,
};
use crate::ids::{NetworkId, NicId, NodeId, ProjectId};
use crate::isolation::{
    AllocationState, Caller, IsolationConfig, IsolationError, IsolationService, NetworkPurpose, NodeMetadata,
};
use crate::provisioning::{ImageId, ProvisioningError, ProvisioningService, SessionId};
use crate::tpm::{AikPublic, Credential, EkPublic, Nonce, PcrSelection, Quote, Tpm, PCR_PLATFORM};

pub const SVC_BOOT: &str = "boot";
pub const SVC_PROVISIONING: &str = "provisioning";
pub const PROVIDER_INSTANCE: &str = "provider";

/// Service name under which an attestation instance attaches to networks.
pub fn attestation_service(instance: &str) -> String {
    format!("attestation:{instance}")
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Isolation(#[from] IsolationError),
    #[error(transparent)]
    Provisioning(#[from] ProvisioningError),
    #[error(transparent)]
    Attestation(#[from] AttestationError),
    #[error(transparent)]
    Boot(#[from] BootError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::Isolation(e) => e.code(),
            SimError::Provisioning(e) => e.code(),
            SimError::Attestation(e) => e.code(),
            SimError::Boot(e) => e.code(),
            SimError::Fabric(FabricError::NodeNotFound(_)) => "not_found",
            SimError::Fabric(FabricError::MemoryRange { .. }) => "range",
            SimError::Fabric(FabricError::LinkDown(_)) => "policy",
        }
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatacenterConfig {
    pub nodes: u32,
    pub firmware: FirmwareKind,
    pub node_firmware: BTreeMap<NodeId, FirmwareKind>,
    pub memory_bytes: usize,
    pub nics_per_node: usize,
    /// Drives every random choice: keys, nonces, credentials.
    pub seed: u64,
    /// Drives the firmware blob corpus.
    pub corpus_seed: u64,
    pub single_airlock: bool,
    pub airlock_timeout: Option<u64>,
    pub grace: u32,
}

impl Default for DatacenterConfig {
    fn default() -> Self {
        Self {
            nodes: 4,
            firmware: FirmwareKind::UefiChain,
            node_firmware: BTreeMap::new(),
            memory_bytes: DEFAULT_MEMORY_BYTES,
            nics_per_node: 2,
            seed: 0,
            corpus_seed: 0,
            single_airlock: false,
            airlock_timeout: None,
            grace: DEFAULT_GRACE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttestationInstance {
    /// Project running the instance; `None` for the provider's own.
    pub owner: Option<ProjectId>,
    pub registrar: Registrar,
    pub verifier: Verifier,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Actor {
    Node(NodeId),
    Verifier(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Action {
    Boot { epoch: u64 },
    Poll(AgentId),
}

pub struct Datacenter {
    config: DatacenterConfig,
    pub fabric: Fabric,
    pub isolation: IsolationService,
    pub provisioning: ProvisioningService,
    attestation: BTreeMap<String, AttestationInstance>,
    boot_server: BootServer,
    corpus: BlobCorpus,
    runtimes: BTreeMap<NodeId, NodeRuntime>,
    scheduler: Scheduler<Actor, Action>,
    trace: TraceLog,
    rng: ChaCha20Rng,
    link_rng: ChaCha20Rng,
}

/// The part of the datacenter a booting node interacts with.
struct World<'a> {
    fabric: &'a mut Fabric,
    isolation: &'a IsolationService,
    provisioning: &'a mut ProvisioningService,
    attestation: &'a mut BTreeMap<String, AttestationInstance>,
    boot_server: &'a BootServer,
    trace: &'a mut TraceLog,
    rng: &'a mut ChaCha20Rng,
}

/// A service port on a VLAN shared with `node`, and the node NIC on it.
fn service_port_near(fabric: &Fabric, node: NodeId, service: &str) -> Option<(NicId, NicId)> {
    let prefix = format!("svc/{service}/");
    let hw = fabric.node(node).ok()?;
    hw.nics().iter().find_map(|nic| {
        let tag = fabric.switch().vlan(nic)?;
        let port = fabric.switch().ports_in(tag).find(|p| p.0.starts_with(&prefix))?;
        Some((port.clone(), nic.clone()))
    })
}

fn reachable(fabric: &Fabric, node: NodeId, service: &str) -> bool {
    service_port_near(fabric, node, service).is_some()
}

impl World<'_> {
    fn instance_near(&self, node: NodeId) -> Option<String> {
        self.attestation
            .keys()
            .find(|name| reachable(self.fabric, node, &attestation_service(name)))
            .cloned()
    }
}

impl BootEnv for World<'_> {
    fn now(&self) -> u64 {
        self.fabric.now()
    }

    fn node(&mut self, id: NodeId) -> &mut EmulatedNode {
        self.fabric.node_mut(id).expect("runtimes exist only for real nodes")
    }

    fn emit(&mut self, event: TraceEvent) {
        self.trace.push(event);
    }

    fn random_bytes(&mut self, out: &mut [u8]) {
        self.rng.fill_bytes(out);
    }

    fn fetch_stage(&mut self, node: NodeId, stage: BootStage) -> Fetch {
        if !reachable(self.fabric, node, SVC_BOOT) {
            return Fetch::Unreachable;
        }
        match self.boot_server.fetch(node, stage) {
            Some(blob) => Fetch::Blob(blob.to_vec()),
            None => Fetch::Missing,
        }
    }

    fn enroll(&mut self, node: NodeId, ek: EkPublic, aik: AikPublic) -> Result<Credential, EnrollError> {
        let name = self.instance_near(node).ok_or(EnrollError::Unreachable)?;
        let published = self.isolation.metadata(node).ok().map(|m| m.ek_public);
        let mut challenge = [0u8; 32];
        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut challenge);
        self.rng.fill_bytes(&mut seed);
        let now = self.fabric.now();
        let registrar = &mut self.attestation.get_mut(&name).expect("found above").registrar;
        registrar
            .enroll(&AgentId::for_node(node), node, ek, aik, published, challenge, seed)
            .map_err(|e| {
                if let AttestationError::Spoofing { presented, .. } = &e {
                    self.trace.push(
                        TraceEvent::new(now, "attestation", "spoofing_alarm")
                            .node(node)
                            .detail(json!({ "instance": name, "presented_ek": presented })),
                    );
                }
                EnrollError::Refused(e.to_string())
            })
    }

    fn confirm(&mut self, node: NodeId, response: &[u8]) -> Result<(), EnrollError> {
        let name = self.instance_near(node).ok_or(EnrollError::Unreachable)?;
        let registrar = &mut self.attestation.get_mut(&name).expect("found above").registrar;
        registrar
            .confirm(&AgentId::for_node(node), response)
            .map_err(|e| EnrollError::Refused(e.to_string()))
    }

    fn receive(&mut self, node: NodeId) -> Vec<Frame> {
        let nics = self.fabric.node(node).map(|n| n.nics().to_vec()).unwrap_or_default();
        nics.iter().flat_map(|nic| self.fabric.drain_inbox(nic)).collect()
    }

    fn send(&mut self, frame: Frame) -> Result<Delivery, FabricError> {
        self.fabric.send_frame(frame)
    }

    fn node_of_nic(&self, nic: &NicId) -> Option<NodeId> {
        self.fabric.node_of_nic(nic)
    }

    fn boot_session(&mut self, node: NodeId) -> Option<SessionId> {
        if !reachable(self.fabric, node, SVC_PROVISIONING) {
            return None;
        }
        self.provisioning.session_for_node(node).map(|s| s.id)
    }

    fn serve_block(&mut self, session: SessionId, index: u64) -> Result<Vec<u8>, ProvisioningError> {
        self.provisioning.serve_block(session, index)
    }

    fn acknowledge_revocation(&mut self, revoked: NodeId, by: NodeId) {
        let now = self.fabric.now();
        for instance in self.attestation.values_mut() {
            instance.verifier.acknowledge_revocation(revoked, by, now);
        }
    }
}

/// How a verifier instance reaches agents: RPCs need a route from the
/// instance's service port, and payload bundles travel as fabric frames.
struct Link<'a> {
    fabric: &'a mut Fabric,
    runtimes: &'a mut BTreeMap<NodeId, NodeRuntime>,
    service: String,
    rng: &'a mut ChaCha20Rng,
}

impl Link<'_> {
    fn route(&self, node: NodeId) -> Result<(NicId, NicId), LinkError> {
        service_port_near(self.fabric, node, &self.service).ok_or_else(|| LinkError(format!("no route to {node}")))
    }
}

impl AgentLink for Link<'_> {
    fn quote(&mut self, node: NodeId, nonce: Nonce, selection: &PcrSelection) -> Result<(Quote, MeasurementList), LinkError> {
        self.route(node)?;
        let list = self
            .runtimes
            .get(&node)
            .and_then(NodeRuntime::reported_list)
            .ok_or_else(|| LinkError(format!("no agent running on {node}")))?;
        let hw = self.fabric.node(node).map_err(|e| LinkError(e.to_string()))?;
        let quote = hw.tpm.quote(nonce, selection).map_err(|e| LinkError(e.to_string()))?;
        Ok((quote, list))
    }

    fn deliver(&mut self, node: NodeId, credential: Credential, bundle: &[u8], key: &SymmetricKey) -> Result<(), LinkError> {
        let (port, nic) = self.route(node)?;
        let accepted = self
            .runtimes
            .get_mut(&node)
            .is_some_and(|rt| rt.deliver_credential(credential));
        if !accepted {
            return Err(LinkError(format!("no agent running on {node}")));
        }
        let mut nonce = [0u8; 12];
        self.rng.fill_bytes(&mut nonce);
        let frame = Frame::sealed(port, Destination::Nic(nic), key, nonce, bundle);
        match self.fabric.send_frame(frame) {
            Ok(Delivery::Delivered) => Ok(()),
            Ok(Delivery::IsolationDrop) => Err(LinkError("bundle dropped".into())),
            Err(e) => Err(LinkError(e.to_string())),
        }
    }

    fn notify(&mut self, peer: NodeId, notice: PeerNotice) -> Result<(), LinkError> {
        self.route(peer)?;
        let accepted = self.runtimes.get_mut(&peer).is_some_and(|rt| rt.notify(notice));
        if accepted {
            Ok(())
        } else {
            Err(LinkError(format!("no agent running on {peer}")))
        }
    }
}

impl Datacenter {
    pub fn new(config: DatacenterConfig) -> Self {
        let corpus = BlobCorpus::generate(config.corpus_seed);
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let link_rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x6c69_6e6b);
        let mut fabric = Fabric::new();
        let mut isolation = IsolationService::new(IsolationConfig {
            single_airlock: config.single_airlock,
            airlock_timeout: config.airlock_timeout,
        });
        let mut runtimes = BTreeMap::new();
        for n in 0..config.nodes {
            let id = NodeId(n);
            let kind = config.node_firmware.get(&id).copied().unwrap_or(config.firmware);
            let mut ek_seed = [0u8; 32];
            rng.fill_bytes(&mut ek_seed);
            let tpm = Tpm::new(ek_seed);
            let ek_public = tpm.ek_public();
            let flash = corpus.flash_image(kind);
            fabric.add_node(EmulatedNode::new(
                id,
                tpm,
                BootPath::Flash(flash),
                config.memory_bytes,
                config.nics_per_node,
            ));
            let whitelist = corpus.expected_whitelist(kind);
            isolation.register_node(NodeMetadata {
                node_id: id,
                ek_public,
                firmware: kind,
                platform_pcr_whitelist: whitelist.expected.into_iter().filter(|(i, _)| *i == PCR_PLATFORM).collect(),
            });
            runtimes.insert(id, NodeRuntime::new(id));
        }
        let attestation = BTreeMap::from([(
            PROVIDER_INSTANCE.to_string(),
            AttestationInstance {
                owner: None,
                registrar: Registrar::default(),
                verifier: Verifier::new(config.grace),
            },
        )]);
        Self {
            boot_server: corpus.boot_server(),
            corpus,
            config,
            fabric,
            isolation,
            provisioning: ProvisioningService::new(),
            attestation,
            runtimes,
            scheduler: Scheduler::new(),
            trace: TraceLog::default(),
            rng,
            link_rng,
        }
    }

    pub fn config(&self) -> &DatacenterConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.fabric.now()
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn corpus(&self) -> &BlobCorpus {
        &self.corpus
    }

    pub fn boot_server_mut(&mut self) -> &mut BootServer {
        &mut self.boot_server
    }

    /// The whitelist the provider publishes for a firmware profile.
    pub fn provider_whitelist(&self, kind: FirmwareKind) -> BootWhitelist {
        self.corpus.expected_whitelist(kind)
    }

    pub fn runtime(&self, node: NodeId) -> Result<&NodeRuntime> {
        self.runtimes
            .get(&node)
            .ok_or_else(|| FabricError::NodeNotFound(node).into())
    }

    pub fn emit(&mut self, event: TraceEvent) {
        self.trace.push(event);
    }

    fn event(&self, component: &str, event: &str) -> TraceEvent {
        TraceEvent::new(self.now(), component, event)
    }

    fn split(&mut self) -> (World<'_>, &mut BTreeMap<NodeId, NodeRuntime>) {
        (
            World {
                fabric: &mut self.fabric,
                isolation: &self.isolation,
                provisioning: &mut self.provisioning,
                attestation: &mut self.attestation,
                boot_server: &self.boot_server,
                trace: &mut self.trace,
                rng: &mut self.rng,
            },
            &mut self.runtimes,
        )
    }

    fn with_runtime<R>(&mut self, node: NodeId, f: impl FnOnce(&mut NodeRuntime, &mut World<'_>) -> R) -> Result<R> {
        let (mut world, runtimes) = self.split();
        let rt = runtimes.get_mut(&node).ok_or(FabricError::NodeNotFound(node))?;
        Ok(f(rt, &mut world))
    }

    /// Runs every scheduled action in the next `ticks` ticks, in
    /// (tick, actor, sequence) order, and returns the events they emitted.
    pub fn advance(&mut self, ticks: u64) -> Vec<TraceEvent> {
        let start = self.trace.len();
        for _ in 0..ticks {
            let tick = self.now() + 1;
            self.fabric.clock_mut().advance_to(tick);
            for node in self.isolation.expire_airlocks(tick, &mut self.fabric) {
                let event = self.event("isolation", "airlock_expired").node(node);
                self.emit(event);
            }
            while let Some((_, actor, action)) = self.scheduler.pop_due(tick) {
                match (actor, action) {
                    (Actor::Node(id), Action::Boot { epoch }) => self.step_node(id, epoch),
                    (Actor::Verifier(instance), Action::Poll(agent)) => self.poll(&instance, &agent),
                    _ => unreachable!("actions are only scheduled for their own actor"),
                }
            }
        }
        self.trace.since(start).to_vec()
    }

    fn start_boot(&mut self, node: NodeId, epoch: u64) {
        let mode = self.fabric.node(node).map(|n| n.boot_mode()).unwrap_or_default();
        if let Some(rt) = self.runtimes.get_mut(&node) {
            rt.power_on(epoch, mode);
        }
        self.scheduler.schedule(self.now() + 1, Actor::Node(node), Action::Boot { epoch });
        let event = self
            .event("fabric", "power_on")
            .node(node)
            .detail(json!({ "epoch": epoch, "mode": mode }));
        self.emit(event);
    }

    fn step_node(&mut self, node: NodeId, epoch: u64) {
        let Some(rt) = self.runtimes.get(&node) else { return };
        if rt.epoch() != epoch {
            return;
        }
        if *rt.state() == RuntimeState::Post && self.fabric.boot_started(node).unwrap_or(false) {
            // A power cycle queued behind this boot takes over now.
            if let Ok(PowerCycle::Started { epoch }) = self.fabric.power_cycle(node) {
                self.start_boot(node, epoch);
            }
            return;
        }
        let keep = self.with_runtime(node, |rt, world| rt.step(world)).unwrap_or(false);
        if keep {
            self.scheduler.schedule(self.now() + 1, Actor::Node(node), Action::Boot { epoch });
        }
    }

    fn record_notices(&mut self, instance: &str, notices: Vec<crate::attestation::Notice>) {
        let now = self.now();
        for n in notices {
            let mut detail = n.detail;
            if let Value::Object(map) = &mut detail {
                map.insert("instance".into(), json!(instance));
            }
            self.trace
                .push(TraceEvent::new(now, "attestation", n.event).node(n.node).detail(detail));
        }
    }

    fn poll(&mut self, instance: &str, agent: &AgentId) {
        let now = self.now();
        let Some(inst) = self.attestation.get_mut(instance) else { return };
        let mut link = Link {
            fabric: &mut self.fabric,
            runtimes: &mut self.runtimes,
            service: attestation_service(instance),
            rng: &mut self.link_rng,
        };
        let (notices, next) = inst.verifier.poll(agent, now, &inst.registrar, &mut link, &mut self.rng);
        self.record_notices(instance, notices);
        if let Some(tick) = next {
            self.scheduler
                .schedule(tick, Actor::Verifier(instance.to_string()), Action::Poll(agent.clone()));
        }
    }

    // Isolation service, with trace events.

    pub fn create_project(&mut self, name: &ProjectId) -> Result<()> {
        self.isolation.create_project(name.clone())?;
        let event = self.event("isolation", "project_created").detail(json!({ "project": name }));
        self.emit(event);
        Ok(())
    }

    pub fn allocate(&mut self, caller: &Caller, wanted: Option<NodeId>) -> Result<(NodeId, NodeMetadata)> {
        let (node, metadata) = self.isolation.allocate_node(caller, wanted)?;
        let event = self.event("isolation", "node_allocated").node(node).detail(json!({ "caller": caller }));
        self.emit(event);
        Ok((node, metadata))
    }

    pub fn create_network(&mut self, caller: &Caller, purpose: NetworkPurpose, services: Vec<String>) -> Result<NetworkId> {
        let id = self.isolation.create_network(caller, purpose, services.clone(), &mut self.fabric)?;
        let vlan = self.isolation.network(id)?.vlan;
        let event = self
            .event("isolation", "network_created")
            .network(id)
            .detail(json!({ "purpose": purpose, "vlan": vlan, "services": services }));
        self.emit(event);
        Ok(id)
    }

    pub fn delete_network(&mut self, caller: &Caller, id: NetworkId) -> Result<()> {
        self.isolation.delete_network(caller, id, &mut self.fabric)?;
        let event = self.event("isolation", "network_deleted").network(id);
        self.emit(event);
        Ok(())
    }

    pub fn connect(&mut self, caller: &Caller, node: NodeId, nic: usize, network: NetworkId) -> Result<()> {
        self.isolation.connect(caller, node, nic, network, &mut self.fabric)?;
        let event = self
            .event("isolation", "node_connected")
            .node(node)
            .network(network)
            .detail(json!({ "nic": nic }));
        self.emit(event);
        Ok(())
    }

    pub fn detach(&mut self, caller: &Caller, node: NodeId, nic: usize) -> Result<()> {
        let network = self
            .fabric
            .node(node)?
            .nics()
            .get(nic)
            .and_then(|n| self.isolation.attachment(node, n));
        self.isolation.detach(caller, node, nic, &mut self.fabric)?;
        let mut event = self.event("isolation", "node_detached").node(node).detail(json!({ "nic": nic }));
        if let Some(net) = network {
            event = event.network(net);
        }
        self.emit(event);
        Ok(())
    }

    pub fn set_state(&mut self, caller: &Caller, node: NodeId, to: AllocationState) -> Result<()> {
        let from = self.isolation.node(node)?.state;
        self.isolation.set_state(caller, node, to, self.now(), &mut self.fabric)?;
        let event = self
            .event("isolation", "state_change")
            .node(node)
            .detail(json!({ "from": from, "to": to }));
        self.emit(event);
        Ok(())
    }

    pub fn remediate(&mut self, caller: &Caller, node: NodeId) -> Result<()> {
        let kind = self.isolation.metadata(node)?.firmware;
        let known_good = BootPath::Flash(self.corpus.flash_image(kind));
        self.isolation.remediate(caller, node, known_good, &mut self.fabric)?;
        self.boot_server.clear_overrides(node);
        let event = self.event("isolation", "node_remediated").node(node);
        self.emit(event);
        Ok(())
    }

    pub fn power_cycle(&mut self, caller: &Caller, node: NodeId, mode: BootMode) -> Result<PowerCycle> {
        let outcome = self.isolation.power_cycle(caller, node, mode, &mut self.fabric)?;
        match outcome {
            PowerCycle::Started { epoch } => self.start_boot(node, epoch),
            PowerCycle::Queued => {
                let event = self.event("fabric", "power_cycle_queued").node(node);
                self.emit(event);
            }
        }
        Ok(outcome)
    }

    // Provisioning service.

    pub fn create_image(&mut self, owner: &ProjectId, name: &str, content: &[u8], size_blocks: Option<u64>) -> Result<ImageId> {
        let id = self.provisioning.create(owner, name, content, size_blocks)?;
        let event = self
            .event("provisioning", "image_created")
            .detail(json!({ "image": id, "owner": owner, "name": name }));
        self.emit(event);
        Ok(id)
    }

    /// Opens a boot session. The caller must own the node it boots.
    pub fn open_session(&mut self, owner: &ProjectId, image: ImageId, node: NodeId) -> Result<SessionId> {
        self.isolation
            .require_node_access(&Caller::Tenant(owner.clone()), node)?;
        let id = self.provisioning.open_session(owner, image, node)?;
        let event = self
            .event("provisioning", "session_opened")
            .node(node)
            .detail(json!({ "session": id, "image": image }));
        self.emit(event);
        Ok(id)
    }

    pub fn close_session(&mut self, owner: &ProjectId, id: SessionId, save_as: Option<&str>) -> Result<Option<ImageId>> {
        let session = self.provisioning.session(id)?;
        if &session.project != owner {
            return Err(ProvisioningError::Authorization(format!("{id} belongs to another project")).into());
        }
        let node = session.node;
        let fetched = session.blocks_fetched();
        let saved = self.provisioning.close_session(id, save_as)?;
        let event = self
            .event("provisioning", "session_closed")
            .node(node)
            .detail(json!({ "session": id, "blocks_fetched": fetched, "saved_as": saved }));
        self.emit(event);
        Ok(saved)
    }

    // Attestation service instances.

    pub fn create_attestation_instance(&mut self, name: &str, owner: Option<ProjectId>) -> Result<()> {
        if self.attestation.contains_key(name) {
            return Err(AttestationError::Conflict(format!("attestation instance {name} exists")).into());
        }
        if let Some(p) = &owner {
            if !self.isolation.has_project(p) {
                return Err(IsolationError::Authorization(format!("unknown project {p}")).into());
            }
        }
        self.attestation.insert(
            name.to_string(),
            AttestationInstance {
                owner,
                registrar: Registrar::default(),
                verifier: Verifier::new(self.config.grace),
            },
        );
        let event = self.event("attestation", "instance_started").detail(json!({ "instance": name }));
        self.emit(event);
        Ok(())
    }

    pub fn attestation(&self, name: &str) -> Result<&AttestationInstance> {
        self.attestation
            .get(name)
            .ok_or_else(|| AttestationError::NotFound(format!("attestation instance {name}")).into())
    }

    pub fn attestation_mut(&mut self, name: &str) -> Result<&mut AttestationInstance> {
        self.attestation
            .get_mut(name)
            .ok_or_else(|| AttestationError::NotFound(format!("attestation instance {name}")).into())
    }

    /// Whether `caller` may manage the agent of `node` on `instance`. Tenants
    /// stay out of each other's instances, and on the provider's instance
    /// they only reach nodes they hold.
    pub fn check_agent_access(&self, caller: &Caller, instance: &str, node: NodeId) -> Result<()> {
        let Caller::Tenant(project) = caller else {
            return Ok(());
        };
        match &self.attestation(instance)?.owner {
            Some(owner) if owner == project => Ok(()),
            Some(_) => Err(IsolationError::Authorization(format!("attestation instance {instance} belongs to another project")).into()),
            None => {
                self.isolation.require_node_access(caller, node)?;
                Ok(())
            }
        }
    }

    /// Registrar enrollment on behalf of a remote agent. Challenge and
    /// credential randomness come from the simulation RNG.
    pub fn registrar_enroll(&mut self, instance: &str, node: NodeId, ek: EkPublic, aik: AikPublic) -> Result<Credential> {
        let published = self.isolation.metadata(node).ok().map(|m| m.ek_public);
        let mut challenge = [0u8; 32];
        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut challenge);
        self.rng.fill_bytes(&mut seed);
        let inst = self.attestation_mut(instance)?;
        Ok(inst
            .registrar
            .enroll(&AgentId::for_node(node), node, ek, aik, published, challenge, seed)?)
    }

    pub fn registrar_confirm(&mut self, instance: &str, agent: &AgentId, response: &[u8]) -> Result<()> {
        Ok(self.attestation_mut(instance)?.registrar.confirm(agent, response)?)
    }

    pub fn register_agent(&mut self, instance: &str, registration: AgentRegistration) -> Result<u64> {
        let now = self.now();
        let agent = registration.agent_id.clone();
        let node = registration.node;
        let inst = self
            .attestation
            .get_mut(instance)
            .ok_or_else(|| AttestationError::NotFound(format!("attestation instance {instance}")))?;
        let first = inst.verifier.register(registration, now, &mut self.rng)?;
        let actor = Actor::Verifier(instance.to_string());
        self.scheduler
            .retain(|k, a| !(k == &actor && matches!(a, Action::Poll(x) if x == &agent)));
        self.scheduler.schedule(first, actor, Action::Poll(agent.clone()));
        let event = self
            .event("attestation", "agent_added")
            .node(node)
            .detail(json!({ "instance": instance, "agent": agent, "first_poll": first }));
        self.emit(event);
        Ok(first)
    }

    pub fn agent_status(&self, instance: &str, agent: &AgentId) -> Result<StatusView> {
        Ok(self.attestation(instance)?.verifier.status(agent)?)
    }

    pub fn revoke_agent(&mut self, instance: &str, agent: &AgentId, cause: Cause) -> Result<()> {
        let now = self.now();
        let inst = self
            .attestation
            .get_mut(instance)
            .ok_or_else(|| AttestationError::NotFound(format!("attestation instance {instance}")))?;
        inst.verifier.status(agent)?;
        let mut link = Link {
            fabric: &mut self.fabric,
            runtimes: &mut self.runtimes,
            service: attestation_service(instance),
            rng: &mut self.link_rng,
        };
        let notices = inst.verifier.revoke(agent, now, cause, &mut link);
        self.record_notices(instance, notices);
        Ok(())
    }

    /// Stops attesting an agent: peers drop its keys, then the verifier and
    /// registrar forget it.
    pub fn retire_agent(&mut self, instance: &str, agent: &AgentId) -> Result<()> {
        self.revoke_agent(instance, agent, Cause::Retired)?;
        let inst = self.attestation_mut(instance)?;
        inst.verifier.remove(agent)?;
        inst.registrar.remove(agent);
        let actor = Actor::Verifier(instance.to_string());
        self.scheduler
            .retain(|k, a| !(k == &actor && matches!(a, Action::Poll(x) if x == agent)));
        let event = self
            .event("attestation", "agent_retired")
            .detail(json!({ "instance": instance, "agent": agent }));
        self.emit(event);
        Ok(())
    }

    // Node-side actions. These model what software on the node does, and
    // what an adversary with physical or provider access can do.

    pub fn exec(&mut self, node: NodeId, path: &str, content: Option<Vec<u8>>) -> Result<()> {
        self.with_runtime(node, |rt, world| rt.exec(world, path, content))??;
        Ok(())
    }

    pub fn send(&mut self, node: NodeId, to: NodeId, payload: &[u8]) -> Result<Delivery> {
        Ok(self.with_runtime(node, |rt, world| rt.send(world, to, payload))??)
    }

    fn require_tenant_context(&self, node: NodeId) -> Result<()> {
        if *self.runtime(node)?.state() != RuntimeState::Running {
            return Err(BootError::Policy(format!("{node} is not running tenant software")).into());
        }
        Ok(())
    }

    /// A tenant program writing node memory.
    pub fn tenant_write(&mut self, node: NodeId, offset: usize, bytes: &[u8]) -> Result<()> {
        self.require_tenant_context(node)?;
        self.fabric.node_mut(node)?.write_memory(offset, bytes)?;
        Ok(())
    }

    /// A tenant program reading node memory.
    pub fn tenant_read(&self, node: NodeId, offset: usize, len: usize) -> Result<Vec<u8>> {
        self.require_tenant_context(node)?;
        Ok(self.fabric.node(node)?.read_memory(offset, len)?.to_vec())
    }

    /// A tenant program asking for a memory scrub; only firmware may.
    pub fn request_scrub(&mut self, node: NodeId) -> Result<()> {
        let (mut world, runtimes) = self.split();
        let rt = runtimes.get_mut(&node).ok_or(FabricError::NodeNotFound(node))?;
        rt.scrub_memory(world.node(node))?;
        Ok(())
    }

    /// A tenant or adversary asking the firmware to kexec right now.
    pub fn request_kexec(&mut self, node: NodeId) -> Result<()> {
        self.with_runtime(node, |rt, world| rt.kexec_handoff(world))??;
        Ok(())
    }

    /// Flips one bit of a firmware stage as delivered to `node`: in its
    /// flash for stages stored there, on the boot server otherwise.
    pub fn tamper(&mut self, node: NodeId, stage: BootStage, bit: usize) -> Result<()> {
        let BootPath::Flash(mut flash) = self.fabric.node(node)?.boot_path().clone() else {
            return Err(BootError::Policy(format!("{node} has no firmware to tamper with")).into());
        };
        if stage == BootStage::TenantKernel || !stage.used_by(flash.kind) {
            return Err(BootError::Policy(format!("{stage} is not a firmware stage of {node}")).into());
        }
        let post_len = self.corpus.blob(BootStage::Post).len().min(flash.post.len());
        match (stage, flash.kind) {
            (BootStage::Post, FirmwareKind::LinuxbootFlash) => flip_bit(&mut flash.post[..post_len], bit),
            (BootStage::LinuxbootRuntime, FirmwareKind::LinuxbootFlash) => flip_bit(&mut flash.post[post_len..], bit),
            (BootStage::Post, _) => flip_bit(&mut flash.post, bit),
            (BootStage::Pxe, _) => flip_bit(&mut flash.pxe, bit),
            _ => {
                let mut blob = self
                    .boot_server
                    .fetch(node, stage)
                    .ok_or_else(|| BootError::NotFound(format!("{stage} on the boot server")))?
                    .to_vec();
                flip_bit(&mut blob, bit);
                self.boot_server.serve_override(node, stage, blob);
            }
        }
        if matches!(stage, BootStage::Post | BootStage::Pxe)
            || (stage == BootStage::LinuxbootRuntime && flash.kind == FirmwareKind::LinuxbootFlash)
        {
            self.fabric.node_mut(node)?.set_boot_path(BootPath::Flash(flash));
        }
        let event = self
            .event("adversary", "tamper")
            .node(node)
            .detail(json!({ "stage": stage, "bit": bit }));
        self.emit(event);
        Ok(())
    }

    /// Makes the node's agent report `list` instead of the real one.
    pub fn forge_list(&mut self, node: NodeId, list: MeasurementList) -> Result<()> {
        self.with_runtime(node, |rt, _| rt.forge_list(list))?;
        let event = self.event("adversary", "forge_list").node(node);
        self.emit(event);
        Ok(())
    }

    pub fn tap(&self, observer: &Observer) -> Vec<Observed> {
        self.fabric.tap_read(observer)
    }

    pub fn node_status(&self, node: NodeId) -> Result<Value> {
        let mut status = self.runtime(node)?.status();
        let record = self.isolation.node(node)?;
        status["state"] = json!(record.state);
        status["owner"] = json!(record.owner);
        status["scrub_complete"] = json!(self.fabric.node(node)?.scrub_complete());
        Ok(status)
    }

    /// Boot and firmware output for a node, as the BMC console shows it.
    pub fn console(&self, node: NodeId) -> Vec<String> {
        self.trace
            .events()
            .iter()
            .filter(|e| e.node_id == Some(node) && matches!(e.component.as_str(), "bootchain" | "node" | "fabric"))
            .map(|e| format!("[{}] {} {}", e.tick, e.event, e.detail))
            .collect()
    }
}
