// SPDX-License-Identifier: Apache-2.0

//! The provider-run isolation service: projects, node ownership and
//! allocation state, VLAN networks, and the published node metadata.
//!
//! This module is the tenant's trusted computing base. It depends only on
//! the fabric and identifier types; `isolation_has_no_service_dependencies`
//! in the tests keeps it that way.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{BootMode, BootPath, Fabric, FabricError, FirmwareKind, PowerCycle};
use crate::ids::{NetworkId, NicId, NodeId, ProjectId, VlanTag};
use crate::tpm::{Digest, EkPublic};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsolationError {
    #[error("capacity: {0}")]
    Capacity(String),
    #[error("authorization: {0}")]
    Authorization(String),
    #[error("state: {0}")]
    State(String),
    #[error("policy: {0}")]
    Policy(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
}

impl IsolationError {
    pub fn code(&self) -> &'static str {
        match self {
            IsolationError::Capacity(_) => "capacity",
            IsolationError::Authorization(_) => "authorization",
            IsolationError::State(_) => "state",
            IsolationError::Policy(_) => "policy",
            IsolationError::NotFound(_) => "not_found",
            IsolationError::Conflict(_) => "conflict",
        }
    }
}

impl From<FabricError> for IsolationError {
    fn from(err: FabricError) -> Self {
        match err {
            FabricError::NodeNotFound(id) => IsolationError::NotFound(id.to_string()),
            other => IsolationError::State(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, IsolationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationState {
    Free,
    Airlock,
    Allocated,
    Rejected,
}

impl AllocationState {
    pub const ALL: [AllocationState; 4] = [Self::Free, Self::Airlock, Self::Allocated, Self::Rejected];

    pub fn can_transition(self, to: AllocationState) -> bool {
        use AllocationState::*;
        matches!(
            (self, to),
            (Free, Airlock) | (Airlock, Allocated) | (Airlock, Rejected) | (Allocated, Free) | (Rejected, Free)
        )
    }
}

impl fmt::Display for AllocationState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            AllocationState::Free => "free",
            AllocationState::Airlock => "airlock",
            AllocationState::Allocated => "allocated",
            AllocationState::Rejected => "rejected",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkPurpose {
    Airlock,
    Enclave,
    ProvisioningAccess,
    /// Provider-owned network that tenants may attach to.
    Public,
    /// Provider-owned holding pen for rejected nodes.
    Quarantine,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Provider,
    Project(ProjectId),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Caller {
    Provider,
    Tenant(ProjectId),
}

impl Caller {
    pub fn tenant(name: &str) -> Self {
        Caller::Tenant(ProjectId::new(name))
    }
}

/// Provider-published facts about a node, readable by every tenant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMetadata {
    pub node_id: NodeId,
    pub ek_public: EkPublic,
    pub firmware: FirmwareKind,
    /// Expected register values once the provider-supplied stages have run.
    pub platform_pcr_whitelist: BTreeMap<usize, Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Network {
    pub id: NetworkId,
    pub vlan: VlanTag,
    pub owner: Owner,
    pub purpose: NetworkPurpose,
    /// Service attachment points, one switch port each.
    pub services: Vec<String>,
    pub members: BTreeSet<NicId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub state: AllocationState,
    pub owner: Option<ProjectId>,
    pub attachments: BTreeMap<NicId, NetworkId>,
    pub metadata: NodeMetadata,
    pub airlock_since: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationConfig {
    pub single_airlock: bool,
    /// Ticks a node may spend in the airlock before it is rejected.
    pub airlock_timeout: Option<u64>,
}

/// Name of the switch port a service uses on a given network.
pub fn service_port(service: &str, network: NetworkId) -> NicId {
    NicId(format!("svc/{service}/{network}"))
}

#[derive(Debug, Clone, Default)]
pub struct IsolationService {
    config: IsolationConfig,
    projects: BTreeSet<ProjectId>,
    nodes: BTreeMap<NodeId, NodeRecord>,
    networks: BTreeMap<NetworkId, Network>,
    next_network: u32,
    quarantine: Option<NetworkId>,
}

impl IsolationService {
    pub fn new(config: IsolationConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn config(&self) -> &IsolationConfig {
        &self.config
    }

    /// Provider setup: enrolls a physical node and its metadata.
    pub fn register_node(&mut self, metadata: NodeMetadata) {
        self.nodes.insert(
            metadata.node_id,
            NodeRecord {
                state: AllocationState::Free,
                owner: None,
                attachments: BTreeMap::new(),
                metadata,
                airlock_since: None,
            },
        );
    }

    pub fn create_project(&mut self, name: ProjectId) -> Result<()> {
        if !self.projects.insert(name.clone()) {
            return Err(IsolationError::Conflict(format!("project {name} exists")));
        }
        Ok(())
    }

    pub fn has_project(&self, name: &ProjectId) -> bool {
        self.projects.contains(name)
    }

    pub fn node(&self, id: NodeId) -> Result<&NodeRecord> {
        self.nodes.get(&id).ok_or_else(|| IsolationError::NotFound(id.to_string()))
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, NodeRecord> {
        &self.nodes
    }

    pub fn network(&self, id: NetworkId) -> Result<&Network> {
        self.networks.get(&id).ok_or_else(|| IsolationError::NotFound(id.to_string()))
    }

    pub fn networks(&self) -> &BTreeMap<NetworkId, Network> {
        &self.networks
    }

    pub fn metadata(&self, id: NodeId) -> Result<&NodeMetadata> {
        Ok(&self.node(id)?.metadata)
    }

    fn project_of(&self, caller: &Caller) -> Result<ProjectId> {
        match caller {
            Caller::Tenant(p) if self.projects.contains(p) => Ok(p.clone()),
            Caller::Tenant(p) => Err(IsolationError::Authorization(format!("unknown project {p}"))),
            Caller::Provider => Err(IsolationError::Authorization("operation needs a tenant project".into())),
        }
    }

    pub fn require_node_access(&self, caller: &Caller, id: NodeId) -> Result<&NodeRecord> {
        let record = self.node(id)?;
        match caller {
            Caller::Provider => Ok(record),
            Caller::Tenant(p) if record.owner.as_ref() == Some(p) => Ok(record),
            Caller::Tenant(p) => Err(IsolationError::Authorization(format!("{id} is not owned by {p}"))),
        }
    }

    /// Hands a free node to the caller's project. `None` picks the lowest
    /// free node id.
    pub fn allocate_node(&mut self, caller: &Caller, wanted: Option<NodeId>) -> Result<(NodeId, NodeMetadata)> {
        let project = self.project_of(caller)?;
        let available = |r: &NodeRecord| r.state == AllocationState::Free && r.owner.is_none();
        let id = match wanted {
            Some(id) => {
                if !available(self.node(id)?) {
                    return Err(IsolationError::State(format!("{id} is not in the free pool")));
                }
                id
            }
            None => *self
                .nodes
                .iter()
                .find(|(_, r)| available(r))
                .ok_or_else(|| IsolationError::Capacity("no free nodes".into()))?
                .0,
        };
        let record = self.nodes.get_mut(&id).expect("checked above");
        record.owner = Some(project);
        Ok((id, record.metadata.clone()))
    }

    fn lowest_free_vlan(&self) -> Result<VlanTag> {
        let used: BTreeSet<u16> = self.networks.values().map(|n| n.vlan.get()).collect();
        (VlanTag::MIN..=VlanTag::MAX)
            .find(|t| !used.contains(t))
            .and_then(VlanTag::new)
            .ok_or_else(|| IsolationError::Capacity("VLAN tag space exhausted".into()))
    }

    fn insert_network(
        &mut self,
        owner: Owner,
        purpose: NetworkPurpose,
        services: Vec<String>,
        fabric: &mut Fabric,
    ) -> Result<NetworkId> {
        let vlan = self.lowest_free_vlan()?;
        let id = NetworkId(self.next_network);
        self.next_network += 1;
        for service in &services {
            let port = service_port(service, id);
            fabric.add_port(port.clone());
            fabric.set_port_vlan(&port, Some(vlan))?;
        }
        self.networks.insert(
            id,
            Network {
                id,
                vlan,
                owner,
                purpose,
                services,
                members: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    pub fn create_network(
        &mut self,
        caller: &Caller,
        purpose: NetworkPurpose,
        services: Vec<String>,
        fabric: &mut Fabric,
    ) -> Result<NetworkId> {
        let owner = match (caller, purpose) {
            (Caller::Provider, NetworkPurpose::Public) => Owner::Provider,
            (Caller::Provider, _) => {
                return Err(IsolationError::Authorization(
                    "the provider only creates public networks".into(),
                ))
            }
            (_, NetworkPurpose::Public | NetworkPurpose::Quarantine) => {
                return Err(IsolationError::Authorization("provider-only network purpose".into()))
            }
            (tenant, _) => Owner::Project(self.project_of(tenant)?),
        };
        if purpose == NetworkPurpose::Airlock
            && self.config.single_airlock
            && self.networks.values().any(|n| n.purpose == NetworkPurpose::Airlock)
        {
            return Err(IsolationError::Capacity("only a single airlock may exist".into()));
        }
        self.insert_network(owner, purpose, services, fabric)
    }

    pub fn delete_network(&mut self, caller: &Caller, id: NetworkId, fabric: &mut Fabric) -> Result<()> {
        let network = self.network(id)?;
        let allowed = match (caller, &network.owner) {
            (Caller::Provider, _) => true,
            (Caller::Tenant(p), Owner::Project(o)) => p == o,
            (Caller::Tenant(_), Owner::Provider) => false,
        };
        if !allowed {
            return Err(IsolationError::Authorization(format!("{id} belongs to another owner")));
        }
        if !network.members.is_empty() {
            return Err(IsolationError::Conflict(format!("{id} still has attached nodes")));
        }
        let network = self.networks.remove(&id).expect("checked above");
        for service in &network.services {
            fabric.remove_port(&service_port(service, id));
        }
        if self.quarantine == Some(id) {
            self.quarantine = None;
        }
        Ok(())
    }

    fn nic_of(record: &NodeRecord, fabric: &Fabric, index: usize) -> Result<NicId> {
        let node = fabric.node(record.metadata.node_id)?;
        node.nics()
            .get(index)
            .cloned()
            .ok_or_else(|| IsolationError::NotFound(format!("{}/eth{index}", record.metadata.node_id)))
    }

    pub fn connect(
        &mut self,
        caller: &Caller,
        node: NodeId,
        nic_index: usize,
        network: NetworkId,
        fabric: &mut Fabric,
    ) -> Result<()> {
        let record = self.require_node_access(caller, node)?;
        let net = self.network(network)?;
        let owner_ok = match (&net.owner, &record.owner) {
            (Owner::Provider, _) => net.purpose == NetworkPurpose::Public || *caller == Caller::Provider,
            (Owner::Project(p), Some(o)) => p == o,
            (Owner::Project(_), None) => false,
        };
        if !owner_ok {
            return Err(IsolationError::Authorization(format!(
                "{node} and {network} belong to different projects"
            )));
        }
        use NetworkPurpose as P;
        let purpose_ok = match record.state {
            AllocationState::Free => matches!(net.purpose, P::Airlock | P::ProvisioningAccess),
            AllocationState::Airlock => net.purpose == P::Airlock,
            AllocationState::Allocated => matches!(net.purpose, P::Enclave | P::ProvisioningAccess | P::Public),
            AllocationState::Rejected => net.purpose == P::Quarantine,
        };
        if !purpose_ok {
            return Err(IsolationError::Policy(format!(
                "a node in {} state cannot join a {:?} network",
                record.state, net.purpose
            )));
        }
        let nic = Self::nic_of(record, fabric, nic_index)?;
        if record.attachments.contains_key(&nic) {
            return Err(IsolationError::Conflict(format!("{nic} is already attached")));
        }
        if net.purpose == NetworkPurpose::Airlock && !net.members.is_empty() {
            return Err(IsolationError::Policy(format!("airlock {network} already holds a node")));
        }
        let vlan = net.vlan;
        fabric.set_port_vlan(&nic, Some(vlan))?;
        self.networks.get_mut(&network).expect("exists").members.insert(nic.clone());
        self.nodes.get_mut(&node).expect("exists").attachments.insert(nic, network);
        Ok(())
    }

    pub fn detach(&mut self, caller: &Caller, node: NodeId, nic_index: usize, fabric: &mut Fabric) -> Result<()> {
        let record = self.require_node_access(caller, node)?;
        let nic = Self::nic_of(record, fabric, nic_index)?;
        let network = *record
            .attachments
            .get(&nic)
            .ok_or_else(|| IsolationError::State(format!("{nic} is not attached")))?;
        self.detach_nic(node, &nic, network, fabric)
    }

    fn detach_nic(&mut self, node: NodeId, nic: &NicId, network: NetworkId, fabric: &mut Fabric) -> Result<()> {
        fabric.set_port_vlan(nic, None)?;
        if let Some(net) = self.networks.get_mut(&network) {
            net.members.remove(nic);
        }
        self.nodes.get_mut(&node).expect("exists").attachments.remove(nic);
        Ok(())
    }

    fn detach_all(&mut self, node: NodeId, fabric: &mut Fabric) -> Result<()> {
        let attachments: Vec<_> = self.node(node)?.attachments.clone().into_iter().collect();
        for (nic, network) in attachments {
            self.detach_nic(node, &nic, network, fabric)?;
        }
        Ok(())
    }

    pub fn set_state(
        &mut self,
        caller: &Caller,
        node: NodeId,
        to: AllocationState,
        tick: u64,
        fabric: &mut Fabric,
    ) -> Result<()> {
        let record = self.require_node_access(caller, node)?;
        let from = record.state;
        if !from.can_transition(to) {
            return Err(IsolationError::State(format!("{from} -> {to} is not a legal transition")));
        }
        match (from, to) {
            (AllocationState::Free, AllocationState::Airlock) if record.owner.is_none() => {
                return Err(IsolationError::State(format!("{node} must be allocated first")));
            }
            (AllocationState::Free, AllocationState::Airlock) => {
                let stray = record
                    .attachments
                    .values()
                    .any(|n| self.networks.get(n).map(|n| n.purpose) != Some(NetworkPurpose::Airlock));
                if stray {
                    return Err(IsolationError::Policy(format!(
                        "{node} may only be attached to its airlock"
                    )));
                }
            }
            (AllocationState::Airlock, AllocationState::Allocated) if !record.attachments.is_empty() => {
                return Err(IsolationError::Policy(format!("detach {node} from its airlock first")));
            }
            (AllocationState::Allocated, AllocationState::Free) => {
                if !record.attachments.is_empty() {
                    return Err(IsolationError::Policy(format!("{node} is still attached to tenant networks")));
                }
                if !fabric.node(node)?.scrub_complete() {
                    return Err(IsolationError::Policy(format!("{node} memory has not been scrubbed")));
                }
            }
            (AllocationState::Rejected, AllocationState::Free) => {
                return Err(IsolationError::Policy(format!(
                    "{node} leaves the rejected pool only through provider remediation"
                )));
            }
            _ => {}
        }

        match to {
            AllocationState::Rejected => self.quarantine_node(node, fabric)?,
            AllocationState::Free => {
                let record = self.nodes.get_mut(&node).expect("exists");
                record.owner = None;
            }
            _ => {}
        }
        let record = self.nodes.get_mut(&node).expect("exists");
        record.state = to;
        record.airlock_since = (to == AllocationState::Airlock).then_some(tick);
        Ok(())
    }

    fn quarantine_node(&mut self, node: NodeId, fabric: &mut Fabric) -> Result<()> {
        self.detach_all(node, fabric)?;
        let quarantine = match self.quarantine {
            Some(id) => id,
            None => {
                let id = self.insert_network(Owner::Provider, NetworkPurpose::Quarantine, Vec::new(), fabric)?;
                self.quarantine = Some(id);
                id
            }
        };
        let record = self.nodes.get_mut(&node).expect("exists");
        record.owner = None;
        let nic = Self::nic_of(record, fabric, 0)?;
        let vlan = self.networks[&quarantine].vlan;
        fabric.set_port_vlan(&nic, Some(vlan))?;
        self.networks.get_mut(&quarantine).expect("exists").members.insert(nic.clone());
        self.nodes.get_mut(&node).expect("exists").attachments.insert(nic, quarantine);
        Ok(())
    }

    /// Provider-only: reflash a rejected node with known-good firmware, scrub
    /// it and return it to the free pool.
    pub fn remediate(&mut self, caller: &Caller, node: NodeId, known_good: BootPath, fabric: &mut Fabric) -> Result<()> {
        if *caller != Caller::Provider {
            return Err(IsolationError::Authorization("remediation is provider-only".into()));
        }
        if self.node(node)?.state != AllocationState::Rejected {
            return Err(IsolationError::State(format!("{node} is not in the rejected pool")));
        }
        self.detach_all(node, fabric)?;
        let hw = fabric.node_mut(node)?;
        hw.set_boot_path(known_good);
        hw.zero_memory();
        let record = self.nodes.get_mut(&node).expect("exists");
        record.state = AllocationState::Free;
        record.owner = None;
        Ok(())
    }

    /// BMC proxy. The boot mode is applied to the node before it cycles.
    pub fn power_cycle(&mut self, caller: &Caller, node: NodeId, mode: BootMode, fabric: &mut Fabric) -> Result<PowerCycle> {
        self.require_node_access(caller, node)?;
        fabric.node_mut(node)?.set_boot_mode(mode);
        Ok(fabric.power_cycle(node)?)
    }

    /// Rejects every node that has overstayed its airlock. Returns them.
    pub fn expire_airlocks(&mut self, tick: u64, fabric: &mut Fabric) -> Vec<NodeId> {
        let Some(timeout) = self.config.airlock_timeout else {
            return Vec::new();
        };
        let expired: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|(_, r)| r.state == AllocationState::Airlock)
            .filter(|(_, r)| r.airlock_since.is_some_and(|since| tick >= since + timeout))
            .map(|(id, _)| *id)
            .collect();
        for id in &expired {
            self.set_state(&Caller::Provider, *id, AllocationState::Rejected, tick, fabric)
                .expect("airlock -> rejected is always legal");
        }
        expired
    }

    /// The network a NIC is attached to, if any.
    pub fn attachment(&self, node: NodeId, nic: &NicId) -> Option<NetworkId> {
        self.nodes.get(&node)?.attachments.get(nic).copied()
    }
}
