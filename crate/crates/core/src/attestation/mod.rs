// SPDX-License-Identifier: Apache-2.0

//! Remote attestation: a registrar that certifies AIKs against EKs, and a
//! verifier that checks boot and runtime quotes, releases the tenant payload
//! and revokes misbehaving nodes.
//!
//! The same code serves the provider-run instance and tenant-run instances.

pub mod ima;
pub mod registrar;
pub mod verifier;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::SymmetricKey;
use crate::ids::NodeId;
use crate::tpm::{composite_of, Digest, PcrSelection};

pub use ima::{MeasurementEntry, MeasurementList, RuntimeWhitelist};
pub use registrar::Registrar;
pub use verifier::{AgentLink, Cause, LinkError, Notice, PeerNotice, Status, Verifier};

/// Default number of silent polls tolerated before silence is a violation.
pub const DEFAULT_GRACE: u32 = 3;
pub const DEFAULT_POLL_INTERVAL: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub String);

impl AgentId {
    pub fn for_node(node: NodeId) -> Self {
        AgentId(format!("agent-{}", node.0))
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestationError {
    #[error("spoofing alarm: {node} presented EK {presented}, which differs from its published metadata")]
    Spoofing { node: NodeId, presented: String },
    #[error("certification denied for {0}")]
    CertificationDenied(AgentId),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("policy: {0}")]
    Policy(String),
    #[error("conflict: {0}")]
    Conflict(String),
}

impl AttestationError {
    pub fn code(&self) -> &'static str {
        match self {
            AttestationError::Spoofing { .. } | AttestationError::CertificationDenied(_) => "authorization",
            AttestationError::NotFound(_) => "not_found",
            AttestationError::Policy(_) => "policy",
            AttestationError::Conflict(_) => "conflict",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ProviderPublished,
    TenantBuilt,
}

/// Expected boot-time register values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootWhitelist {
    pub expected: BTreeMap<usize, Digest>,
    pub provenance: Provenance,
}

impl BootWhitelist {
    pub fn selection(&self) -> PcrSelection {
        PcrSelection::new(self.expected.keys().copied()).expect("whitelist covers valid registers")
    }

    pub fn composite(&self) -> Digest {
        composite_of(self.expected.values())
    }
}

/// What the tenant hands to a node once it has proven its boot state.
#[derive(Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    #[serde(with = "hex")]
    pub kernel: Vec<u8>,
    #[serde(with = "hex")]
    pub initrd: Vec<u8>,
    pub cmdline: String,
    pub script: String,
    #[serde(default)]
    pub disk_key: Option<SymmetricKey>,
    #[serde(default)]
    pub network_key: Option<SymmetricKey>,
    /// Pairwise session keys shared with current enclave members.
    #[serde(default)]
    pub peers: BTreeMap<NodeId, SymmetricKey>,
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Payload")
            .field("kernel", &Digest::of(&self.kernel))
            .field("initrd", &Digest::of(&self.initrd))
            .field("cmdline", &self.cmdline)
            .field("disk_key", &self.disk_key.is_some())
            .field("network_key", &self.network_key.is_some())
            .field("peers", &self.peers.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Body of a verifier enrollment request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentRegistration {
    pub agent_id: AgentId,
    pub node: NodeId,
    /// The EK the tenant learned from the isolation service at allocation.
    pub expected_ek: crate::tpm::EkPublic,
    pub boot_whitelist: BootWhitelist,
    #[serde(default)]
    pub runtime_whitelist: Option<RuntimeWhitelist>,
    #[serde(default = "default_poll_interval")]
    pub poll_interval: u64,
    /// Enclave the node joins; revocations fan out within it.
    #[serde(default)]
    pub group: Option<String>,
    pub payload: Payload,
    /// Per existing member: the new pairwise key sealed under that member's
    /// network key, forwarded once this node passes.
    #[serde(default)]
    pub peer_updates: BTreeMap<NodeId, SealedKey>,
}

fn default_poll_interval() -> u64 {
    DEFAULT_POLL_INTERVAL
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SealedKey(#[serde(with = "hex")] pub Vec<u8>);

impl fmt::Debug for SealedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SealedKey({} bytes)", self.0.len())
    }
}

const PEER_KEY_AAD: &[u8] = b"bolted/peer-key";

impl SealedKey {
    pub fn seal(wrapping: &SymmetricKey, key: &SymmetricKey, nonce: [u8; 12]) -> Self {
        SealedKey(wrapping.seal(nonce, PEER_KEY_AAD, key.as_bytes()))
    }

    pub fn open(&self, wrapping: &SymmetricKey) -> Option<SymmetricKey> {
        let bytes = wrapping.open(PEER_KEY_AAD, &self.0).ok()?;
        Some(SymmetricKey::from_bytes(bytes.try_into().ok()?))
    }
}
