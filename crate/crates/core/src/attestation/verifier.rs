// SPDX-License-Identifier: Apache-2.0

//! The verifier: polls agents for quotes, decides verdicts, releases
//! payloads after the first PASS and fans revocations out to peers.

use std::collections::{BTreeMap, HashSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::registrar::Registrar;
use super::{AgentId, AgentRegistration, AttestationError, BootWhitelist, MeasurementList, Payload, RuntimeWhitelist, SealedKey};
use crate::crypto::SymmetricKey;
use crate::ids::NodeId;
use crate::tpm::{composite_of, make_credential, AikPublic, Credential, Digest, EkPublic, Nonce, PcrSelection, Quote, QuoteError, PCR_RUNTIME};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Passed,
    Failed,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cause {
    /// Signed register values differ from the whitelist.
    QuoteMismatch,
    BadQuote { reason: String },
    Replay,
    Timeout,
    /// The certified identity is not the one the tenant expected.
    Identity,
    Unlisted { path: String, sha256: Digest },
    /// The measurement list does not fold to the quoted register.
    ListMismatch,
    Manual,
    Retired,
}

impl From<QuoteError> for Cause {
    fn from(err: QuoteError) -> Self {
        match err {
            QuoteError::CompositeMismatch => Cause::QuoteMismatch,
            other => Cause::BadQuote {
                reason: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkError(pub String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeerNotice {
    Revoked { node: NodeId },
    PeerAdded { node: NodeId, key: SealedKey },
}

/// The verifier's view of the network: how it reaches agents.
pub trait AgentLink {
    fn quote(&mut self, node: NodeId, nonce: Nonce, selection: &PcrSelection) -> Result<(Quote, MeasurementList), LinkError>;
    /// Sends the bundle sealed under `key`, with `credential` wrapping `key`
    /// to the node's TPM.
    fn deliver(&mut self, node: NodeId, credential: Credential, bundle: &[u8], key: &SymmetricKey) -> Result<(), LinkError>;
    fn notify(&mut self, peer: NodeId, notice: PeerNotice) -> Result<(), LinkError>;
}

/// Something the verifier did that belongs in the event trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Notice {
    pub event: &'static str,
    pub node: NodeId,
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationReport {
    pub revoked_at: u64,
    pub cause: Cause,
    /// Tick at which each notified peer confirmed key deletion.
    pub peers: BTreeMap<NodeId, Option<u64>>,
}

#[derive(Debug, Clone)]
struct Record {
    agent_id: AgentId,
    node: NodeId,
    group: Option<String>,
    expected_ek: EkPublic,
    boot_whitelist: BootWhitelist,
    runtime_whitelist: Option<RuntimeWhitelist>,
    poll_interval: u64,
    peer_updates: BTreeMap<NodeId, SealedKey>,
    aik: Option<AikPublic>,
    status: Status,
    cause: Option<Cause>,
    misses: u32,
    registered_at: u64,
    sealed_bundle: Vec<u8>,
    bootstrap_key: Option<SymmetricKey>,
    delivered: bool,
    passed_at: Option<u64>,
    revocation: Option<RevocationReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusView {
    pub agent_id: AgentId,
    pub node: NodeId,
    pub group: Option<String>,
    pub status: Status,
    pub cause: Option<Cause>,
    pub poll_interval: u64,
    pub delivered: bool,
    pub passed_at: Option<u64>,
    pub revocation: Option<RevocationReport>,
    #[serde(with = "hex")]
    pub sealed_payload: Vec<u8>,
}

/// Ticks a pending agent may take to enroll with the registrar.
pub const ENROLLMENT_WINDOW: u64 = 64;

#[derive(Debug, Clone)]
pub struct Verifier {
    grace: u32,
    records: BTreeMap<AgentId, Record>,
    accepted: HashSet<[u8; 64]>,
}

fn bundle_aad(agent: &AgentId) -> Vec<u8> {
    [b"bolted/payload/".as_slice(), agent.0.as_bytes()].concat()
}

fn random_seed(rng: &mut dyn RngCore) -> [u8; 32] {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    seed
}

impl Verifier {
    pub fn new(grace: u32) -> Self {
        Self {
            grace: grace.max(1),
            records: BTreeMap::new(),
            accepted: HashSet::new(),
        }
    }

    /// Accepts a new agent. The payload is sealed at rest under a fresh
    /// bootstrap key; the plaintext is not retained. Returns the tick of the
    /// first poll.
    pub fn register(&mut self, registration: AgentRegistration, tick: u64, rng: &mut dyn RngCore) -> Result<u64, AttestationError> {
        if let Some(existing) = self.records.get(&registration.agent_id) {
            if matches!(existing.status, Status::Pending | Status::Passed) {
                return Err(AttestationError::Conflict(format!("{} is already enrolled", registration.agent_id)));
            }
        }
        if registration.poll_interval == 0 {
            return Err(AttestationError::Policy("poll interval must be at least one tick".into()));
        }
        let key = SymmetricKey::generate(rng);
        let plaintext = serde_json::to_vec(&registration.payload).expect("payload serializes");
        let sealed_bundle = key.seal_random(rng, &bundle_aad(&registration.agent_id), &plaintext);
        let record = Record {
            agent_id: registration.agent_id.clone(),
            node: registration.node,
            group: registration.group,
            expected_ek: registration.expected_ek,
            boot_whitelist: registration.boot_whitelist,
            runtime_whitelist: registration.runtime_whitelist,
            poll_interval: registration.poll_interval,
            peer_updates: registration.peer_updates,
            aik: None,
            status: Status::Pending,
            cause: None,
            misses: 0,
            registered_at: tick,
            sealed_bundle,
            bootstrap_key: Some(key),
            delivered: false,
            passed_at: None,
            revocation: None,
        };
        self.records.insert(registration.agent_id, record);
        Ok(tick + 1)
    }

    pub fn status(&self, agent: &AgentId) -> Result<StatusView, AttestationError> {
        let r = self
            .records
            .get(agent)
            .ok_or_else(|| AttestationError::NotFound(agent.to_string()))?;
        Ok(StatusView {
            agent_id: r.agent_id.clone(),
            node: r.node,
            group: r.group.clone(),
            status: r.status,
            cause: r.cause.clone(),
            poll_interval: r.poll_interval,
            delivered: r.delivered,
            passed_at: r.passed_at,
            revocation: r.revocation.clone(),
            sealed_payload: r.sealed_bundle.clone(),
        })
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentId> {
        self.records.keys()
    }

    /// Full quote check: signature, nonce, selection, composite, and the
    /// replay cache. Accepted quotes enter the cache.
    pub fn check_quote(
        &mut self,
        aik: &AikPublic,
        nonce: &Nonce,
        selection: &PcrSelection,
        expected_composite: &Digest,
        quote: &Quote,
    ) -> Result<(), Cause> {
        quote.verify_against(aik, nonce, selection, expected_composite)?;
        if !self.accepted.insert(quote.signature) {
            return Err(Cause::Replay);
        }
        Ok(())
    }

    fn group_peers(&self, agent: &AgentId) -> Vec<NodeId> {
        let Some(me) = self.records.get(agent) else {
            return Vec::new();
        };
        let Some(group) = &me.group else {
            return Vec::new();
        };
        let mut peers: Vec<NodeId> = self
            .records
            .values()
            .filter(|r| r.group.as_ref() == Some(group) && r.node != me.node)
            .filter(|r| r.status == Status::Passed && r.delivered)
            .map(|r| r.node)
            .collect();
        peers.sort();
        peers.dedup();
        peers
    }

    /// Runs one scheduled poll. Returns trace notices and the next poll tick.
    pub fn poll(
        &mut self,
        agent: &AgentId,
        tick: u64,
        registrar: &Registrar,
        link: &mut dyn AgentLink,
        rng: &mut dyn RngCore,
    ) -> (Vec<Notice>, Option<u64>) {
        let Some(record) = self.records.get(agent) else {
            return (Vec::new(), None);
        };
        let mut notices = Vec::new();
        match record.status {
            Status::Pending => self.poll_boot(agent, tick, registrar, link, rng, &mut notices),
            Status::Passed if !record.delivered => self.deliver(agent, link, rng, &mut notices),
            Status::Passed if record.runtime_whitelist.is_some() => self.poll_runtime(agent, tick, link, rng, &mut notices),
            _ => {}
        }
        let record = &self.records[agent];
        let again = match record.status {
            Status::Pending => true,
            Status::Passed => !record.delivered || record.runtime_whitelist.is_some(),
            _ => false,
        };
        (notices, again.then_some(tick + record.poll_interval))
    }

    fn miss(&mut self, agent: &AgentId, tick: u64, reason: String, link: &mut dyn AgentLink, notices: &mut Vec<Notice>) {
        let grace = self.grace;
        let record = self.records.get_mut(agent).expect("polled record exists");
        record.misses += 1;
        notices.push(Notice {
            event: "agent_unreachable",
            node: record.node,
            detail: json!({"agent": agent, "misses": record.misses, "reason": reason}),
        });
        if record.misses < grace {
            return;
        }
        match record.status {
            Status::Pending => self.fail(agent, Cause::Timeout, notices),
            Status::Passed => notices.extend(self.revoke(agent, tick, Cause::Timeout, link)),
            _ => {}
        }
    }

    fn fail(&mut self, agent: &AgentId, cause: Cause, notices: &mut Vec<Notice>) {
        let record = self.records.get_mut(agent).expect("polled record exists");
        record.status = Status::Failed;
        record.bootstrap_key = None;
        notices.push(Notice {
            event: "boot_verdict",
            node: record.node,
            detail: json!({"agent": agent, "verdict": "fail", "cause": cause}),
        });
        record.cause = Some(cause);
    }

    fn poll_boot(
        &mut self,
        agent: &AgentId,
        tick: u64,
        registrar: &Registrar,
        link: &mut dyn AgentLink,
        rng: &mut dyn RngCore,
        notices: &mut Vec<Notice>,
    ) {
        let record = &self.records[agent];
        let node = record.node;
        let Some(registered) = registrar.get(agent).filter(|r| r.certified) else {
            // The node is still in early firmware; only a missed deadline counts.
            if tick.saturating_sub(record.registered_at) > ENROLLMENT_WINDOW {
                self.fail(agent, Cause::Timeout, notices);
            }
            return;
        };
        if registered.ek != record.expected_ek || registered.node != node {
            self.fail(agent, Cause::Identity, notices);
            return;
        }
        notices.push(Notice {
            event: "security_check",
            node,
            detail: json!({"check": "ek_identity", "agent": agent}),
        });
        let aik = registered.aik;
        let selection = record.boot_whitelist.selection();
        let expected = record.boot_whitelist.composite();
        let nonce = Nonce::random(rng);
        let quote = match link.quote(node, nonce, &selection) {
            Ok((quote, _)) => quote,
            Err(LinkError(reason)) => {
                self.miss(agent, tick, reason, link, notices);
                return;
            }
        };
        notices.push(Notice {
            event: "security_check",
            node,
            detail: json!({"check": "boot_quote", "agent": agent}),
        });
        match self.check_quote(&aik, &nonce, &selection, &expected, &quote) {
            Ok(()) => {
                let record = self.records.get_mut(agent).expect("exists");
                record.misses = 0;
                record.status = Status::Passed;
                record.aik = Some(aik);
                record.passed_at = Some(tick);
                notices.push(Notice {
                    event: "boot_verdict",
                    node,
                    detail: json!({"agent": agent, "verdict": "pass", "composite": quote.composite}),
                });
                self.deliver(agent, link, rng, notices);
            }
            Err(cause) => self.fail(agent, cause, notices),
        }
    }

    fn deliver(&mut self, agent: &AgentId, link: &mut dyn AgentLink, rng: &mut dyn RngCore, notices: &mut Vec<Notice>) {
        let peers = self.group_peers(agent);
        let record = self.records.get_mut(agent).expect("exists");
        let (Some(key), Some(aik)) = (record.bootstrap_key.clone(), record.aik) else {
            return;
        };
        let bundle = key
            .open(&bundle_aad(agent), &record.sealed_bundle)
            .expect("the verifier sealed this bundle itself");
        let credential = make_credential(&record.expected_ek, &aik, key.as_bytes(), random_seed(rng));
        if let Err(LinkError(reason)) = link.deliver(record.node, credential, &bundle, &key) {
            notices.push(Notice {
                event: "payload_delivery_failed",
                node: record.node,
                detail: json!({"agent": agent, "reason": reason}),
            });
            return;
        }
        record.delivered = true;
        record.bootstrap_key = None;
        let node = record.node;
        notices.push(Notice {
            event: "payload_delivered",
            node,
            detail: json!({"agent": agent}),
        });
        let updates = record.peer_updates.clone();
        for peer in peers {
            if let Some(sealed) = updates.get(&peer) {
                let notice = PeerNotice::PeerAdded {
                    node,
                    key: sealed.clone(),
                };
                let ok = link.notify(peer, notice).is_ok();
                notices.push(Notice {
                    event: "peer_add_sent",
                    node: peer,
                    detail: json!({"joined": node, "delivered": ok}),
                });
            }
        }
    }

    fn poll_runtime(&mut self, agent: &AgentId, tick: u64, link: &mut dyn AgentLink, rng: &mut dyn RngCore, notices: &mut Vec<Notice>) {
        let record = &self.records[agent];
        let node = record.node;
        let aik = record.aik.expect("passed records have an AIK");
        let selection = PcrSelection::new([PCR_RUNTIME]).expect("valid register");
        let nonce = Nonce::random(rng);
        let (quote, list) = match link.quote(node, nonce, &selection) {
            Ok(response) => response,
            Err(LinkError(reason)) => {
                self.miss(agent, tick, reason, link, notices);
                return;
            }
        };
        let expected = composite_of([&list.aggregate()]);
        let outcome = self.check_quote(&aik, &nonce, &selection, &expected, &quote).map_err(|cause| match cause {
            Cause::QuoteMismatch => Cause::ListMismatch,
            other => other,
        });
        let record = self.records.get_mut(agent).expect("exists");
        record.misses = 0;
        let violation = match outcome {
            Err(cause) => Some(cause),
            Ok(()) => record
                .runtime_whitelist
                .as_ref()
                .and_then(|wl| wl.first_violation(&list))
                .map(|e| Cause::Unlisted {
                    path: e.path.clone(),
                    sha256: e.sha256,
                }),
        };
        notices.push(Notice {
            event: "runtime_verdict",
            node,
            detail: json!({
                "agent": agent,
                "verdict": if violation.is_none() { "pass" } else { "fail" },
                "entries": list.len(),
            }),
        });
        if let Some(cause) = violation {
            notices.extend(self.revoke(agent, tick, cause, link));
        }
    }

    /// Revokes an agent and tells its enclave peers, in ascending node
    /// order, to drop their keys for it. Repeated calls do nothing.
    pub fn revoke(&mut self, agent: &AgentId, tick: u64, cause: Cause, link: &mut dyn AgentLink) -> Vec<Notice> {
        let peers = self.group_peers(agent);
        let Some(record) = self.records.get_mut(agent) else {
            return Vec::new();
        };
        if record.status == Status::Revoked {
            return Vec::new();
        }
        let was_member = record.status == Status::Passed && record.delivered;
        record.status = Status::Revoked;
        record.cause = Some(cause.clone());
        record.bootstrap_key = None;
        let node = record.node;
        let mut report = RevocationReport {
            revoked_at: tick,
            cause: cause.clone(),
            peers: BTreeMap::new(),
        };
        let mut notices = vec![Notice {
            event: "revocation",
            node,
            detail: json!({"agent": agent, "cause": cause, "peers": if was_member { peers.clone() } else { Vec::new() }}),
        }];
        if was_member {
            for peer in peers {
                let delivered = link.notify(peer, PeerNotice::Revoked { node }).is_ok();
                report.peers.insert(peer, None);
                if !delivered {
                    notices.push(Notice {
                        event: "revocation_notice_failed",
                        node: peer,
                        detail: json!({"revoked": node}),
                    });
                }
            }
        }
        self.records.get_mut(agent).expect("exists").revocation = Some(report);
        notices
    }

    /// A peer confirms it deleted its keys for the revoked node.
    pub fn acknowledge_revocation(&mut self, revoked: NodeId, peer: NodeId, tick: u64) {
        for record in self.records.values_mut().filter(|r| r.node == revoked) {
            if let Some(slot) = record.revocation.as_mut().and_then(|r| r.peers.get_mut(&peer)) {
                slot.get_or_insert(tick);
            }
        }
    }

    /// Drops a record entirely. Callers revoke first if peers must forget it.
    pub fn remove(&mut self, agent: &AgentId) -> Result<(), AttestationError> {
        self.records
            .remove(agent)
            .map(|_| ())
            .ok_or_else(|| AttestationError::NotFound(agent.to_string()))
    }
}

impl Payload {
    pub fn open(bundle: &[u8]) -> Option<Payload> {
        serde_json::from_slice(bundle).ok()
    }
}
