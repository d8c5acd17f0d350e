// SPDX-License-Identifier: Apache-2.0

//! The emulated datacenter hardware: nodes with memory, NICs and a TPM, an
//! access-port VLAN switch, BMC power control and a provider-side tap that
//! records every frame the switch sees.

pub mod clock;
pub mod trace;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoError, KeyId, SymmetricKey, NONCE_LEN};
use crate::ids::{NicId, NodeId, VlanTag};
use crate::tpm::Tpm;

pub use clock::{LogicalClock, Scheduler};
pub use trace::{TraceEvent, TraceLog};

pub const DEFAULT_MEMORY_BYTES: usize = 64 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("{0} not found")]
    NodeNotFound(NodeId),
    #[error("link down: {0} is not attached to a switch port")]
    LinkDown(NicId),
    #[error("memory access {offset}+{len} outside {size}-byte region")]
    MemoryRange { offset: usize, len: usize, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirmwareKind {
    /// UEFI in flash, network-booting iPXE and then the LinuxBoot runtime.
    UefiChain,
    /// LinuxBoot burned directly into SPI flash.
    LinuxbootFlash,
}

/// SPI flash contents. For `LinuxbootFlash` the runtime lives inside `post`
/// and `pxe` is empty.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashImage {
    pub kind: FirmwareKind,
    #[serde(with = "hex")]
    pub post: Vec<u8>,
    #[serde(with = "hex")]
    pub pxe: Vec<u8>,
}

impl std::fmt::Debug for FlashImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlashImage")
            .field("kind", &self.kind)
            .field("post_len", &self.post.len())
            .field("pxe_len", &self.pxe.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootPath {
    None,
    Flash(FlashImage),
}

/// Selected through the BMC before a power cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootMode {
    /// Firmware hands over to the attestation agent and waits for a verdict.
    #[default]
    Attested,
    /// Firmware boots the tenant kernel from the provisioning service directly.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Power {
    Off,
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerCycle {
    /// The node went off and on; its boot path runs at the next tick.
    Started { epoch: u64 },
    /// A cycle is already pending; this one runs after it.
    Queued,
}

#[derive(Clone)]
pub struct EmulatedNode {
    id: NodeId,
    power: Power,
    memory: Vec<u8>,
    nics: Vec<NicId>,
    pub tpm: Tpm,
    boot_path: BootPath,
    boot_mode: BootMode,
    scrub_complete: bool,
    local_disk: Option<Vec<u8>>,
    epoch: u64,
    boot_pending: bool,
    queued_cycles: u32,
}

impl EmulatedNode {
    pub fn new(id: NodeId, tpm: Tpm, boot_path: BootPath, memory_bytes: usize, nic_count: usize) -> Self {
        Self {
            id,
            power: Power::Off,
            memory: vec![0; memory_bytes],
            nics: (0..nic_count.max(1)).map(|i| NicId::node_nic(id, i)).collect(),
            tpm,
            boot_path,
            boot_mode: BootMode::Attested,
            scrub_complete: true,
            local_disk: None,
            epoch: 0,
            boot_pending: false,
            queued_cycles: 0,
        }
    }

    pub fn with_local_disk(mut self, bytes: usize) -> Self {
        self.local_disk = Some(vec![0; bytes]);
        self
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn power(&self) -> Power {
        self.power
    }

    pub fn nics(&self) -> &[NicId] {
        &self.nics
    }

    pub fn primary_nic(&self) -> &NicId {
        &self.nics[0]
    }

    pub fn boot_path(&self) -> &BootPath {
        &self.boot_path
    }

    /// Provider-only: replaces the flash contents.
    pub fn set_boot_path(&mut self, path: BootPath) {
        self.boot_path = path;
    }

    pub fn boot_mode(&self) -> BootMode {
        self.boot_mode
    }

    pub fn set_boot_mode(&mut self, mode: BootMode) {
        self.boot_mode = mode;
    }

    /// Power-on counter; volatile state from older epochs is stale.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn memory_size(&self) -> usize {
        self.memory.len()
    }

    pub fn memory(&self) -> &[u8] {
        &self.memory
    }

    pub fn read_memory(&self, offset: usize, len: usize) -> Result<&[u8], FabricError> {
        let end = offset.checked_add(len).filter(|&e| e <= self.memory.len());
        match end {
            Some(end) => Ok(&self.memory[offset..end]),
            None => Err(FabricError::MemoryRange {
                offset,
                len,
                size: self.memory.len(),
            }),
        }
    }

    pub fn write_memory(&mut self, offset: usize, bytes: &[u8]) -> Result<(), FabricError> {
        let size = self.memory.len();
        let end = offset
            .checked_add(bytes.len())
            .filter(|&e| e <= size)
            .ok_or(FabricError::MemoryRange {
                offset,
                len: bytes.len(),
                size,
            })?;
        self.memory[offset..end].copy_from_slice(bytes);
        if bytes.iter().any(|&b| b != 0) {
            self.scrub_complete = false;
        }
        Ok(())
    }

    /// Zeroes all of memory and raises the scrub-complete flag. Policy about
    /// who may call this lives in the boot chain.
    pub fn zero_memory(&mut self) {
        self.memory.fill(0);
        self.scrub_complete = true;
    }

    pub fn scrub_complete(&self) -> bool {
        self.scrub_complete
    }

    pub fn local_disk(&self) -> Option<&[u8]> {
        self.local_disk.as_deref()
    }
}

impl std::fmt::Debug for EmulatedNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmulatedNode")
            .field("id", &self.id)
            .field("power", &self.power)
            .field("nics", &self.nics)
            .field("epoch", &self.epoch)
            .field("scrub_complete", &self.scrub_complete)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Nic(NicId),
    Broadcast,
}

impl std::fmt::Display for Destination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Destination::Nic(nic) => nic.fmt(f),
            Destination::Broadcast => f.write_str("broadcast"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub src: NicId,
    pub dst: Destination,
    #[serde(with = "hex")]
    pub payload: Vec<u8>,
    /// Set when the payload is sealed under the identified key.
    pub key: Option<KeyId>,
}

impl Frame {
    pub fn plain(src: NicId, dst: Destination, payload: Vec<u8>) -> Self {
        Self {
            src,
            dst,
            payload,
            key: None,
        }
    }

    pub fn sealed(src: NicId, dst: Destination, key: &SymmetricKey, nonce: [u8; NONCE_LEN], plaintext: &[u8]) -> Self {
        let aad = frame_aad(&src, &dst);
        Self {
            payload: key.seal(nonce, aad.as_bytes(), plaintext),
            key: Some(key.id()),
            src,
            dst,
        }
    }

    pub fn is_encrypted(&self) -> bool {
        self.key.is_some()
    }

    /// Recovers the plaintext of a sealed frame.
    pub fn open(&self, key: &SymmetricKey) -> Result<Vec<u8>, CryptoError> {
        key.open(frame_aad(&self.src, &self.dst).as_bytes(), &self.payload)
    }
}

fn frame_aad(src: &NicId, dst: &Destination) -> String {
    format!("frame:{src}>{dst}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    Delivered,
    IsolationDrop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapRecord {
    pub seq: u64,
    pub tick: u64,
    pub frame: Frame,
    pub vlan: Option<VlanTag>,
    pub delivery: Delivery,
}

/// Who is reading the provider tap.
#[derive(Debug, Clone)]
pub enum Observer {
    Provider,
    KeyHolder(Vec<SymmetricKey>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observed {
    pub seq: u64,
    pub encrypted: bool,
    /// The bytes as they crossed the wire.
    pub wire: Vec<u8>,
    /// Plaintext, when the observer can recover it.
    pub plaintext: Option<Vec<u8>>,
}

/// Access-port switch: each port carries at most one VLAN tag.
#[derive(Debug, Clone, Default)]
pub struct Switch {
    ports: BTreeMap<NicId, Option<VlanTag>>,
}

impl Switch {
    pub fn add_port(&mut self, nic: NicId) {
        self.ports.entry(nic).or_insert(None);
    }

    pub fn has_port(&self, nic: &NicId) -> bool {
        self.ports.contains_key(nic)
    }

    pub fn vlan(&self, nic: &NicId) -> Option<VlanTag> {
        self.ports.get(nic).copied().flatten()
    }

    pub fn set_vlan(&mut self, nic: &NicId, tag: Option<VlanTag>) -> Result<(), FabricError> {
        let port = self.ports.get_mut(nic).ok_or_else(|| FabricError::LinkDown(nic.clone()))?;
        *port = tag;
        Ok(())
    }

    pub fn ports_in(&self, tag: VlanTag) -> impl Iterator<Item = &NicId> {
        self.ports
            .iter()
            .filter(move |(_, t)| **t == Some(tag))
            .map(|(nic, _)| nic)
    }

    pub fn can_reach(&self, a: &NicId, b: &NicId) -> bool {
        match (self.vlan(a), self.vlan(b)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Fabric {
    clock: LogicalClock,
    nodes: BTreeMap<NodeId, EmulatedNode>,
    switch: Switch,
    tap: Vec<TapRecord>,
    inboxes: BTreeMap<NicId, VecDeque<Frame>>,
}

impl Fabric {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn clock_mut(&mut self) -> &mut LogicalClock {
        &mut self.clock
    }

    pub fn add_node(&mut self, node: EmulatedNode) {
        for nic in node.nics() {
            self.switch.add_port(nic.clone());
        }
        self.nodes.insert(node.id(), node);
    }

    pub fn node(&self, id: NodeId) -> Result<&EmulatedNode, FabricError> {
        self.nodes.get(&id).ok_or(FabricError::NodeNotFound(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut EmulatedNode, FabricError> {
        self.nodes.get_mut(&id).ok_or(FabricError::NodeNotFound(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &EmulatedNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn node_of_nic(&self, nic: &NicId) -> Option<NodeId> {
        self.nodes.values().find(|n| n.nics.contains(nic)).map(|n| n.id)
    }

    pub fn switch(&self) -> &Switch {
        &self.switch
    }

    pub fn add_port(&mut self, nic: NicId) {
        self.switch.add_port(nic);
    }

    pub fn remove_port(&mut self, nic: &NicId) {
        self.switch.ports.remove(nic);
        self.inboxes.remove(nic);
    }

    pub fn set_port_vlan(&mut self, nic: &NicId, tag: Option<VlanTag>) -> Result<(), FabricError> {
        self.switch.set_vlan(nic, tag)
    }

    /// Node-level reachability: some NIC of `a` shares a VLAN with some NIC of `b`.
    pub fn nodes_can_reach(&self, a: NodeId, b: NodeId) -> bool {
        let (Some(a), Some(b)) = (self.nodes.get(&a), self.nodes.get(&b)) else {
            return false;
        };
        a.nics
            .iter()
            .any(|x| b.nics.iter().any(|y| self.switch.can_reach(x, y)))
    }

    /// BMC power cycle. A second request before the first boot has started
    /// is queued behind it.
    pub fn power_cycle(&mut self, id: NodeId) -> Result<PowerCycle, FabricError> {
        let node = self.node_mut(id)?;
        if node.boot_pending {
            node.queued_cycles += 1;
            return Ok(PowerCycle::Queued);
        }
        node.power = Power::On;
        node.epoch += 1;
        node.boot_pending = true;
        node.tpm.reset();
        Ok(PowerCycle::Started { epoch: node.epoch })
    }

    /// Marks the pending boot as started. Returns true when a queued cycle
    /// should now run.
    pub fn boot_started(&mut self, id: NodeId) -> Result<bool, FabricError> {
        let node = self.node_mut(id)?;
        node.boot_pending = false;
        if node.queued_cycles > 0 {
            node.queued_cycles -= 1;
            return Ok(true);
        }
        Ok(false)
    }

    /// Sends a frame through the switch. Every frame, delivered or not, is
    /// recorded on the provider tap.
    pub fn send_frame(&mut self, frame: Frame) -> Result<Delivery, FabricError> {
        if !self.switch.has_port(&frame.src) {
            return Err(FabricError::LinkDown(frame.src.clone()));
        }
        let vlan = self.switch.vlan(&frame.src);
        let recipients: Vec<NicId> = match (&frame.dst, vlan) {
            (_, None) => Vec::new(),
            (Destination::Nic(dst), Some(tag)) => {
                if self.switch.vlan(dst) == Some(tag) && dst != &frame.src {
                    vec![dst.clone()]
                } else {
                    Vec::new()
                }
            }
            (Destination::Broadcast, Some(tag)) => self
                .switch
                .ports_in(tag)
                .filter(|nic| **nic != frame.src)
                .cloned()
                .collect(),
        };
        let delivery = if recipients.is_empty() {
            Delivery::IsolationDrop
        } else {
            Delivery::Delivered
        };
        self.tap.push(TapRecord {
            seq: self.tap.len() as u64,
            tick: self.clock.now(),
            frame: frame.clone(),
            vlan,
            delivery,
        });
        for nic in recipients {
            self.inboxes.entry(nic).or_default().push_back(frame.clone());
        }
        Ok(delivery)
    }

    pub fn take_frame(&mut self, nic: &NicId) -> Option<Frame> {
        self.inboxes.get_mut(nic)?.pop_front()
    }

    pub fn drain_inbox(&mut self, nic: &NicId) -> Vec<Frame> {
        self.inboxes.get_mut(nic).map(|q| q.drain(..).collect()).unwrap_or_default()
    }

    pub fn tap_records(&self) -> &[TapRecord] {
        &self.tap
    }

    pub fn tap_read(&self, observer: &Observer) -> Vec<Observed> {
        self.tap
            .iter()
            .map(|record| {
                let frame = &record.frame;
                let plaintext = match (&frame.key, observer) {
                    (None, _) => Some(frame.payload.clone()),
                    (Some(_), Observer::Provider) => None,
                    (Some(id), Observer::KeyHolder(keys)) => keys
                        .iter()
                        .filter(|k| &k.id() == id)
                        .find_map(|k| frame.open(k).ok()),
                };
                Observed {
                    seq: record.seq,
                    encrypted: frame.is_encrypted(),
                    wire: frame.payload.clone(),
                    plaintext,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn fabric_with(n: u32) -> Fabric {
        let mut fabric = Fabric::new();
        for i in 0..n {
            let node = EmulatedNode::new(NodeId(i), Tpm::new([i as u8; 32]), BootPath::None, 1024, 1);
            fabric.add_node(node);
        }
        fabric
    }

    fn nic(i: u32) -> NicId {
        NicId::node_nic(NodeId(i), 0)
    }

    fn tag(t: u16) -> Option<VlanTag> {
        VlanTag::new(t)
    }

    #[test]
    fn same_vlan_delivers_and_different_vlans_drop() {
        let mut f = fabric_with(3);
        f.set_port_vlan(&nic(0), tag(10)).unwrap();
        f.set_port_vlan(&nic(1), tag(10)).unwrap();
        f.set_port_vlan(&nic(2), tag(11)).unwrap();
        let d = f.send_frame(Frame::plain(nic(0), Destination::Nic(nic(1)), b"hi".to_vec())).unwrap();
        assert_eq!(d, Delivery::Delivered);
        assert_eq!(f.take_frame(&nic(1)).unwrap().payload, b"hi");
        let d = f.send_frame(Frame::plain(nic(0), Destination::Nic(nic(2)), b"no".to_vec())).unwrap();
        assert_eq!(d, Delivery::IsolationDrop);
        assert!(f.take_frame(&nic(2)).is_none());
        assert_eq!(f.tap_records().len(), 2);
        assert_eq!(f.tap_records()[1].delivery, Delivery::IsolationDrop);
    }

    #[test]
    fn untagged_port_drops_and_unknown_nic_is_link_down() {
        let mut f = fabric_with(2);
        f.set_port_vlan(&nic(1), tag(5)).unwrap();
        let d = f.send_frame(Frame::plain(nic(0), Destination::Nic(nic(1)), vec![1])).unwrap();
        assert_eq!(d, Delivery::IsolationDrop);
        let err = f
            .send_frame(Frame::plain(NicId("ghost".into()), Destination::Broadcast, vec![]))
            .unwrap_err();
        assert_eq!(err, FabricError::LinkDown(NicId("ghost".into())));
    }

    #[test]
    fn broadcast_stays_inside_the_vlan() {
        let mut f = fabric_with(4);
        for (i, t) in [(0, 7), (1, 7), (2, 7), (3, 8)] {
            f.set_port_vlan(&nic(i), tag(t)).unwrap();
        }
        f.send_frame(Frame::plain(nic(0), Destination::Broadcast, b"b".to_vec())).unwrap();
        assert!(f.take_frame(&nic(0)).is_none());
        assert!(f.take_frame(&nic(1)).is_some());
        assert!(f.take_frame(&nic(2)).is_some());
        assert!(f.take_frame(&nic(3)).is_none());
    }

    #[test]
    fn provider_tap_sees_plaintext_only_for_unencrypted_frames() {
        let mut f = fabric_with(2);
        f.set_port_vlan(&nic(0), tag(3)).unwrap();
        f.set_port_vlan(&nic(1), tag(3)).unwrap();
        let key = SymmetricKey::from_bytes([9; 32]);
        f.send_frame(Frame::plain(nic(0), Destination::Nic(nic(1)), b"visible".to_vec())).unwrap();
        f.send_frame(Frame::sealed(nic(0), Destination::Nic(nic(1)), &key, [1; 12], b"hidden")).unwrap();

        let provider = f.tap_read(&Observer::Provider);
        assert_eq!(provider[0].plaintext.as_deref(), Some(&b"visible"[..]));
        assert!(provider[1].encrypted);
        assert_eq!(provider[1].plaintext, None);
        assert!(!provider[1].wire.windows(6).any(|w| w == b"hidden"));

        let holder = f.tap_read(&Observer::KeyHolder(vec![key]));
        assert_eq!(holder[1].plaintext.as_deref(), Some(&b"hidden"[..]));

        let wrong = f.tap_read(&Observer::KeyHolder(vec![SymmetricKey::from_bytes([8; 32])]));
        assert_eq!(wrong[1].plaintext, None);
    }

    #[test]
    fn provider_never_recovers_sealed_random_payloads() {
        let mut f = fabric_with(2);
        f.set_port_vlan(&nic(0), tag(3)).unwrap();
        f.set_port_vlan(&nic(1), tag(3)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let key = SymmetricKey::generate(&mut rng);
        let mut payloads = Vec::new();
        for _ in 0..1000 {
            let mut payload = vec![0u8; 1 + (rng.next_u32() % 64) as usize];
            rng.fill_bytes(&mut payload);
            let mut nonce = [0u8; 12];
            rng.fill_bytes(&mut nonce);
            f.send_frame(Frame::sealed(nic(0), Destination::Nic(nic(1)), &key, nonce, &payload)).unwrap();
            payloads.push(payload);
        }
        let observed = f.tap_read(&Observer::Provider);
        assert_eq!(observed.iter().filter(|o| o.plaintext.is_some()).count(), 0);
        let holder = f.tap_read(&Observer::KeyHolder(vec![key]));
        for (o, p) in holder.iter().zip(&payloads) {
            assert_eq!(o.plaintext.as_ref(), Some(p));
        }
    }

    #[test]
    fn memory_survives_power_cycle_without_scrub() {
        let mut f = fabric_with(1);
        f.node_mut(NodeId(0)).unwrap().write_memory(100, b"SENTINEL").unwrap();
        assert!(!f.node(NodeId(0)).unwrap().scrub_complete());
        assert_eq!(f.power_cycle(NodeId(0)).unwrap(), PowerCycle::Started { epoch: 1 });
        f.boot_started(NodeId(0)).unwrap();
        assert_eq!(f.node(NodeId(0)).unwrap().read_memory(100, 8).unwrap(), b"SENTINEL");
        f.node_mut(NodeId(0)).unwrap().zero_memory();
        assert!(f.node(NodeId(0)).unwrap().memory().iter().all(|&b| b == 0));
        assert!(f.node(NodeId(0)).unwrap().scrub_complete());
    }

    #[test]
    fn power_cycle_queues_while_pending() {
        let mut f = fabric_with(1);
        assert!(matches!(f.power_cycle(NodeId(0)).unwrap(), PowerCycle::Started { .. }));
        assert_eq!(f.power_cycle(NodeId(0)).unwrap(), PowerCycle::Queued);
        assert!(f.boot_started(NodeId(0)).unwrap());
        assert_eq!(f.power_cycle(NodeId(0)).unwrap(), PowerCycle::Started { epoch: 2 });
        assert!(!f.boot_started(NodeId(0)).unwrap());
        assert_eq!(f.power_cycle(NodeId(9)), Err(FabricError::NodeNotFound(NodeId(9))));
    }

    #[test]
    fn memory_bounds() {
        let mut f = fabric_with(1);
        let node = f.node_mut(NodeId(0)).unwrap();
        assert!(node.write_memory(1020, &[1; 8]).is_err());
        assert!(node.read_memory(usize::MAX, 2).is_err());
    }

    proptest! {
        #[test]
        fn reachability_is_symmetric_and_equals_shared_vlan(
            tags in prop::collection::vec(prop::option::of(1u16..4), 2..=8)
        ) {
            let mut f = fabric_with(tags.len() as u32);
            for (i, t) in tags.iter().enumerate() {
                f.set_port_vlan(&nic(i as u32), t.and_then(VlanTag::new)).unwrap();
            }
            for a in 0..tags.len() {
                for b in 0..tags.len() {
                    let (na, nb) = (NodeId(a as u32), NodeId(b as u32));
                    let expected = tags[a].is_some() && tags[a] == tags[b];
                    prop_assert_eq!(f.nodes_can_reach(na, nb), expected);
                    prop_assert_eq!(f.nodes_can_reach(na, nb), f.nodes_can_reach(nb, na));
                }
            }
        }
    }
}
