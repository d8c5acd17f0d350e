// SPDX-License-Identifier: Apache-2.0

//! Measured boot. Firmware stages are symbolic: a stage "runs" by advancing
//! a state machine, but every stage hashes the next one into a PCR before
//! handing over, so the final register state is a pure function of the
//! firmware profile and the stage blobs.

mod runtime;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{BootWhitelist, Provenance};
use crate::fabric::{FirmwareKind, FlashImage};
use crate::ids::NodeId;
use crate::tpm::{Digest, PCR_BOOT, PCR_PLATFORM};

pub use runtime::{BootEnv, EnrollError, Fetch, NodeRuntime, RuntimeState, TenantKeys, TenantOs};

/// Bytes `0..FIRMWARE_SCRATCH` belong to the firmware; it wipes them on kexec.
pub const FIRMWARE_SCRATCH: usize = 0x1000;
/// Where kexec places the initrd carrying the tenant's keys.
pub const INITRD_BASE: usize = 0x1000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BootError {
    #[error("policy: {0}")]
    Policy(String),
    #[error("not found: {0}")]
    NotFound(String),
}

impl BootError {
    pub fn code(&self) -> &'static str {
        match self {
            BootError::Policy(_) => "policy",
            BootError::NotFound(_) => "not_found",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootStage {
    Post,
    Pxe,
    Ipxe,
    LinuxbootRuntime,
    KeylimeAgent,
    TenantKernel,
}

impl BootStage {
    /// Stages that run before the attestation verdict.
    pub const FIRMWARE: [BootStage; 5] = [
        BootStage::Post,
        BootStage::Pxe,
        BootStage::Ipxe,
        BootStage::LinuxbootRuntime,
        BootStage::KeylimeAgent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BootStage::Post => "post",
            BootStage::Pxe => "pxe",
            BootStage::Ipxe => "ipxe",
            BootStage::LinuxbootRuntime => "linuxboot_runtime",
            BootStage::KeylimeAgent => "keylime_agent",
            BootStage::TenantKernel => "tenant_kernel",
        }
    }

    pub fn pcr(self) -> usize {
        match self {
            BootStage::Post | BootStage::Pxe => PCR_PLATFORM,
            _ => PCR_BOOT,
        }
    }

    /// Whether `kind` executes this stage at all.
    pub fn used_by(self, kind: FirmwareKind) -> bool {
        match kind {
            FirmwareKind::UefiChain => true,
            FirmwareKind::LinuxbootFlash => !matches!(self, BootStage::Pxe | BootStage::Ipxe),
        }
    }
}

impl fmt::Display for BootStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The seven numbered phases of a network boot into a tenant kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::I => "i",
            Phase::II => "ii",
            Phase::III => "iii",
            Phase::IV => "iv",
            Phase::V => "v",
            Phase::VI => "vi",
            Phase::VII => "vii",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::I => "pxe_fetches_ipxe",
            Phase::II => "ipxe_fetches_runtime",
            Phase::III => "runtime_boots",
            Phase::IV => "agent_starts",
            Phase::V => "attestation",
            Phase::VI => "tenant_network",
            Phase::VII => "kexec",
        }
    }
}

/// Synthetic firmware blobs. The same seed always yields the same bytes.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobCorpus {
    pub blobs: BTreeMap<BootStage, Vec<u8>>,
}

impl fmt::Debug for BlobCorpus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let digests: BTreeMap<_, _> = self.blobs.iter().map(|(s, b)| (*s, Digest::of(b))).collect();
        f.debug_struct("BlobCorpus").field("blobs", &digests).finish()
    }
}

impl BlobCorpus {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let blobs = BootStage::FIRMWARE
            .into_iter()
            .map(|stage| {
                let mut blob = vec![0u8; rng.gen_range(512..2048)];
                rng.fill(&mut blob[..]);
                (stage, blob)
            })
            .collect();
        Self { blobs }
    }

    pub fn from_blobs(blobs: impl IntoIterator<Item = (BootStage, Vec<u8>)>) -> Self {
        Self {
            blobs: blobs.into_iter().collect(),
        }
    }

    pub fn blob(&self, stage: BootStage) -> &[u8] {
        self.blobs.get(&stage).map_or(&[], Vec::as_slice)
    }

    /// SPI flash contents for `kind`. LinuxBoot flash carries the runtime
    /// right after POST and has no PXE ROM.
    pub fn flash_image(&self, kind: FirmwareKind) -> FlashImage {
        match kind {
            FirmwareKind::UefiChain => FlashImage {
                kind,
                post: self.blob(BootStage::Post).to_vec(),
                pxe: self.blob(BootStage::Pxe).to_vec(),
            },
            FirmwareKind::LinuxbootFlash => FlashImage {
                kind,
                post: [self.blob(BootStage::Post), self.blob(BootStage::LinuxbootRuntime)].concat(),
                pxe: Vec::new(),
            },
        }
    }

    /// Stages fetched over the network rather than read from flash.
    pub fn boot_server(&self) -> BootServer {
        BootServer {
            published: [BootStage::Ipxe, BootStage::LinuxbootRuntime, BootStage::KeylimeAgent]
                .into_iter()
                .map(|s| (s, self.blob(s).to_vec()))
                .collect(),
            overrides: BTreeMap::new(),
        }
    }

    /// Register values a correct boot of `kind` must produce at the point
    /// the agent is quoted.
    pub fn expected_whitelist(&self, kind: FirmwareKind) -> BootWhitelist {
        let flash = self.flash_image(kind);
        let fold = |parts: &[&[u8]]| {
            parts
                .iter()
                .filter(|p| !p.is_empty())
                .fold(Digest::ZERO, |acc, p| acc.extend(&Digest::of(p)))
        };
        let platform = fold(&[&flash.post, &flash.pxe]);
        let boot = match kind {
            FirmwareKind::UefiChain => fold(&[
                self.blob(BootStage::Ipxe),
                self.blob(BootStage::LinuxbootRuntime),
                self.blob(BootStage::KeylimeAgent),
            ]),
            FirmwareKind::LinuxbootFlash => fold(&[self.blob(BootStage::KeylimeAgent)]),
        };
        BootWhitelist {
            expected: BTreeMap::from([(PCR_PLATFORM, platform), (PCR_BOOT, boot)]),
            provenance: Provenance::ProviderPublished,
        }
    }
}

/// The provider's network boot server. Per-node overrides exist only so an
/// adversary can serve a modified stage to one node.
#[derive(Debug, Clone, Default)]
pub struct BootServer {
    published: BTreeMap<BootStage, Vec<u8>>,
    overrides: BTreeMap<(NodeId, BootStage), Vec<u8>>,
}

impl BootServer {
    pub fn fetch(&self, node: NodeId, stage: BootStage) -> Option<&[u8]> {
        self.overrides
            .get(&(node, stage))
            .or_else(|| self.published.get(&stage))
            .map(Vec::as_slice)
    }

    pub fn publish(&mut self, stage: BootStage, blob: Vec<u8>) {
        self.published.insert(stage, blob);
    }

    pub fn withdraw(&mut self, stage: BootStage) {
        self.published.remove(&stage);
    }

    pub fn serve_override(&mut self, node: NodeId, stage: BootStage, blob: Vec<u8>) {
        self.overrides.insert((node, stage), blob);
    }

    pub fn clear_overrides(&mut self, node: NodeId) {
        self.overrides.retain(|(n, _), _| *n != node);
    }
}

pub fn flip_bit(blob: &mut [u8], bit: usize) {
    if blob.is_empty() {
        return;
    }
    let bit = bit % (blob.len() * 8);
    blob[bit / 8] ^= 1 << (bit % 8);
}
