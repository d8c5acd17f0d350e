// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use bolted::api::Api;
use bolted::datacenter::{Datacenter, DatacenterConfig};
use bolted::fabric::{FirmwareKind, TraceEvent};
use bolted::ids::{NodeId, ProjectId};
use bolted::orchestrator::{ImageSpec, Orchestrator, OrchestratorConfig, SecurityTier};

pub fn config(seed: u64, nodes: u32, firmware: FirmwareKind) -> DatacenterConfig {
    DatacenterConfig {
        nodes,
        firmware,
        seed,
        corpus_seed: seed,
        ..DatacenterConfig::default()
    }
}

/// A datacenter behind the in-process API with `tenants` registered.
pub fn api(config: DatacenterConfig, tenants: &[&str]) -> Api {
    let mut dc = Datacenter::new(config);
    for t in tenants {
        dc.create_project(&ProjectId::new(*t)).expect("fresh project");
    }
    Api::new(dc)
}

pub fn orchestrator(tenant: &str, tier: SecurityTier, seed: u64) -> Orchestrator {
    Orchestrator::new(OrchestratorConfig {
        tenant: tenant.into(),
        tier,
        secret_seed: seed,
        ..OrchestratorConfig::default()
    })
}

/// An orchestrator with one enclave named `enclave` already created.
pub fn with_enclave(api: &mut Api, tenant: &str, enclave: &str, tier: SecurityTier, seed: u64) -> Orchestrator {
    let mut orch = orchestrator(tenant, tier, seed);
    orch.enclave_create(api, enclave, Some(tier), &ImageSpec::default())
        .expect("enclave created");
    orch
}

pub fn events<'a>(api: &'a Api, event: &'a str, node: Option<NodeId>) -> impl Iterator<Item = &'a TraceEvent> + 'a {
    api.datacenter()
        .trace()
        .events()
        .iter()
        .filter(move |e| e.event == event && node.is_none_or(|n| e.node_id == Some(n)))
}

pub fn firmware_kinds() -> [FirmwareKind; 2] {
    [FirmwareKind::UefiChain, FirmwareKind::LinuxbootFlash]
}
