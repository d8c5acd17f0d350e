// SPDX-License-Identifier: Apache-2.0

//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass a criterion id (for example
//! `AC5`) to run only matching criteria.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt::{Display, Write as _};
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use bolted::api::Api;
use bolted::attestation::{Cause, Verifier};
use bolted::bootchain::{BootStage, INITRD_BASE};
use bolted::datacenter::Datacenter;
use bolted::fabric::{BootPath, Delivery, Destination, EmulatedNode, Fabric, FirmwareKind, Frame, Observer};
use bolted::ids::{NetworkId, NicId, NodeId, ProjectId};
use bolted::isolation::{AllocationState, Caller, IsolationConfig, IsolationService, NetworkPurpose, NodeMetadata, Owner};
use bolted::orchestrator::scenario::{last_lifecycle, run_scenario_str, Scenario, ScenarioRunner, BUNDLED};
use bolted::orchestrator::{FileSpec, ImageSpec, NodeAddOutcome, SecurityTier};
use bolted::provisioning::{ImageId, ProvisioningService, SessionId, BLOCK_SIZE, MAX_IMAGE_BLOCKS};
use bolted::tpm::{make_credential, Digest, Nonce, PcrBank, PcrSelection, Tpm, NONCE_LEN, PCR_BOOT, PCR_PLATFORM, PCR_RUNTIME};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;

trait Ctx<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T, E: Display> Ctx<T> for Result<T, E> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($arg)+));
        }
    };
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    type Criterion = (&'static str, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("AC1", "server life cycle", ac1_lifecycle),
        ("AC2", "tampered firmware is rejected", ac2_tamper),
        ("AC3", "boot phases per firmware", ac3_phases),
        ("AC4", "runtime revocation latency", ac4_revocation),
        ("AC5", "isolation model check", ac5_model_check),
        ("AC6", "no residue across tenants", ac6_reuse),
        ("AC7", "copy-on-write store and lazy fetch", ac7_images),
        ("AC8", "provider tap", ac8_tap),
        ("AC9", "deterministic traces", ac9_determinism),
        ("AC10", "quote freshness and integrity", ac10_quotes),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| id == f || name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{id} PASS [{secs:.2}s] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL [{secs:.2}s] {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("{what} took {:.2}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
    }
}

fn random_tamper(rng: &mut impl Rng, dc: &Datacenter, kind: FirmwareKind) -> (BootStage, usize) {
    let stages: Vec<BootStage> = BootStage::FIRMWARE.into_iter().filter(|s| s.used_by(kind)).collect();
    let stage = *stages.choose(rng).expect("every kind has firmware stages");
    let bits = dc.corpus().blob(stage).len() * 8;
    (stage, rng.gen_range(0..bits))
}

fn phases(api: &Api, node: NodeId) -> Vec<String> {
    common::events(api, "boot_phase", Some(node))
        .filter_map(|e| e.detail["phase"].as_str().map(str::to_string))
        .collect()
}

fn in_quarantine(dc: &Datacenter, node: NodeId) -> bool {
    let Ok(record) = dc.isolation.node(node) else { return false };
    !record.attachments.is_empty()
        && record.attachments.values().all(|net| {
            dc.isolation
                .network(*net)
                .is_ok_and(|n| n.purpose == NetworkPurpose::Quarantine)
        })
}

fn ac1_lifecycle() -> Outcome {
    let start = Instant::now();
    let seeds = 50u64;
    for seed in 0..seeds {
        let kind = common::firmware_kinds()[seed as usize % 2];
        let mut api = common::api(common::config(seed, 2, kind), &["tenant"]);
        let mut orch = common::with_enclave(&mut api, "tenant", "e", SecurityTier::Full, seed);
        let clean = orch.node_add(&mut api, "e", Some(NodeId(0))).ctx("clean node_add")?;
        ensure!(clean.is_member(), "seed {seed}: clean node was not admitted: {clean:?}");

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stage, bit) = random_tamper(&mut rng, api.datacenter(), kind);
        api.datacenter_mut().tamper(NodeId(1), stage, bit).ctx("tamper")?;
        let bad = orch.node_add(&mut api, "e", Some(NodeId(1))).ctx("tampered node_add")?;
        ensure!(!bad.is_member(), "seed {seed}: tampered {stage} bit {bit} was admitted");

        let trace = api.datacenter().trace().events();
        let good_steps = last_lifecycle(trace, NodeId(0));
        let bad_steps = last_lifecycle(trace, NodeId(1));
        ensure!(good_steps == [1, 2, 3, 4, 6], "seed {seed}: clean steps {good_steps:?}");
        ensure!(bad_steps == [1, 2, 3, 5], "seed {seed}: rejected steps {bad_steps:?}");
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(5), "50 seeds")?;
    Ok(format!(
        "{seeds}/{seeds} seeds gave [1,2,3,4,6] and [1,2,3,5] in {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn ac2_tamper() -> Outcome {
    let start = Instant::now();
    let trials = 100u64;
    let mut per_stage: BTreeMap<BootStage, usize> = BTreeMap::new();
    let mut rejected = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(0xac2 + trial);
        let kind = *common::firmware_kinds().choose(&mut rng).expect("non-empty");
        let tier = if rng.gen_bool(0.5) { SecurityTier::Attested } else { SecurityTier::Full };
        let mut api = common::api(common::config(1000 + trial, 1, kind), &["tenant"]);
        let mut orch = common::with_enclave(&mut api, "tenant", "e", tier, trial);
        let (stage, bit) = random_tamper(&mut rng, api.datacenter(), kind);
        api.datacenter_mut().tamper(NodeId(0), stage, bit).ctx("tamper")?;
        *per_stage.entry(stage).or_default() += 1;

        let outcome = orch.node_add(&mut api, "e", Some(NodeId(0))).ctx("node_add")?;
        let dc = api.datacenter();
        let state = dc.isolation.node(NodeId(0)).ctx("node")?.state;
        let verdict_fail = common::events(&api, "boot_verdict", Some(NodeId(0))).any(|e| e.detail["verdict"] == "fail");
        let ok = matches!(outcome, NodeAddOutcome::Rejected { .. })
            && state == AllocationState::Rejected
            && in_quarantine(dc, NodeId(0))
            && verdict_fail;
        ensure!(ok, "trial {trial}: {kind:?} {stage} bit {bit} gave {outcome:?}, state {state}");
        rejected += 1;
    }
    let mut admitted = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(0xc1ea + trial);
        let kind = *common::firmware_kinds().choose(&mut rng).expect("non-empty");
        let tier = if rng.gen_bool(0.5) { SecurityTier::Attested } else { SecurityTier::Full };
        let mut api = common::api(common::config(2000 + trial, 1, kind), &["tenant"]);
        let mut orch = common::with_enclave(&mut api, "tenant", "e", tier, trial);
        let outcome = orch.node_add(&mut api, "e", Some(NodeId(0))).ctx("node_add")?;
        let state = api.datacenter().isolation.node(NodeId(0)).ctx("node")?.state;
        let verdict_pass = common::events(&api, "boot_verdict", Some(NodeId(0))).any(|e| e.detail["verdict"] == "pass");
        ensure!(
            outcome.is_member() && state == AllocationState::Allocated && verdict_pass,
            "clean trial {trial}: {outcome:?}, state {state}"
        );
        admitted += 1;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(30), "200 trials")?;
    let stages: Vec<String> = per_stage.iter().map(|(s, n)| format!("{s}={n}")).collect();
    Ok(format!(
        "tampered {rejected}/{trials} FAIL and quarantined ({}), clean {admitted}/{trials} PASS, {:.2}s",
        stages.join(" "),
        elapsed.as_secs_f64()
    ))
}

fn ac3_phases() -> Outcome {
    let all: Vec<&str> = vec!["i", "ii", "iii", "iv", "v", "vi", "vii"];
    let flash: Vec<&str> = vec!["iv", "v", "vi", "vii"];
    let mut boots = 0;
    for kind in common::firmware_kinds() {
        for seed in 0..6u64 {
            let tier = if seed % 2 == 0 { SecurityTier::Attested } else { SecurityTier::Full };
            let mut api = common::api(common::config(300 + seed, 1, kind), &["tenant"]);
            let mut orch = common::with_enclave(&mut api, "tenant", "e", tier, seed);
            let outcome = orch.node_add(&mut api, "e", Some(NodeId(0))).ctx("node_add")?;
            ensure!(outcome.is_member(), "{kind:?} seed {seed}: {outcome:?}");
            let seen = phases(&api, NodeId(0));
            let expected = match kind {
                FirmwareKind::UefiChain => &all,
                FirmwareKind::LinuxbootFlash => &flash,
            };
            ensure!(&seen == expected, "{kind:?} {tier} seed {seed}: phases {seen:?}");
            boots += 1;
        }
    }
    Ok(format!("{boots} attested boots: UEFI i..vii, LinuxBoot flash iv..vii"))
}

fn ac4_revocation() -> Outcome {
    let mut lines = Vec::new();
    for n in 2..=8u32 {
        let seed = 400 + u64::from(n);
        let mut api = common::api(common::config(seed, n, FirmwareKind::UefiChain), &["tenant"]);
        let mut orch = common::with_enclave(&mut api, "tenant", "e", SecurityTier::Full, seed);
        ensure!(orch.config().poll_interval == 1, "poll interval is {}", orch.config().poll_interval);
        for i in 0..n {
            let outcome = orch.node_add(&mut api, "e", Some(NodeId(i))).ctx("node_add")?;
            ensure!(outcome.is_member(), "enclave of {n}: node {i} not admitted");
        }
        api.datacenter_mut().advance(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let victim = NodeId(rng.gen_range(0..n));
        let peers: Vec<NodeId> = (0..n).map(NodeId).filter(|p| *p != victim).collect();
        for p in &peers {
            let keys = &api.datacenter().runtime(*p).ctx("runtime")?.tenant().ctx_opt("tenant os")?.keys;
            ensure!(keys.peers.contains_key(&victim), "{p} never held a key for {victim}");
        }

        let exec_tick = api.datacenter().now();
        api.datacenter_mut()
            .exec(victim, "/opt/unlisted", Some(b"not in the image".to_vec()))
            .ctx("exec")?;
        api.datacenter_mut().advance(3);

        let detected = common::events(&api, "revocation", Some(victim))
            .map(|e| e.tick)
            .min()
            .ok_or_else(|| format!("enclave of {n}: {victim} was never revoked"))?;
        ensure!(detected <= exec_tick + 1, "enclave of {n}: detection after {} ticks", detected - exec_tick);
        let mut worst = 0;
        for p in &peers {
            let deleted = common::events(&api, "peer_keys_deleted", Some(*p))
                .filter(|e| e.detail["revoked"] == json!(victim))
                .map(|e| e.tick)
                .min()
                .ok_or_else(|| format!("enclave of {n}: {p} never deleted keys for {victim}"))?;
            ensure!(deleted <= exec_tick + 3, "enclave of {n}: {p} deleted after {} ticks", deleted - exec_tick);
            worst = worst.max(deleted - exec_tick);
            let keys = &api.datacenter().runtime(*p).ctx("runtime")?.tenant().ctx_opt("tenant os")?.keys;
            ensure!(!keys.peers.contains_key(&victim), "enclave of {n}: {p} still holds a key for {victim}");
        }
        lines.push(format!("n={n}: detect {} del<={worst}", detected - exec_tick));
    }
    Ok(lines.join(", "))
}

trait OptCtx<T> {
    fn ctx_opt(self, what: &str) -> Result<T, String>;
}

impl<T> OptCtx<T> for Option<T> {
    fn ctx_opt(self, what: &str) -> Result<T, String> {
        self.ok_or_else(|| format!("missing {what}"))
    }
}

// Model check over the isolation service and the switch it programs.

const MC_NODES: u32 = 3;
const MC_NICS: usize = 2;
const MC_DEPTH: usize = 6;

#[derive(Debug, Clone, Copy)]
enum Op {
    Allocate(usize, NodeId),
    CreateNetwork(usize, NetworkPurpose),
    Connect(usize, NodeId, usize, NetworkId),
    Detach(usize, NodeId, usize),
    SetState(usize, NodeId, AllocationState),
    DeleteNetwork(usize, NetworkId),
}

#[derive(Clone)]
struct McState {
    isolation: IsolationService,
    fabric: Fabric,
}

fn mc_callers() -> [Caller; 3] {
    [Caller::Provider, Caller::tenant("a"), Caller::tenant("b")]
}

fn mc_initial() -> McState {
    let mut fabric = Fabric::new();
    let mut isolation = IsolationService::new(IsolationConfig::default());
    for n in 0..MC_NODES {
        let id = NodeId(n);
        let tpm = Tpm::new([n as u8 + 1; 32]);
        let ek_public = tpm.ek_public();
        fabric.add_node(EmulatedNode::new(id, tpm, BootPath::None, 16, MC_NICS));
        isolation.register_node(NodeMetadata {
            node_id: id,
            ek_public,
            firmware: FirmwareKind::UefiChain,
            platform_pcr_whitelist: BTreeMap::new(),
        });
    }
    isolation.create_project(ProjectId::new("a")).expect("fresh");
    isolation.create_project(ProjectId::new("b")).expect("fresh");
    McState { isolation, fabric }
}

fn mc_ops(state: &McState) -> Vec<Op> {
    let networks: Vec<NetworkId> = state.isolation.networks().keys().copied().collect();
    let mut ops = Vec::new();
    for c in 0..3 {
        if c == 0 {
            ops.push(Op::CreateNetwork(c, NetworkPurpose::Public));
        } else {
            for p in [NetworkPurpose::Airlock, NetworkPurpose::Enclave, NetworkPurpose::ProvisioningAccess] {
                ops.push(Op::CreateNetwork(c, p));
            }
        }
        for n in (0..MC_NODES).map(NodeId) {
            if c != 0 {
                ops.push(Op::Allocate(c, n));
            }
            for nic in 0..MC_NICS {
                for net in &networks {
                    ops.push(Op::Connect(c, n, nic, *net));
                }
                ops.push(Op::Detach(c, n, nic));
            }
            for s in [
                AllocationState::Free,
                AllocationState::Airlock,
                AllocationState::Allocated,
                AllocationState::Rejected,
            ] {
                ops.push(Op::SetState(c, n, s));
            }
        }
        for net in &networks {
            ops.push(Op::DeleteNetwork(c, *net));
        }
    }
    ops
}

fn mc_apply(state: &mut McState, op: Op) -> bool {
    let callers = mc_callers();
    let McState { isolation, fabric } = state;
    let r = match op {
        Op::Allocate(c, n) => isolation.allocate_node(&callers[c], Some(n)).map(|_| ()),
        Op::CreateNetwork(c, p) => isolation
            .create_network(&callers[c], p, vec!["boot".into()], fabric)
            .map(|_| ()),
        Op::Connect(c, n, nic, net) => isolation.connect(&callers[c], n, nic, net, fabric),
        Op::Detach(c, n, nic) => isolation.detach(&callers[c], n, nic, fabric),
        Op::SetState(c, n, s) => isolation.set_state(&callers[c], n, s, 0, fabric),
        Op::DeleteNetwork(c, net) => isolation.delete_network(&callers[c], net, fabric),
    };
    r.is_ok()
}

const MC_PERMUTATIONS: [[u32; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// State key up to renaming of nodes, tenants and networks. Nodes and
/// tenants are interchangeable in the model and network ids and VLAN tags
/// are only names, so renamed states have the same futures.
fn mc_fingerprint(state: &McState) -> String {
    let iso = &state.isolation;
    let nic_index = |nic: &NicId| -> Option<(NodeId, usize)> {
        let node = state.fabric.node_of_nic(nic)?;
        let i = state.fabric.node(node).ok()?.nics().iter().position(|n| n == nic)?;
        Some((node, i))
    };
    let mut best: Option<String> = None;
    for perm in MC_PERMUTATIONS {
        for swap in [false, true] {
            let project = |p: &ProjectId| match (p.0.as_str(), swap) {
                ("a", true) => "b".to_string(),
                ("b", true) => "a".to_string(),
                (other, _) => other.to_string(),
            };
            let owner = |o: &Owner| match o {
                Owner::Provider => "provider".to_string(),
                Owner::Project(p) => project(p),
            };
            let mut nets: Vec<(String, NetworkId)> = iso
                .networks()
                .values()
                .map(|n| {
                    let mut members: Vec<(u32, usize)> = n
                        .members
                        .iter()
                        .filter_map(|nic| nic_index(nic).map(|(node, i)| (perm[node.0 as usize], i)))
                        .collect();
                    members.sort();
                    (format!("{}/{:?}/{members:?}", owner(&n.owner), n.purpose), n.id)
                })
                .collect();
            nets.sort();
            let canon: BTreeMap<NetworkId, usize> = nets.iter().enumerate().map(|(i, (_, id))| (*id, i)).collect();
            let by_vlan: BTreeMap<_, usize> = iso.networks().values().map(|n| (n.vlan, canon[&n.id])).collect();
            let mut nodes: Vec<(u32, String)> = Vec::new();
            for (id, r) in iso.nodes() {
                let mut text = format!("{}:{:?}:", r.state, r.owner.as_ref().map(&project));
                for (i, nic) in state.fabric.node(*id).expect("node").nics().iter().enumerate() {
                    let attached = r.attachments.get(nic).map(|n| canon[n]);
                    let wire = state.fabric.switch().vlan(nic).map(|t| by_vlan.get(&t).copied());
                    let _ = write!(text, "{i}={attached:?}/{wire:?},");
                }
                nodes.push((perm[id.0 as usize], text));
            }
            nodes.sort();
            let mut out = String::new();
            for (_, text) in nodes {
                let _ = write!(out, "{text};");
            }
            for (sig, _) in nets {
                let _ = write!(out, "{sig};");
            }
            if best.as_ref().is_none_or(|b| out < *b) {
                best = Some(out);
            }
        }
    }
    best.expect("at least one relabeling")
}

/// Checks both properties on one state. The attachment property is
/// checked against the isolation records and again against the switch.
fn mc_violation(state: &McState) -> Option<String> {
    let iso = &state.isolation;
    let allowed = |node_owner: &Option<ProjectId>, net_owner: &Owner, purpose: NetworkPurpose| match net_owner {
        Owner::Project(p) => node_owner.as_ref() == Some(p),
        Owner::Provider => matches!(purpose, NetworkPurpose::Public | NetworkPurpose::Quarantine),
    };
    for (id, record) in iso.nodes() {
        for net in record.attachments.values() {
            let Ok(network) = iso.network(*net) else {
                return Some(format!("{id} attached to missing {net}"));
            };
            if !allowed(&record.owner, &network.owner, network.purpose) {
                return Some(format!("{id} of {:?} attached to {net} of {:?}", record.owner, network.owner));
            }
        }
        for nic in state.fabric.node(*id).ok()?.nics() {
            let Some(tag) = state.fabric.switch().vlan(nic) else { continue };
            let Some(network) = iso.networks().values().find(|n| n.vlan == tag) else {
                return Some(format!("{nic} on unowned VLAN {tag:?}"));
            };
            if !allowed(&record.owner, &network.owner, network.purpose) {
                return Some(format!("{nic} of {:?} is on the VLAN of {:?}", record.owner, network.owner));
            }
        }
    }
    let airlocked: Vec<NodeId> = iso
        .nodes()
        .iter()
        .filter(|(_, r)| r.state == AllocationState::Airlock)
        .map(|(id, _)| *id)
        .collect();
    for a in &airlocked {
        for b in &airlocked {
            if a == b {
                continue;
            }
            if state.fabric.nodes_can_reach(*a, *b) {
                return Some(format!("airlock nodes {a} and {b} share a VLAN"));
            }
            let mut fabric = state.fabric.clone();
            let targets: Vec<NicId> = fabric.node(*b).ok()?.nics().to_vec();
            for src in fabric.node(*a).ok()?.nics().to_vec() {
                for dst in targets.iter().cloned().map(Destination::Nic).chain([Destination::Broadcast]) {
                    let frame = Frame::plain(src.clone(), dst, b"probe".to_vec());
                    if fabric.send_frame(frame) == Ok(Delivery::Delivered) {
                        for t in &targets {
                            if fabric.take_frame(t).is_some() {
                                return Some(format!("a frame from airlock {a} reached airlock {b}"));
                            }
                        }
                    }
                }
            }
        }
    }
    None
}

fn mc_replay(initial: &McState, path: &[Op]) -> McState {
    let mut state = initial.clone();
    for op in path {
        assert!(mc_apply(&mut state, *op), "replayed {op:?} failed");
    }
    state
}

/// The property checks must flag switch states the service would never
/// produce; otherwise a clean search means nothing.
fn mc_detects_planted_violations(initial: &McState) -> Result<(), String> {
    let (n0, n1, n2) = (NodeId(0), NodeId(1), NodeId(2));
    let path = [
        Op::Allocate(1, n0),
        Op::Allocate(1, n1),
        Op::Allocate(2, n2),
        Op::CreateNetwork(1, NetworkPurpose::Airlock),
        Op::CreateNetwork(1, NetworkPurpose::Airlock),
        Op::Connect(1, n0, 0, NetworkId(0)),
        Op::Connect(1, n1, 0, NetworkId(1)),
        Op::SetState(1, n0, AllocationState::Airlock),
        Op::SetState(1, n1, AllocationState::Airlock),
    ];
    let base = mc_replay(initial, &path);
    ensure!(mc_violation(&base).is_none(), "clean setup flagged: {:?}", mc_violation(&base));
    let vlan = base.isolation.network(NetworkId(0)).ctx("network")?.vlan;
    for victim in [n1, n2] {
        let mut bad = base.clone();
        let nic = bad.fabric.node(victim).ctx("node")?.nics()[1].clone();
        bad.fabric.set_port_vlan(&nic, Some(vlan)).ctx("vlan")?;
        ensure!(mc_violation(&bad).is_some(), "planted bridge from {victim} went unnoticed");
    }
    Ok(())
}

fn ac5_model_check() -> Outcome {
    let initial = mc_initial();
    let mut seen: HashSet<String> = HashSet::from([mc_fingerprint(&initial)]);
    // Paths rather than states keep the frontier small.
    let mut queue: VecDeque<Vec<Op>> = VecDeque::from([Vec::new()]);
    let mut transitions = 0u64;
    let mut max_airlocked = 0;
    let mut deepest = 0;
    while let Some(path) = queue.pop_front() {
        let state = mc_replay(&initial, &path);
        if let Some(v) = mc_violation(&state) {
            return Err(format!("reachable violation after {path:?}: {v}"));
        }
        let airlocked = state
            .isolation
            .nodes()
            .values()
            .filter(|r| r.state == AllocationState::Airlock)
            .count();
        max_airlocked = max_airlocked.max(airlocked);
        deepest = deepest.max(path.len());
        if path.len() == MC_DEPTH {
            continue;
        }
        for op in mc_ops(&state) {
            let mut next = state.clone();
            if !mc_apply(&mut next, op) {
                continue;
            }
            transitions += 1;
            if seen.insert(mc_fingerprint(&next)) {
                let mut longer = path.clone();
                longer.push(op);
                queue.push_back(longer);
            }
        }
    }
    ensure!(deepest == MC_DEPTH, "the search stopped at depth {deepest}");
    mc_detects_planted_violations(&initial)?;
    ensure!(max_airlocked >= 2, "the search never reached two airlocked nodes");
    Ok(format!(
        "{} distinct states up to {MC_DEPTH} actions on {MC_NODES} nodes, {transitions} transitions, up to {max_airlocked} nodes airlocked at once, 0 violations",
        seen.len()
    ))
}

fn random_image(rng: &mut impl Rng, tag: &str) -> ImageSpec {
    let mut word = || format!("{tag}-{:016x}", rng.next_u64());
    ImageSpec {
        name: word(),
        kernel: format!("vmlinuz {}", word()),
        initrd: format!("initrd {}", word()),
        files: vec![
            FileSpec {
                path: "/sbin/init".into(),
                content: word(),
                init: true,
            },
            FileSpec {
                path: "/srv/data".into(),
                content: word().repeat(64),
                init: false,
            },
        ],
        ..ImageSpec::default()
    }
}

fn ac6_reuse() -> Outcome {
    let runs = 1000u64;
    let mut planted_bytes = 0usize;
    let mut planted_blocks = 0usize;
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(0xac6 + run);
        let kind = *common::firmware_kinds().choose(&mut rng).expect("non-empty");
        let mut config = common::config(6000 + run, 1, kind);
        config.memory_bytes = 16 * 1024;
        let mut api = common::api(config, &["alice", "bob"]);
        let node = NodeId(0);
        let tier_a = *SecurityTier::ALL.choose(&mut rng).expect("non-empty");
        let tier_b = *SecurityTier::ALL.choose(&mut rng).expect("non-empty");

        let mut alice = common::orchestrator("alice", tier_a, run);
        alice
            .enclave_create(&mut api, "a", Some(tier_a), &random_image(&mut rng, "alice"))
            .ctx("alice enclave")?;
        ensure!(alice.node_add(&mut api, "a", Some(node)).ctx("alice add")?.is_member(), "run {run}: alice rejected");
        let memory = api.datacenter().fabric.node(node).ctx("node")?.memory_size();
        let mut written: BTreeMap<usize, u8> = BTreeMap::new();
        for _ in 0..rng.gen_range(1..8) {
            let len = rng.gen_range(1..512);
            let offset = rng.gen_range(0..memory - len);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen_range(1..=255)).collect();
            api.datacenter_mut().tenant_write(node, offset, &bytes).ctx("alice write")?;
            for (i, b) in bytes.iter().enumerate() {
                written.insert(offset + i, *b);
            }
        }
        planted_bytes += written.len();
        let alice_session = alice.enclave("a").ctx("enclave")?.members[&node].session;
        let mut disk: Vec<u64> = Vec::new();
        for _ in 0..rng.gen_range(1..4) {
            let index = rng.gen_range(0..MAX_IMAGE_BLOCKS);
            let mut block = vec![0u8; 64];
            rng.fill_bytes(&mut block);
            api.datacenter_mut()
                .provisioning
                .session_write(alice_session, index, &block)
                .ctx("alice disk write")?;
            disk.push(index);
        }
        planted_blocks += disk.len();
        let alice_image = alice.enclave("a").ctx("enclave")?.image;
        alice.node_release(&mut api, "a", node).ctx("release")?;

        // The provider's view between tenants: nothing left in memory.
        let raw = api.datacenter().fabric.node(node).ctx("node")?.memory();
        ensure!(raw.iter().all(|&b| b == 0), "run {run}: memory not zero after release");

        let mut bob = common::orchestrator("bob", tier_b, run + 1);
        bob.enclave_create(&mut api, "b", Some(tier_b), &random_image(&mut rng, "bob"))
            .ctx("bob enclave")?;
        ensure!(bob.node_add(&mut api, "b", Some(node)).ctx("bob add")?.is_member(), "run {run}: bob rejected");

        // The successor's view.
        let dc = api.datacenter();
        let own = dc.runtime(node).ctx("runtime")?.tenant().ctx_opt("tenant os")?.keys.material();
        let seen = dc.tenant_read(node, 0, memory).ctx("bob read")?;
        let own_range = INITRD_BASE..INITRD_BASE + own.len();
        ensure!(seen[own_range.clone()] == own[..], "run {run}: initrd keys do not match the tenant's own");
        for (offset, byte) in seen.iter().enumerate() {
            if own_range.contains(&offset) {
                continue;
            }
            ensure!(
                *byte == 0,
                "run {run}: byte {offset:#x} is {byte:#04x} (predecessor wrote {:?})",
                written.get(&offset)
            );
        }

        let bob_p = ProjectId::new("bob");
        let alice_p = ProjectId::new("alice");
        let prov = &dc.provisioning;
        ensure!(
            prov.read_block(&bob_p, alice_image, 0).is_err(),
            "run {run}: bob resolved alice's image"
        );
        let bob_session = bob.enclave("b").ctx("enclave")?.members[&node].session;
        let bob_image = bob.enclave("b").ctx("enclave")?.image;
        let held = prov.blocks_held_for(&alice_p);
        let overlap: Vec<_> = prov.reachable_blocks(&bob_p).intersection(&held).copied().collect();
        ensure!(overlap.is_empty(), "run {run}: bob reaches {} of alice's blocks", overlap.len());
        let mut prov = prov.clone();
        for index in &disk {
            let served = prov.serve_block(bob_session, *index).ctx("serve")?;
            let own = prov.read_block(&bob_p, bob_image, *index).ctx("read")?;
            ensure!(served == own, "run {run}: block {index} of bob's session is not bob's");
        }
        let _: SessionId = bob_session;
    }
    Ok(format!(
        "{runs} runs, {planted_bytes} planted memory bytes and {planted_blocks} planted disk blocks, none visible to the successor"
    ))
}

#[derive(Clone)]
struct OracleImage {
    blocks: BTreeMap<u64, Vec<u8>>,
    size: u64,
    read_only: bool,
}

impl OracleImage {
    fn block(&self, index: u64) -> Vec<u8> {
        self.blocks.get(&index).cloned().unwrap_or_else(|| vec![0; BLOCK_SIZE])
    }
}

fn padded(bytes: &[u8]) -> Vec<u8> {
    let mut b = bytes.to_vec();
    b.resize(BLOCK_SIZE, 0);
    b
}

fn random_bytes(rng: &mut impl Rng) -> Vec<u8> {
    let len = rng.gen_range(1..96);
    let mut b = vec![0u8; len];
    if rng.gen_bool(0.9) {
        rng.fill_bytes(&mut b);
    }
    b
}

/// One random operation sequence checked against a flat copy of every image.
fn cow_sequence(seq: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xac7 + seq);
    let owner = ProjectId::new("o");
    let other = ProjectId::new("x");
    let mut store = ProvisioningService::new();
    let mut oracle: BTreeMap<ImageId, OracleImage> = BTreeMap::new();
    let mut deleted: Vec<ImageId> = Vec::new();
    let mut sessions: BTreeMap<SessionId, (ImageId, OracleImage, NodeId)> = BTreeMap::new();
    let mut names = 0u32;
    let mut name = || {
        names += 1;
        format!("img{names}")
    };
    let mut ops = 0;
    let steps = rng.gen_range(5..40);
    for _ in 0..steps {
        ops += 1;
        let ids: Vec<ImageId> = oracle.keys().copied().collect();
        let pick = ids.choose(&mut rng).copied();
        match (rng.gen_range(0..9), pick) {
            (0, _) | (_, None) => {
                let blocks = rng.gen_range(1..4);
                let mut content = Vec::new();
                for _ in 0..blocks {
                    let chunk = if rng.gen_bool(0.2) { vec![0; BLOCK_SIZE] } else { padded(&random_bytes(&mut rng)) };
                    content.extend(chunk);
                }
                content.truncate(content.len() - rng.gen_range(0..BLOCK_SIZE / 2));
                let size = rng.gen_range(blocks as u64..=MAX_IMAGE_BLOCKS);
                let id = store.create(&owner, &name(), &content, Some(size)).ctx("create")?;
                let blocks = content
                    .chunks(BLOCK_SIZE)
                    .enumerate()
                    .map(|(i, c)| (i as u64, padded(c)))
                    .collect();
                oracle.insert(id, OracleImage { blocks, size, read_only: false });
            }
            (1 | 2, Some(id)) => {
                let img = oracle.get_mut(&id).expect("picked");
                let index = rng.gen_range(0..img.size);
                let bytes = random_bytes(&mut rng);
                let r = store.write_block(&owner, id, index, &bytes);
                ensure!(r.is_ok() != img.read_only, "seq {seq}: write to {id} gave {r:?}");
                if !img.read_only {
                    img.blocks.insert(index, padded(&bytes));
                }
            }
            (3, Some(id)) => {
                let img = &oracle[&id];
                let index = rng.gen_range(0..img.size);
                let got = store.read_block(&owner, id, index).ctx("read")?;
                ensure!(got == img.block(index), "seq {seq}: {id} block {index} differs");
                ensure!(store.read_block(&owner, id, img.size).is_err(), "seq {seq}: read past the end");
                ensure!(store.read_block(&other, id, index).is_err(), "seq {seq}: foreign read allowed");
            }
            (4, Some(id)) => {
                let snap = store.snapshot(&owner, id, &name()).ctx("snapshot")?;
                let mut copy = oracle[&id].clone();
                copy.read_only = true;
                oracle.insert(snap, copy);
            }
            (5, Some(id)) => {
                let clone = store.clone_image(&owner, id, &name()).ctx("clone")?;
                let mut copy = oracle[&id].clone();
                copy.read_only = false;
                oracle.insert(clone, copy);
            }
            (6, Some(id)) => {
                let in_use = sessions.values().any(|(src, _, _)| *src == id);
                let r = store.delete(&owner, id);
                ensure!(r.is_ok() != in_use, "seq {seq}: delete of {id} gave {r:?}");
                if !in_use {
                    oracle.remove(&id);
                    deleted.push(id);
                }
            }
            (7, Some(id)) => {
                let node = NodeId(rng.gen_range(0..3));
                let busy = sessions.values().any(|(_, _, n)| *n == node);
                let r = store.open_session(&owner, id, node);
                ensure!(r.is_ok() != busy, "seq {seq}: session on {node} gave {r:?}");
                if let Ok(s) = r {
                    let mut copy = oracle[&id].clone();
                    copy.read_only = false;
                    sessions.insert(s, (id, copy, node));
                }
            }
            (_, Some(_)) => {
                let Some(s) = sessions.keys().copied().collect::<Vec<_>>().choose(&mut rng).copied() else {
                    continue;
                };
                let (_, img, _) = sessions.get_mut(&s).expect("picked");
                let index = rng.gen_range(0..img.size);
                match rng.gen_range(0..4) {
                    0 => {
                        let bytes = random_bytes(&mut rng);
                        store.session_write(s, index, &bytes).ctx("session write")?;
                        img.blocks.insert(index, padded(&bytes));
                    }
                    1 => {
                        let (_, img, _) = sessions.remove(&s).expect("picked");
                        if rng.gen_bool(0.5) {
                            let saved = store.close_session(s, Some(&name())).ctx("close")?.ctx_opt("saved image")?;
                            oracle.insert(saved, img);
                        } else {
                            ensure!(store.close_session(s, None).ctx("close")?.is_none(), "seq {seq}: discard saved");
                        }
                    }
                    _ => {
                        let got = store.serve_block(s, index).ctx("serve")?;
                        ensure!(got == img.block(index), "seq {seq}: session {s} block {index} differs");
                    }
                }
            }
        }
    }
    // Final sweep over every touched block plus a few untouched ones.
    for (id, img) in &oracle {
        let mut indices: BTreeSet<u64> = img.blocks.keys().copied().collect();
        for _ in 0..4 {
            indices.insert(rng.gen_range(0..img.size));
        }
        for i in indices {
            let got = store.read_block(&owner, *id, i).ctx("sweep")?;
            ensure!(got == img.block(i), "seq {seq}: final {id} block {i} differs");
        }
        let info = store.info(&owner, *id).ctx("info")?;
        ensure!(info.size_blocks == img.size && info.read_only == img.read_only, "seq {seq}: {id} info differs");
    }
    for id in deleted {
        ensure!(store.read_block(&owner, id, 0).is_err(), "seq {seq}: deleted {id} still resolves");
    }
    for (s, (_, img, _)) in &sessions {
        for i in img.blocks.keys() {
            ensure!(store.serve_block(*s, *i).ctx("serve")? == img.block(*i), "seq {seq}: session {s} block {i}");
        }
    }
    Ok(ops)
}

fn ac7_images() -> Outcome {
    let sequences = 1000u64;
    let mut ops = 0;
    for seq in 0..sequences {
        ops += cow_sequence(seq)?;
    }

    let mut worst = 0.0f64;
    let mut boots = 0;
    for (name, text) in BUNDLED {
        let scenario = Scenario::parse(text).ctx(name)?;
        let tenants = scenario.tenants.clone();
        let mut runner = ScenarioRunner::new(scenario).ctx(name)?;
        let remaining = runner.remaining();
        runner.run_steps(remaining).ctx(name)?;
        let dc = runner.api().datacenter();
        let mut images: BTreeMap<u64, ImageId> = BTreeMap::new();
        let mut fetched: BTreeMap<u64, u64> = BTreeMap::new();
        for e in dc.trace().events() {
            let Some(s) = e.detail["session"].as_u64() else { continue };
            match e.event.as_str() {
                "session_opened" => {
                    images.insert(s, serde_json::from_value(e.detail["image"].clone()).ctx("image id")?);
                }
                "session_closed" => {
                    fetched.insert(s, e.detail["blocks_fetched"].as_u64().unwrap_or_default());
                }
                _ => {}
            }
        }
        for session in dc.provisioning.sessions() {
            let key = serde_json::to_value(session.id).ctx("session id")?.as_u64().ctx_opt("numeric id")?;
            fetched.insert(key, session.blocks_fetched() as u64);
        }
        for (s, image) in &images {
            let size = tenants
                .iter()
                .find_map(|t| dc.provisioning.info(&ProjectId::new(t.as_str()), *image).ok())
                .ctx_opt("image info")?
                .size_blocks;
            let n = fetched.get(s).copied().ctx_opt("fetch count")?;
            let share = n as f64 / size as f64;
            ensure!(share < 0.01, "{name}: session {s} fetched {n} of {size} blocks");
            worst = worst.max(share);
            boots += 1;
        }
    }
    ensure!(boots > 0, "no lazy boots in the bundled scenarios");
    Ok(format!(
        "{sequences} sequences ({ops} operations) match the flat-copy oracle; {boots} lazy boots fetched at most {:.3}% of blocks",
        worst * 100.0
    ))
}

fn ac8_tap() -> Outcome {
    let mut low = Vec::new();
    for tier in [SecurityTier::Basic, SecurityTier::Attested] {
        let mut api = common::api(common::config(800, 2, FirmwareKind::UefiChain), &["tenant"]);
        let mut orch = common::with_enclave(&mut api, "tenant", "e", tier, 8);
        for n in 0..2 {
            ensure!(orch.node_add(&mut api, "e", Some(NodeId(n))).ctx("node_add")?.is_member(), "{tier}: node {n}");
        }
        for i in 0..10 {
            api.datacenter_mut()
                .send(NodeId(0), NodeId(1), format!("hello {i}").as_bytes())
                .ctx("send")?;
        }
        let plain = api.datacenter().tap(&Observer::Provider).iter().filter(|o| o.plaintext.is_some()).count();
        ensure!(plain >= 1, "{tier}: provider recovered no plaintext");
        low.push(format!("{tier} {plain}"));
    }

    let nodes = 4u32;
    let mut api = common::api(common::config(801, nodes, FirmwareKind::LinuxbootFlash), &["tenant"]);
    let mut orch = common::with_enclave(&mut api, "tenant", "e", SecurityTier::Full, 9);
    for n in 0..nodes {
        ensure!(orch.node_add(&mut api, "e", Some(NodeId(n))).ctx("node_add")?.is_member(), "full: node {n}");
    }
    api.datacenter_mut().advance(2);
    let first = api.datacenter().fabric.tap_records().len() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(0xac8);
    let mut sent: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
    for _ in 0..1000 {
        let from = rng.gen_range(0..nodes);
        let to = (from + rng.gen_range(1..nodes)) % nodes;
        let mut payload = vec![0u8; rng.gen_range(1..256)];
        rng.fill_bytes(&mut payload);
        let seq = api.datacenter().fabric.tap_records().len() as u64;
        api.datacenter_mut().send(NodeId(from), NodeId(to), &payload).ctx("send")?;
        sent.insert(seq, payload);
    }
    let dc = api.datacenter();
    let provider = dc.tap(&Observer::Provider);
    let leaked = provider.iter().filter(|o| o.plaintext.is_some()).count();
    ensure!(leaked == 0, "full: provider recovered {leaked} plaintexts");

    let holder = dc.tap(&Observer::KeyHolder(orch.session_keys("e").ctx("keys")?));
    let mut recovered = 0;
    for o in holder.iter().filter(|o| o.seq >= first) {
        let Some(expected) = sent.get(&o.seq) else { continue };
        ensure!(o.encrypted, "full: frame {} crossed the wire in the clear", o.seq);
        ensure!(o.plaintext.as_ref() == Some(expected), "full: key holder could not read frame {}", o.seq);
        recovered += 1;
    }
    ensure!(recovered == sent.len(), "full: key holder saw {recovered} of {} frames", sent.len());
    Ok(format!(
        "provider plaintexts: {}; full tier: provider 0 of {} tapped frames, key holder {recovered}/{}",
        low.join(", "),
        provider.len(),
        sent.len()
    ))
}

fn ac9_determinism() -> Outcome {
    let mut lines = Vec::new();
    for (name, text) in BUNDLED {
        let mut traces = Vec::new();
        for run in 0..5 {
            let outcome = run_scenario_str(text).ctx(name)?;
            ensure!(outcome.passed(), "{name}: run {run} failed its assertions");
            traces.push(outcome.trace_jsonl());
        }
        ensure!(traces.iter().all(|t| t == &traces[0]), "{name}: traces differ across runs");
        lines.push(format!("{name} ({} bytes)", traces[0].len()));
    }
    Ok(format!("5 identical runs each: {}", lines.join(", ")))
}

fn certified_tpm(seed: u8) -> Tpm {
    let mut tpm = Tpm::new([seed; 32]);
    let aik = tpm.create_aik([seed.wrapping_add(100); 32]);
    let credential = make_credential(&tpm.ek_public(), &aik, b"challenge", [seed.wrapping_add(200); 32]);
    tpm.activate_credential(&credential).expect("credential for this TPM");
    tpm
}

fn ac10_quotes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xac10);
    let mut tpm = certified_tpm(1);
    let other = certified_tpm(2);
    let aik = tpm.aik_public().expect("aik");
    let selection = PcrSelection::new([PCR_PLATFORM, PCR_BOOT, PCR_RUNTIME]).expect("selection");
    let other_selection = PcrSelection::new([PCR_PLATFORM, PCR_BOOT]).expect("selection");
    // An independent replay of every extend gives the expected registers.
    let mut reference = PcrBank::new();
    for (i, pcr) in [PCR_PLATFORM, PCR_BOOT, PCR_RUNTIME].into_iter().enumerate() {
        let m = Digest::of(format!("measurement {i}").as_bytes());
        tpm.extend(pcr, &m).ctx("extend")?;
        reference.extend(pcr, &m).ctx("extend")?;
    }
    let mut verifier = Verifier::new(3);
    let nonce = |rng: &mut ChaCha8Rng| {
        let mut b = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut b);
        Nonce::from_bytes(b)
    };

    let mut accepted = Vec::new();
    for i in 0..1000 {
        if i % 100 == 50 {
            let m = Digest::of(format!("runtime {i}").as_bytes());
            tpm.extend(PCR_RUNTIME, &m).ctx("extend")?;
            reference.extend(PCR_RUNTIME, &m).ctx("extend")?;
        }
        let n = nonce(&mut rng);
        let quote = tpm.quote(n, &selection).ctx("quote")?;
        let expected = reference.composite(&selection);
        let r = verifier.check_quote(&aik, &n, &selection, &expected, &quote);
        ensure!(r.is_ok(), "fresh quote {i} rejected: {r:?}");
        accepted.push((n, quote));
    }

    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..1000 {
        let n = nonce(&mut rng);
        let expected = reference.composite(&selection);
        let mut quote = tpm.quote(n, &selection).ctx("quote")?;
        let mut check_nonce = n;
        let mut check_selection = selection.clone();
        let mut check_expected = expected;
        let kind = match i % 8 {
            0 => {
                // Quotes taken since the last extend still match the registers.
                let (old_n, old) = accepted[950..].choose(&mut rng).expect("accepted").clone();
                check_nonce = old_n;
                quote = old;
                "replay"
            }
            1 => {
                check_nonce = nonce(&mut rng);
                "stale nonce"
            }
            2 => {
                let bit = rng.gen_range(0..512);
                quote.signature[bit / 8] ^= 1 << (bit % 8);
                "signature bit"
            }
            3 => {
                let mut bytes = *quote.composite.as_bytes();
                let bit = rng.gen_range(0..256);
                bytes[bit / 8] ^= 1 << (bit % 8);
                quote.composite = Digest::from_bytes(bytes);
                "composite bit"
            }
            4 => {
                let mut bytes = *quote.nonce.as_bytes();
                let bit = rng.gen_range(0..NONCE_LEN * 8);
                bytes[bit / 8] ^= 1 << (bit % 8);
                quote.nonce = Nonce::from_bytes(bytes);
                "nonce bit"
            }
            5 => {
                quote = tpm.quote(n, &other_selection).ctx("quote")?;
                "selection"
            }
            6 => {
                let forged = other.quote(n, &selection).ctx("quote")?;
                quote.signature = forged.signature;
                "foreign signature"
            }
            _ => {
                let mut wrong = reference.clone();
                wrong.extend(PCR_BOOT, &Digest::of(b"unexpected")).ctx("extend")?;
                check_expected = wrong.composite(&selection);
                check_selection = selection.clone();
                "register state"
            }
        };
        let r = verifier.check_quote(&aik, &check_nonce, &check_selection, &check_expected, &quote);
        ensure!(r.is_err(), "mutated quote {i} ({kind}) accepted");
        if kind == "replay" {
            ensure!(r == Err(Cause::Replay), "replayed quote {i} gave {r:?}");
        }
        *kinds.entry(kind).or_default() += 1;
    }
    let kinds: Vec<String> = kinds.iter().map(|(k, n)| format!("{k}={n}")).collect();
    Ok(format!("1000/1000 fresh accepted; 1000/1000 bad rejected ({})", kinds.join(" ")))
}
