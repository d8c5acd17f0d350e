// SPDX-License-Identifier: Apache-2.0

//! Replayable scenarios: a datacenter description, a script of timed
//! actions and assertions over the resulting trace.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::{Client, ImageSpec, Orchestrator, OrchestratorConfig, OrchestratorError, SecurityTier};
use crate::api::Api;
use crate::bootchain::BootStage;
use crate::datacenter::{Datacenter, DatacenterConfig};
use crate::fabric::{Observer, TraceEvent};
use crate::ids::NodeId;
use crate::isolation::AllocationState;

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("alice_basic", include_str!("../../scenarios/alice_basic.json")),
    ("bob_attested", include_str!("../../scenarios/bob_attested.json")),
    ("charlie_full", include_str!("../../scenarios/charlie_full.json")),
    ("release_reuse", include_str!("../../scenarios/release_reuse.json")),
    ("revocation", include_str!("../../scenarios/revocation.json")),
    ("tamper_firmware", include_str!("../../scenarios/tamper_firmware.json")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("step {step} ({action}): {source}")]
    Step {
        step: usize,
        action: String,
        source: OrchestratorError,
    },
}

impl ScenarioError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Usage(_) => 64,
            ScenarioError::Step { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub datacenter: DatacenterConfig,
    /// Projects the provider registers before the script starts.
    pub tenants: Vec<String>,
    #[serde(default = "one")]
    pub poll_interval: u64,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

fn one() -> u64 {
    1
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Usage(format!("malformed scenario: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step {
    /// Advance to this tick before acting.
    #[serde(default)]
    pub at: Option<u64>,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    EnclaveCreate {
        tenant: String,
        enclave: String,
        tier: SecurityTier,
        #[serde(default)]
        image: ImageSpec,
    },
    NodeAdd {
        tenant: String,
        enclave: String,
        #[serde(default)]
        node: Option<NodeId>,
    },
    NodeRelease {
        tenant: String,
        enclave: String,
        node: NodeId,
    },
    Enforce {
        tenant: String,
        enclave: String,
    },
    Tamper {
        node: NodeId,
        stage: BootStage,
        #[serde(default)]
        bit: usize,
    },
    Exec {
        node: NodeId,
        path: String,
        content: String,
    },
    Send {
        node: NodeId,
        to: NodeId,
        payload: String,
        #[serde(default = "one_u32")]
        count: u32,
    },
    TenantWrite {
        node: NodeId,
        offset: usize,
        data: String,
    },
    Advance {
        ticks: u64,
    },
}

fn one_u32() -> u32 {
    1
}

impl Action {
    fn name(&self) -> &'static str {
        match self {
            Action::EnclaveCreate { .. } => "enclave_create",
            Action::NodeAdd { .. } => "node_add",
            Action::NodeRelease { .. } => "node_release",
            Action::Enforce { .. } => "enforce",
            Action::Tamper { .. } => "tamper",
            Action::Exec { .. } => "exec",
            Action::Send { .. } => "send",
            Action::TenantWrite { .. } => "tenant_write",
            Action::Advance { .. } => "advance",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "assert", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// The life-cycle steps of the node's most recent addition.
    Lifecycle { node: NodeId, steps: Vec<u64> },
    NodeState { node: NodeId, state: AllocationState },
    /// Number of trace events named `event`, optionally for one node.
    TraceCount {
        event: String,
        #[serde(default)]
        node: Option<NodeId>,
        #[serde(default)]
        min: Option<usize>,
        #[serde(default)]
        max: Option<usize>,
    },
    /// Frames whose plaintext the provider recovers from its tap.
    TapPlaintext {
        #[serde(default)]
        min: Option<usize>,
        #[serde(default)]
        max: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub name: String,
    pub trace: Vec<TraceEvent>,
    pub results: Vec<AssertionResult>,
}

impl ScenarioOutcome {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }

    pub fn trace_jsonl(&self) -> String {
        self.trace.iter().map(|e| e.to_json_line() + "\n").collect()
    }
}

/// Executes a scenario step by step. Orchestrators can be restarted from
/// their registry files in between.
pub struct ScenarioRunner {
    scenario: Scenario,
    api: Api,
    orchestrators: BTreeMap<String, Orchestrator>,
    next: usize,
}

impl ScenarioRunner {
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        let mut api = Api::new(Datacenter::new(scenario.datacenter.clone()));
        let mut orchestrators = BTreeMap::new();
        for tenant in &scenario.tenants {
            Client::new(&mut api, Some("provider"))
                .post("/projects", json!({ "name": tenant }))
                .map_err(|e| ScenarioError::Usage(format!("tenant {tenant}: {e}")))?;
            orchestrators.insert(tenant.clone(), Orchestrator::new(Self::config_for(&scenario, tenant)));
        }
        Ok(Self {
            scenario,
            api,
            orchestrators,
            next: 0,
        })
    }

    fn config_for(scenario: &Scenario, tenant: &str) -> OrchestratorConfig {
        OrchestratorConfig {
            tenant: tenant.to_string(),
            poll_interval: scenario.poll_interval,
            single_airlock: scenario.datacenter.single_airlock,
            secret_seed: scenario.datacenter.seed,
            ..OrchestratorConfig::default()
        }
    }

    pub fn api(&self) -> &Api {
        &self.api
    }

    pub fn api_mut(&mut self) -> &mut Api {
        &mut self.api
    }

    pub fn orchestrator(&self, tenant: &str) -> Option<&Orchestrator> {
        self.orchestrators.get(tenant)
    }

    pub fn remaining(&self) -> usize {
        self.scenario.steps.len() - self.next
    }

    /// Replaces every orchestrator with a fresh one that loads its registry
    /// from `dir`, after saving the current registries there.
    pub fn restart_orchestrators(&mut self, dir: &Path) -> Result<(), OrchestratorError> {
        for (tenant, orch) in &mut self.orchestrators {
            let path = dir.join(format!("{tenant}.registry.json"));
            orch.registry().save(&path)?;
            *orch = Orchestrator::with_registry(Self::config_for(&self.scenario, tenant), path)?;
        }
        Ok(())
    }

    fn orch<'a>(
        orchestrators: &'a mut BTreeMap<String, Orchestrator>,
        tenant: &str,
    ) -> Result<&'a mut Orchestrator, OrchestratorError> {
        orchestrators
            .get_mut(tenant)
            .ok_or_else(|| OrchestratorError::NotFound(format!("tenant {tenant} is not part of the scenario")))
    }

    /// Runs up to `count` more steps.
    pub fn run_steps(&mut self, count: usize) -> Result<(), ScenarioError> {
        let end = (self.next + count).min(self.scenario.steps.len());
        while self.next < end {
            let index = self.next;
            let step = self.scenario.steps[index].clone();
            self.next += 1;
            self.run_step(&step).map_err(|source| ScenarioError::Step {
                step: index,
                action: step.action.name().to_string(),
                source,
            })?;
        }
        Ok(())
    }

    fn run_step(&mut self, step: &Step) -> Result<(), OrchestratorError> {
        if let Some(at) = step.at {
            let now = self.api.datacenter().now();
            if at > now {
                self.api.datacenter_mut().advance(at - now);
            }
        }
        let sim = |e: crate::datacenter::SimError| {
            OrchestratorError::Call(super::CallError::Service {
                status: 0,
                code: e.code().to_string(),
                message: e.to_string(),
            })
        };
        match &step.action {
            Action::EnclaveCreate {
                tenant,
                enclave,
                tier,
                image,
            } => {
                let orch = Self::orch(&mut self.orchestrators, tenant)?;
                orch.enclave_create(&mut self.api, enclave, Some(*tier), image).map(|_| ())
            }
            Action::NodeAdd { tenant, enclave, node } => {
                let orch = Self::orch(&mut self.orchestrators, tenant)?;
                orch.node_add(&mut self.api, enclave, *node).map(|_| ())
            }
            Action::NodeRelease { tenant, enclave, node } => {
                let orch = Self::orch(&mut self.orchestrators, tenant)?;
                orch.node_release(&mut self.api, enclave, *node)
            }
            Action::Enforce { tenant, enclave } => {
                let orch = Self::orch(&mut self.orchestrators, tenant)?;
                orch.enforce(&mut self.api, enclave).map(|_| ())
            }
            Action::Tamper { node, stage, bit } => self.api.datacenter_mut().tamper(*node, *stage, *bit).map_err(sim),
            Action::Exec { node, path, content } => self
                .api
                .datacenter_mut()
                .exec(*node, path, Some(content.as_bytes().to_vec()))
                .map_err(sim),
            Action::Send {
                node,
                to,
                payload,
                count,
            } => {
                for i in 0..*count {
                    let body = format!("{payload} #{i}");
                    self.api.datacenter_mut().send(*node, *to, body.as_bytes()).map_err(sim)?;
                }
                Ok(())
            }
            Action::TenantWrite { node, offset, data } => self
                .api
                .datacenter_mut()
                .tenant_write(*node, *offset, data.as_bytes())
                .map_err(sim),
            Action::Advance { ticks } => {
                self.api.datacenter_mut().advance(*ticks);
                Ok(())
            }
        }
    }

    /// Runs the remaining steps and evaluates the assertions.
    pub fn finish(mut self) -> Result<ScenarioOutcome, ScenarioError> {
        self.run_steps(usize::MAX)?;
        let dc = self.api.datacenter();
        let results = self.scenario.assertions.iter().map(|a| evaluate(dc, a)).collect();
        Ok(ScenarioOutcome {
            name: self.scenario.name.clone(),
            trace: dc.trace().events().to_vec(),
            results,
        })
    }
}

fn within(n: usize, min: Option<usize>, max: Option<usize>) -> bool {
    min.is_none_or(|m| n >= m) && max.is_none_or(|m| n <= m)
}

fn bounds(min: Option<usize>, max: Option<usize>) -> String {
    match (min, max) {
        (Some(a), Some(b)) if a == b => format!("== {a}"),
        (Some(a), Some(b)) => format!("in {a}..={b}"),
        (Some(a), None) => format!(">= {a}"),
        (None, Some(b)) => format!("<= {b}"),
        (None, None) => "any".into(),
    }
}

/// Life-cycle steps of the most recent addition of `node`.
pub fn last_lifecycle(trace: &[TraceEvent], node: NodeId) -> Vec<u64> {
    let steps: Vec<u64> = trace
        .iter()
        .filter(|e| e.event == "lifecycle_step" && e.node_id == Some(node))
        .filter_map(|e| e.detail["step"].as_u64())
        .collect();
    let start = steps.iter().rposition(|&s| s == 1).unwrap_or(0);
    steps[start..].to_vec()
}

fn evaluate(dc: &Datacenter, assertion: &Assertion) -> AssertionResult {
    let trace = dc.trace().events();
    let (description, passed, detail) = match assertion {
        Assertion::Lifecycle { node, steps } => {
            let seen = last_lifecycle(trace, *node);
            (format!("lifecycle of {node} is {steps:?}"), &seen == steps, format!("saw {seen:?}"))
        }
        Assertion::NodeState { node, state } => {
            let actual = dc.isolation.node(*node).map(|r| r.state);
            (
                format!("{node} is {state}"),
                actual.as_ref() == Ok(state),
                format!("saw {actual:?}"),
            )
        }
        Assertion::TraceCount { event, node, min, max } => {
            let n = trace
                .iter()
                .filter(|e| &e.event == event && node.is_none_or(|id| e.node_id == Some(id)))
                .count();
            let scope = node.map_or(String::new(), |id| format!(" for {id}"));
            (
                format!("count of {event}{scope} {}", bounds(*min, *max)),
                within(n, *min, *max),
                format!("saw {n}"),
            )
        }
        Assertion::TapPlaintext { min, max } => {
            let n = dc
                .tap(&Observer::Provider)
                .iter()
                .filter(|o| o.plaintext.is_some())
                .count();
            (
                format!("provider tap plaintext frames {}", bounds(*min, *max)),
                within(n, *min, *max),
                format!("saw {n}"),
            )
        }
    };
    AssertionResult {
        description,
        passed,
        detail,
    }
}

/// Parses and runs a scenario document.
pub fn run_scenario_str(text: &str) -> Result<ScenarioOutcome, ScenarioError> {
    ScenarioRunner::new(Scenario::parse(text)?)?.finish()
}

pub fn run_scenario(path: &Path) -> Result<ScenarioOutcome, ScenarioError> {
    ScenarioRunner::new(Scenario::load(path)?)?.finish()
}
