// SPDX-License-Identifier: Apache-2.0

//! JSON-lines event trace, the substrate for scenario assertions.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ids::{NetworkId, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: u64,
    pub component: String,
    pub event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network_id: Option<NetworkId>,
    #[serde(default)]
    pub detail: Value,
}

impl TraceEvent {
    pub fn new(tick: u64, component: &str, event: &str) -> Self {
        Self {
            tick,
            component: component.to_owned(),
            event: event.to_owned(),
            node_id: None,
            network_id: None,
            detail: Value::Null,
        }
    }

    pub fn node(mut self, node: NodeId) -> Self {
        self.node_id = Some(node);
        self
    }

    pub fn network(mut self, network: NetworkId) -> Self {
        self.network_id = Some(network);
        self
    }

    pub fn detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace events always serialize")
    }
}

#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    events: Vec<TraceEvent>,
}

impl TraceLog {
    pub fn push(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn since(&self, index: usize) -> &[TraceEvent] {
        &self.events[index.min(self.events.len())..]
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&event.to_json_line());
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<TraceEvent>, serde_json::Error> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }
}
