// SPDX-License-Identifier: Apache-2.0

use std::process::Command;

use bolted::api::Api;
use bolted::datacenter::{Datacenter, DatacenterConfig};
use bolted::orchestrator::{Client, Endpoints, ImageSpec, Orchestrator, OrchestratorConfig, SecurityTier};
use bolted_cli::http::HttpTransport;
use serde_json::json;

fn bolted() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bolted"))
}

/// Starts a server on an ephemeral port in a background thread.
fn spawn_server(nodes: u32) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let runtime = tokio::runtime::Runtime::new().unwrap();
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let dc = Datacenter::new(DatacenterConfig {
                nodes,
                seed: 4,
                ..DatacenterConfig::default()
            });
            bolted_cli::server::serve(listener, Api::new(dc)).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn endpoints(base: &str) -> Endpoints {
    Endpoints {
        isolation: base.into(),
        provisioning: base.into(),
        attestation: base.into(),
        sim: base.into(),
    }
}

#[test]
fn orchestrator_drives_a_full_tier_node_over_http() {
    let base = spawn_server(2);
    let mut transport = HttpTransport::new(endpoints(&base));
    Client::new(&mut transport, Some("provider"))
        .post("/projects", json!({ "name": "charlie" }))
        .unwrap();
    let mut orch = Orchestrator::new(OrchestratorConfig {
        tenant: "charlie".into(),
        ..OrchestratorConfig::default()
    });
    orch.enclave_create(&mut transport, "e", Some(SecurityTier::Full), &ImageSpec::default())
        .unwrap();
    let outcome = orch.node_add(&mut transport, "e", None).unwrap();
    assert!(outcome.is_member());
    let status = orch.node_status(&mut transport, "e", outcome.node()).unwrap();
    assert_eq!(status["attestation"]["status"], "passed");
    assert_eq!(status["runtime"]["runtime"]["state"], "running");
}

#[test]
fn http_errors_keep_code_and_status() {
    let base = spawn_server(1);
    let mut transport = HttpTransport::new(endpoints(&base));
    let err = Client::new(&mut transport, None)
        .post("/nodes/0/allocate", json!(null))
        .unwrap_err();
    assert_eq!(err.code(), "authorization");
    let err = Client::new(&mut transport, None).get("/nodes/7/metadata").unwrap_err();
    assert_eq!(err.code(), "not_found");
}

#[test]
fn cli_enclave_and_node_commands_against_a_server() {
    let base = spawn_server(2);
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let registry = dir.path().join("registry.json");
    let cfg = OrchestratorConfig {
        tenant: "bob".into(),
        endpoints: endpoints(&base),
        ..OrchestratorConfig::default()
    };
    std::fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let run = |args: &[&str]| {
        bolted()
            .arg("--config")
            .arg(&config)
            .arg("--registry")
            .arg(&registry)
            .args(args)
            .output()
            .unwrap()
    };
    assert!(run(&["admin", "project-create", "bob"]).status.success());
    let out = run(&["enclave", "create", "web", "--tier", "attested"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["node", "add", "web"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let added: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(added["result"], "member");
    // The registry on disk is all the state the next invocation needs.
    let out = run(&["node", "release", "web", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["node", "release", "web", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["trace", "dump"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.contains("node_released")));
}

#[test]
fn bundled_scenarios_exit_zero() {
    let out = bolted().args(["scenario", "list"]).output().unwrap();
    let names = String::from_utf8(out.stdout).unwrap();
    for name in ["charlie_full", "tamper_firmware"] {
        assert!(names.lines().any(|l| l == name));
        let out = bolted().args(["scenario", "run", name]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    }
}

#[test]
fn truncated_scenario_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, r#"{"name": "broken", "tenants": ["#).unwrap();
    let out = bolted().args(["scenario", "run"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn scenario_trace_is_written_as_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let out = bolted()
        .args(["scenario", "run", "alice_basic", "--trace"])
        .arg(&trace)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&trace).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["tick"].is_u64() && v["component"].is_string() && v["event"].is_string());
    }
}
