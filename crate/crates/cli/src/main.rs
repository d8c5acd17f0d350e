// SPDX-License-Identifier: Apache-2.0

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bolted::api::Api;
use bolted::datacenter::{Datacenter, DatacenterConfig};
use bolted::ids::NodeId;
use bolted::orchestrator::scenario::{self, Scenario, ScenarioRunner};
use bolted::orchestrator::{Client, ImageSpec, Orchestrator, OrchestratorConfig, SecurityTier, Transport};
use bolted_cli::http::HttpTransport;
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

#[derive(Parser)]
#[command(name = "bolted", version, about = "Tenant orchestrator for an emulated bare-metal cloud")]
struct Cli {
    /// Orchestrator config (JSON): tenant, endpoints, tier, poll interval.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Enclave registry file.
    #[arg(long, global = true, default_value = "bolted-registry.json")]
    registry: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Host the services of one emulated datacenter over HTTP.
    Serve {
        /// Datacenter config (JSON).
        #[arg(long)]
        datacenter: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
    },
    /// Provider administration.
    #[command(subcommand)]
    Admin(AdminCommand),
    /// Create and list enclaves.
    #[command(subcommand)]
    Enclave(EnclaveCommand),
    /// Add, release and inspect enclave members.
    #[command(subcommand)]
    Node(NodeCommand),
    /// Detach revoked members from their enclave network.
    Enforce { enclave: String },
    /// Scripted end-to-end runs against an in-process datacenter.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
    /// Read the datacenter trace log.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Subcommand)]
enum AdminCommand {
    /// Register a tenant project.
    ProjectCreate { name: String },
}

#[derive(Subcommand)]
enum EnclaveCommand {
    Create {
        id: String,
        #[arg(long)]
        tier: Option<SecurityTier>,
        /// Tenant OS image spec (JSON).
        #[arg(long)]
        image: Option<PathBuf>,
    },
    List,
}

#[derive(Subcommand)]
enum NodeCommand {
    Add {
        enclave: String,
        #[arg(long)]
        node: Option<u32>,
    },
    Release { enclave: String, node: u32 },
    Status { enclave: String, node: u32 },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Run a scenario file, or a bundled scenario by name.
    Run {
        file: String,
        /// Write the trace log here as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    List,
}

#[derive(Subcommand)]
enum TraceCommand {
    Dump {
        #[arg(long, default_value_t = 0)]
        since: u64,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Orchestrator(#[from] bolted::orchestrator::OrchestratorError),
    #[error(transparent)]
    Call(#[from] bolted::orchestrator::CallError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn print(value: &impl serde::Serialize) {
    // A closed pipe (`| head`) is not an error worth a panic.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn run_scenario(file: &str, trace: Option<&Path>) -> Result<i32, CliError> {
    let scenario = if Path::new(file).exists() {
        Scenario::load(Path::new(file))
    } else if let Some(text) = scenario::bundled(file) {
        Scenario::parse(text)
    } else {
        return Err(CliError::Usage(format!("{file}: no such file or bundled scenario")));
    };
    let outcome = match scenario.and_then(ScenarioRunner::new).and_then(ScenarioRunner::finish) {
        Ok(outcome) => outcome,
        Err(e) => {
            eprintln!("{e}");
            return Ok(e.exit_code());
        }
    };
    for r in &outcome.results {
        println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.description, r.detail);
    }
    if let Some(path) = trace {
        std::fs::write(path, outcome.trace_jsonl())?;
    }
    Ok(outcome.exit_code())
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let config: OrchestratorConfig = match &cli.config {
        Some(path) => read_json(path)?,
        None => OrchestratorConfig::default(),
    };
    let mut transport = HttpTransport::new(config.endpoints.clone());
    let transport: &mut dyn Transport = &mut transport;
    match cli.command {
        Command::Serve { datacenter, listen } => {
            let dc_config: DatacenterConfig = match datacenter {
                Some(path) => read_json(&path)?,
                None => DatacenterConfig::default(),
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(&listen).await?;
                eprintln!("serving {} nodes on {}", dc_config.nodes, listener.local_addr()?);
                bolted_cli::server::serve(listener, Api::new(Datacenter::new(dc_config))).await
            })?;
        }
        Command::Admin(AdminCommand::ProjectCreate { name }) => {
            print(&Client::new(transport, Some("provider")).post("/projects", json!({ "name": name }))?);
        }
        Command::Enclave(cmd) => {
            let mut orch = Orchestrator::with_registry(config, &cli.registry)?;
            match cmd {
                EnclaveCommand::Create { id, tier, image } => {
                    let spec: ImageSpec = match image {
                        Some(path) => read_json(&path)?,
                        None => ImageSpec::default(),
                    };
                    print(orch.enclave_create(transport, &id, tier, &spec)?);
                }
                EnclaveCommand::List => print(orch.registry()),
            }
        }
        Command::Node(cmd) => {
            let mut orch = Orchestrator::with_registry(config, &cli.registry)?;
            match cmd {
                NodeCommand::Add { enclave, node } => print(&orch.node_add(transport, &enclave, node.map(NodeId))?),
                NodeCommand::Release { enclave, node } => {
                    orch.node_release(transport, &enclave, NodeId(node))?;
                    print(&json!({ "released": node }));
                }
                NodeCommand::Status { enclave, node } => print(&orch.node_status(transport, &enclave, NodeId(node))?),
            }
        }
        Command::Enforce { enclave } => {
            let mut orch = Orchestrator::with_registry(config, &cli.registry)?;
            print(&orch.enforce(transport, &enclave)?);
        }
        Command::Scenario(ScenarioCommand::Run { file, trace }) => return run_scenario(&file, trace.as_deref()),
        Command::Scenario(ScenarioCommand::List) => {
            for (name, _) in scenario::BUNDLED {
                println!("{name}");
            }
        }
        Command::Trace(TraceCommand::Dump { since }) => {
            let body = Client::new(transport, None).get(&format!("/sim/trace?since={since}"))?;
            let mut out = std::io::stdout().lock();
            for event in body["events"].as_array().map_or(&[][..], Vec::as_slice) {
                if writeln!(out, "{}", serde_json::to_string(event).unwrap_or_default()).is_err() {
                    break;
                }
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(CliError::Usage(message)) => {
            eprintln!("usage: {message}");
            ExitCode::from(64)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

