// SPDX-License-Identifier: Apache-2.0

//! HTTP plumbing for the `bolted` binary: a server that exposes one
//! emulated datacenter's service API and a client transport for the
//! orchestrator.

pub mod http;
pub mod server;
