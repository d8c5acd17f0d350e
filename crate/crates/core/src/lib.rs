// SPDX-License-Identifier: Apache-2.0

//! An emulated bare-metal cloud with tenant-verifiable servers.
//!
//! The datacenter hardware (nodes, TPMs, VLAN switch) lives in [`fabric`] and
//! [`tpm`]. Three services run on top of it: [`isolation`] (the provider's
//! minimal TCB), [`provisioning`] (copy-on-write network boot images) and
//! [`attestation`] (registrar and verifier). [`bootchain`] models the
//! measured firmware boot, and [`orchestrator`] drives the server life cycle
//! through the services' JSON APIs.

pub mod api;
pub mod attestation;
pub mod bootchain;
pub mod crypto;
pub mod datacenter;
pub mod fabric;
pub mod ids;
pub mod isolation;
pub mod orchestrator;
pub mod provisioning;
pub mod tpm;
