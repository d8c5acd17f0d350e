// SPDX-License-Identifier: Apache-2.0

//! EK to AIK certification. The registrar keeps public keys and a hash of
//! each outstanding challenge; it never holds a secret.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AgentId, AttestationError};
use crate::ids::NodeId;
use crate::tpm::{make_credential, AikPublic, Credential, Digest, EkPublic};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrarRecord {
    pub node: NodeId,
    pub ek: EkPublic,
    pub aik: AikPublic,
    pub challenge_hash: Digest,
    pub certified: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Registrar {
    records: BTreeMap<AgentId, RegistrarRecord>,
}

impl Registrar {
    /// Starts certification of `aik`. `published_ek` is what the isolation
    /// service publishes for `node`; a different EK raises the spoofing alarm.
    #[allow(clippy::too_many_arguments)]
    pub fn enroll(
        &mut self,
        agent: &AgentId,
        node: NodeId,
        ek: EkPublic,
        aik: AikPublic,
        published_ek: Option<EkPublic>,
        challenge: [u8; 32],
        ephemeral_seed: [u8; 32],
    ) -> Result<Credential, AttestationError> {
        if published_ek != Some(ek) {
            return Err(AttestationError::Spoofing {
                node,
                presented: ek.to_hex(),
            });
        }
        self.records.insert(
            agent.clone(),
            RegistrarRecord {
                node,
                ek,
                aik,
                challenge_hash: Digest::of(&challenge),
                certified: false,
            },
        );
        Ok(make_credential(&ek, &aik, &challenge, ephemeral_seed))
    }

    pub fn confirm(&mut self, agent: &AgentId, response: &[u8]) -> Result<(), AttestationError> {
        let record = self
            .records
            .get_mut(agent)
            .ok_or_else(|| AttestationError::NotFound(agent.to_string()))?;
        if record.certified {
            return Ok(());
        }
        if Digest::of(response) != record.challenge_hash {
            return Err(AttestationError::CertificationDenied(agent.clone()));
        }
        record.certified = true;
        Ok(())
    }

    pub fn get(&self, agent: &AgentId) -> Option<&RegistrarRecord> {
        self.records.get(agent)
    }

    pub fn remove(&mut self, agent: &AgentId) {
        self.records.remove(agent);
    }

    /// The registrar's complete persistent state.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("registrar state serializes")
    }
}
