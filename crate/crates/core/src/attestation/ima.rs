// SPDX-License-Identifier: Apache-2.0

//! Runtime measurement list and the tenant's runtime whitelist.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::tpm::Digest;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MeasurementEntry {
    pub path: String,
    pub sha256: Digest,
}

impl MeasurementEntry {
    pub fn of(path: impl Into<String>, content: &[u8]) -> Self {
        Self {
            path: path.into(),
            sha256: Digest::of(content),
        }
    }
}

/// Ordered log of everything measured at runtime. Its aggregate is the
/// value the runtime register must hold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasurementList {
    pub entries: Vec<MeasurementEntry>,
}

impl MeasurementList {
    pub fn push(&mut self, entry: MeasurementEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn aggregate(&self) -> Digest {
        self.entries.iter().fold(Digest::ZERO, |acc, e| acc.extend(&e.sha256))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuntimeWhitelist {
    pub allowed: BTreeSet<MeasurementEntry>,
}

impl RuntimeWhitelist {
    pub fn allows(&self, entry: &MeasurementEntry) -> bool {
        self.allowed.contains(entry)
    }

    /// First entry of `list` that the whitelist does not allow.
    pub fn first_violation<'a>(&self, list: &'a MeasurementList) -> Option<&'a MeasurementEntry> {
        list.entries.iter().find(|e| !self.allows(e))
    }
}

impl FromIterator<(String, Digest)> for RuntimeWhitelist {
    fn from_iter<T: IntoIterator<Item = (String, Digest)>>(iter: T) -> Self {
        Self {
            allowed: iter
                .into_iter()
                .map(|(path, sha256)| MeasurementEntry { path, sha256 })
                .collect(),
        }
    }
}
