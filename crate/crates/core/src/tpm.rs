// SPDX-License-Identifier: Apache-2.0

//! Emulated Trusted Platform Module.
//!
//! Each node owns one [`Tpm`]: a bank of 24 SHA-256 PCRs that only change by
//! extension, a burned-in endorsement key (EK) and an attestation identity key
//! (AIK) created on demand. Quotes are Ed25519 signatures over
//! `nonce || composite`, where the composite hashes the selected registers in
//! ascending index order. The AIK is certified against the EK through
//! credential activation: a secret sealed to the EK and bound to the AIK
//! public key can only be recovered by the TPM that holds both.

use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as X25519Public, StaticSecret};

use crate::crypto::{kdf, SymmetricKey};

pub const PCR_COUNT: usize = 24;
/// Platform firmware (POST, option ROMs).
pub const PCR_PLATFORM: usize = 0;
/// Boot stages: iPXE, LinuxBoot runtime, attestation agent, tenant kernel.
pub const PCR_BOOT: usize = 4;
/// Runtime (IMA) measurements.
pub const PCR_RUNTIME: usize = 10;
pub const NONCE_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TpmError {
    #[error("PCR index {0} out of range (0..{PCR_COUNT})")]
    PcrRange(usize),
    #[error("empty PCR selection")]
    EmptySelection,
    #[error("no attestation identity key has been created")]
    NoAik,
    #[error("attestation identity key is not certified")]
    AikNotCertified,
    #[error("credential activation failed")]
    Activation,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QuoteError {
    #[error("quote nonce does not match the issued nonce")]
    NonceMismatch,
    #[error("quote was signed by an unexpected key")]
    WrongKey,
    #[error("quote signature is invalid")]
    BadSignature,
    #[error("quoted PCR selection differs from the requested one")]
    SelectionMismatch,
    #[error("quoted composite does not match the expected register values")]
    CompositeMismatch,
}

/// A SHA-256 value. Renders as lowercase hex everywhere.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(#[serde(with = "hex")] [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        Digest(bytes)
    }

    pub fn of(data: &[u8]) -> Self {
        Digest(Sha256::digest(data).into())
    }

    /// Hash of the concatenation of `parts`.
    pub fn of_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut hasher = Sha256::new();
        for part in parts {
            hasher.update(part);
        }
        Digest(hasher.finalize().into())
    }

    /// `H(self || measurement)`.
    pub fn extend(&self, measurement: &Digest) -> Digest {
        Digest::of_parts([&self.0[..], &measurement.0[..]])
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(text: &str) -> Result<Self, hex::FromHexError> {
        let mut bytes = [0u8; 32];
        hex::decode_to_slice(text, &mut bytes)?;
        Ok(Digest(bytes))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

/// Sorted, de-duplicated, non-empty set of PCR indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PcrSelection(Vec<usize>);

impl PcrSelection {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Result<Self, TpmError> {
        let mut indices: Vec<usize> = indices.into_iter().collect();
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(TpmError::EmptySelection);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= PCR_COUNT) {
            return Err(TpmError::PcrRange(bad));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

impl TryFrom<Vec<usize>> for PcrSelection {
    type Error = TpmError;

    fn try_from(value: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<PcrSelection> for Vec<usize> {
    fn from(value: PcrSelection) -> Self {
        value.0
    }
}

/// Hash over register values in ascending index order.
pub fn composite_of<'a>(values: impl IntoIterator<Item = &'a Digest>) -> Digest {
    Digest::of_parts(values.into_iter().map(|d| &d.0[..]))
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcrBank {
    registers: Vec<Digest>,
}

impl PcrBank {
    pub fn new() -> Self {
        Self {
            registers: vec![Digest::ZERO; PCR_COUNT],
        }
    }

    pub fn read(&self, index: usize) -> Result<Digest, TpmError> {
        self.registers.get(index).copied().ok_or(TpmError::PcrRange(index))
    }

    /// Replaces register `index` with `H(old || measurement)` and returns the
    /// new value.
    pub fn extend(&mut self, index: usize, measurement: &Digest) -> Result<Digest, TpmError> {
        let slot = self.registers.get_mut(index).ok_or(TpmError::PcrRange(index))?;
        *slot = slot.extend(measurement);
        Ok(*slot)
    }

    pub fn composite(&self, selection: &PcrSelection) -> Digest {
        composite_of(selection.indices().iter().map(|&i| &self.registers[i]))
    }
}

impl Default for PcrBank {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for PcrBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nonzero: Vec<_> = self
            .registers
            .iter()
            .enumerate()
            .filter(|(_, d)| **d != Digest::ZERO)
            .collect();
        f.debug_map().entries(nonzero).finish()
    }
}

macro_rules! public_key_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(#[serde(with = "hex")] [u8; 32]);

        impl $name {
            pub const fn from_bytes(bytes: [u8; 32]) -> Self {
                Self(bytes)
            }

            pub fn as_bytes(&self) -> &[u8; 32] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), &self.to_hex()[..16])
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }
    };
}

public_key_newtype!(
    /// Public half of the endorsement key (X25519).
    EkPublic
);
public_key_newtype!(
    /// Public half of an attestation identity key (Ed25519).
    AikPublic
);

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Nonce(#[serde(with = "hex")] [u8; NONCE_LEN]);

impl Nonce {
    pub const fn from_bytes(bytes: [u8; NONCE_LEN]) -> Self {
        Nonce(bytes)
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut bytes);
        Nonce(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; NONCE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({})", &hex::encode(self.0)[..16])
    }
}

/// A signed statement of PCR contents. Serializes to the quote wire format
/// `{nonce, selection, composite, signature, aik}` with hex byte strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub nonce: Nonce,
    pub selection: PcrSelection,
    pub composite: Digest,
    #[serde(with = "hex")]
    pub signature: [u8; 64],
    pub aik: AikPublic,
}

impl Quote {
    fn signed_message(nonce: &Nonce, composite: &Digest) -> [u8; NONCE_LEN + 32] {
        let mut message = [0u8; NONCE_LEN + 32];
        message[..NONCE_LEN].copy_from_slice(&nonce.0);
        message[NONCE_LEN..].copy_from_slice(&composite.0);
        message
    }

    /// Checks the signature and freshness. Register contents are not
    /// checked; see [`verify_against`](Self::verify_against).
    pub fn verify(&self, aik: &AikPublic, expected_nonce: &Nonce) -> Result<(), QuoteError> {
        if &self.aik != aik {
            return Err(QuoteError::WrongKey);
        }
        if &self.nonce != expected_nonce {
            return Err(QuoteError::NonceMismatch);
        }
        let key = VerifyingKey::from_bytes(&aik.0).map_err(|_| QuoteError::WrongKey)?;
        let signature = Signature::from_bytes(&self.signature);
        key.verify(&Self::signed_message(&self.nonce, &self.composite), &signature)
            .map_err(|_| QuoteError::BadSignature)
    }

    /// Full check: signature, nonce, selection and composite against the
    /// expected register values.
    pub fn verify_against(
        &self,
        aik: &AikPublic,
        expected_nonce: &Nonce,
        selection: &PcrSelection,
        expected_composite: &Digest,
    ) -> Result<(), QuoteError> {
        self.verify(aik, expected_nonce)?;
        if &self.selection != selection {
            return Err(QuoteError::SelectionMismatch);
        }
        if &self.composite != expected_composite {
            return Err(QuoteError::CompositeMismatch);
        }
        Ok(())
    }
}

/// A secret sealed to an EK and bound to one AIK public key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    #[serde(with = "hex")]
    pub ephemeral: [u8; 32],
    #[serde(with = "hex")]
    pub sealed: Vec<u8>,
}

fn credential_key(shared: &[u8; 32], ephemeral: &[u8; 32], ek: &EkPublic) -> SymmetricKey {
    SymmetricKey::from_bytes(kdf(b"bolted/credential", &[shared, ephemeral, &ek.0]))
}

/// Seals `secret` so that only the TPM owning `ek` and holding `aik` can
/// recover it via [`Tpm::activate_credential`].
pub fn make_credential(ek: &EkPublic, aik: &AikPublic, secret: &[u8], ephemeral_seed: [u8; 32]) -> Credential {
    let ephemeral = StaticSecret::from(ephemeral_seed);
    let ephemeral_public = X25519Public::from(&ephemeral).to_bytes();
    let shared = ephemeral.diffie_hellman(&X25519Public::from(ek.0));
    let key = credential_key(shared.as_bytes(), &ephemeral_public, ek);
    Credential {
        ephemeral: ephemeral_public,
        sealed: key.seal([0; 12], &aik.0, secret),
    }
}

#[derive(Clone)]
pub struct Tpm {
    ek_secret: StaticSecret,
    ek_public: EkPublic,
    aik: Option<SigningKey>,
    aik_certified: bool,
    pcrs: PcrBank,
}

impl Tpm {
    pub fn new(ek_seed: [u8; 32]) -> Self {
        let ek_secret = StaticSecret::from(ek_seed);
        let ek_public = EkPublic(X25519Public::from(&ek_secret).to_bytes());
        Self {
            ek_secret,
            ek_public,
            aik: None,
            aik_certified: false,
            pcrs: PcrBank::new(),
        }
    }

    pub fn ek_public(&self) -> EkPublic {
        self.ek_public
    }

    /// Creates a fresh AIK, replacing (and decertifying) any previous one.
    pub fn create_aik(&mut self, seed: [u8; 32]) -> AikPublic {
        let key = SigningKey::from_bytes(&seed);
        let public = AikPublic(key.verifying_key().to_bytes());
        self.aik = Some(key);
        self.aik_certified = false;
        public
    }

    pub fn aik_public(&self) -> Option<AikPublic> {
        self.aik.as_ref().map(|k| AikPublic(k.verifying_key().to_bytes()))
    }

    pub fn is_aik_certified(&self) -> bool {
        self.aik_certified
    }

    /// Recovers a credential sealed to this TPM's EK and bound to its
    /// current AIK. Success certifies the AIK; repeating it is a no-op.
    pub fn activate_credential(&mut self, credential: &Credential) -> Result<Vec<u8>, TpmError> {
        let aik = self.aik_public().ok_or(TpmError::NoAik)?;
        let shared = self.ek_secret.diffie_hellman(&X25519Public::from(credential.ephemeral));
        let key = credential_key(shared.as_bytes(), &credential.ephemeral, &self.ek_public);
        let secret = key
            .open(&aik.0, &credential.sealed)
            .map_err(|_| TpmError::Activation)?;
        self.aik_certified = true;
        Ok(secret)
    }

    pub fn pcrs(&self) -> &PcrBank {
        &self.pcrs
    }

    pub fn extend(&mut self, index: usize, measurement: &Digest) -> Result<Digest, TpmError> {
        self.pcrs.extend(index, measurement)
    }

    /// Platform reset: PCRs return to zero and the AIK is dropped.
    pub fn reset(&mut self) {
        self.pcrs = PcrBank::new();
        self.aik = None;
        self.aik_certified = false;
    }

    pub fn quote(&self, nonce: Nonce, selection: &PcrSelection) -> Result<Quote, TpmError> {
        let key = self.aik.as_ref().ok_or(TpmError::NoAik)?;
        if !self.aik_certified {
            return Err(TpmError::AikNotCertified);
        }
        let composite = self.pcrs.composite(selection);
        let signature = key.sign(&Quote::signed_message(&nonce, &composite));
        Ok(Quote {
            nonce,
            selection: selection.clone(),
            composite,
            signature: signature.to_bytes(),
            aik: AikPublic(key.verifying_key().to_bytes()),
        })
    }
}

impl fmt::Debug for Tpm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tpm")
            .field("ek_public", &self.ek_public)
            .field("aik", &self.aik_public())
            .field("aik_certified", &self.aik_certified)
            .field("pcrs", &self.pcrs)
            .finish()
    }
}
