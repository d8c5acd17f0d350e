// SPDX-License-Identifier: Apache-2.0

//! On-image layout: the boot manifest at block 0, the root file table, and
//! a packer that produces images in this layout.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ProvisioningError, BLOCK_SIZE, MAX_IMAGE_BLOCKS};
use crate::crypto::{kdf, SymmetricKey, SEAL_OVERHEAD};
use crate::tpm::Digest;

/// Plaintext bytes carried by one encrypted block.
pub const SEALED_BLOCK_CAPACITY: usize = BLOCK_SIZE - SEAL_OVERHEAD;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub blocks: Vec<u64>,
    pub sha256: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootfsRef {
    pub blocks: Vec<u64>,
    #[serde(default)]
    pub encrypted: bool,
}

/// The JSON document stored at block 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootManifest {
    pub kernel: BlobRef,
    pub initrd: BlobRef,
    pub cmdline: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rootfs: Option<RootfsRef>,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootInfo {
    #[serde(with = "hex")]
    pub kernel: Vec<u8>,
    #[serde(with = "hex")]
    pub initrd: Vec<u8>,
    pub cmdline: String,
}

impl std::fmt::Debug for BootInfo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BootInfo")
            .field("kernel", &Digest::of(&self.kernel))
            .field("initrd", &Digest::of(&self.initrd))
            .field("cmdline", &self.cmdline)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub blocks: Vec<u64>,
    pub size: usize,
    pub sha256: Digest,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileTable {
    pub files: BTreeMap<String, FileEntry>,
    /// Files executed, in order, when the tenant OS starts.
    pub init: Vec<String>,
}

fn format_err(msg: impl Into<String>) -> ProvisioningError {
    ProvisioningError::Format(msg.into())
}

fn trim_zeros(block: &[u8]) -> &[u8] {
    let end = block.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
    &block[..end]
}

pub fn parse_manifest(block0: &[u8]) -> Result<BootManifest, ProvisioningError> {
    let text = trim_zeros(block0);
    if text.is_empty() {
        return Err(format_err("block 0 holds no boot manifest"));
    }
    serde_json::from_slice(text).map_err(|e| format_err(format!("malformed boot manifest: {e}")))
}

fn disk_aad(index: u64) -> [u8; 19] {
    let mut aad = [0u8; 19];
    aad[..11].copy_from_slice(b"bolted/disk");
    aad[11..].copy_from_slice(&index.to_be_bytes());
    aad
}

/// Encrypts one block's worth of plaintext for storage at `index`.
pub fn seal_block(key: &SymmetricKey, index: u64, plaintext: &[u8]) -> Vec<u8> {
    assert!(plaintext.len() <= SEALED_BLOCK_CAPACITY, "sealed block payload too large");
    let derived = kdf(b"bolted/disk-nonce", &[key.as_bytes(), &index.to_be_bytes()]);
    let mut nonce = [0u8; 12];
    nonce.copy_from_slice(&derived[..12]);
    let mut block = key.seal(nonce, &disk_aad(index), plaintext);
    block.resize(BLOCK_SIZE, 0);
    block
}

fn open_block(key: &SymmetricKey, index: u64, block: &[u8]) -> Result<Vec<u8>, ProvisioningError> {
    // Sealed payloads are always padded to the same length before sealing.
    let sealed = &block[..SEAL_OVERHEAD + SEALED_BLOCK_CAPACITY];
    key.open(&disk_aad(index), sealed)
        .map_err(|_| ProvisioningError::DiskAuthentication(index))
}

/// Reads `blocks` through `read`, decrypting when a key is supplied, and
/// truncates to `size`.
pub fn read_extent(
    read: &mut dyn FnMut(u64) -> Result<Vec<u8>, ProvisioningError>,
    blocks: &[u64],
    size: Option<usize>,
    key: Option<&SymmetricKey>,
) -> Result<Vec<u8>, ProvisioningError> {
    let mut out = Vec::new();
    for &index in blocks {
        let block = read(index)?;
        match key {
            Some(key) => out.extend(open_block(key, index, &block)?),
            None => out.extend(block),
        }
    }
    if let Some(size) = size {
        if size > out.len() {
            return Err(format_err("extent shorter than its recorded size"));
        }
        out.truncate(size);
    }
    Ok(out)
}

fn read_blob(
    read: &mut dyn FnMut(u64) -> Result<Vec<u8>, ProvisioningError>,
    blob: &BlobRef,
    what: &str,
) -> Result<Vec<u8>, ProvisioningError> {
    let bytes = read_extent(read, &blob.blocks, blob.size, None)?;
    if Digest::of(&bytes) != blob.sha256 {
        return Err(format_err(format!("{what} digest does not match the manifest")));
    }
    Ok(bytes)
}

/// Pulls kernel, initrd and command line out of an image.
pub fn read_boot_info(
    read: &mut dyn FnMut(u64) -> Result<Vec<u8>, ProvisioningError>,
) -> Result<BootInfo, ProvisioningError> {
    let manifest = parse_manifest(&read(0)?)?;
    Ok(BootInfo {
        kernel: read_blob(read, &manifest.kernel, "kernel")?,
        initrd: read_blob(read, &manifest.initrd, "initrd")?,
        cmdline: manifest.cmdline,
    })
}

pub fn read_file_table(
    read: &mut dyn FnMut(u64) -> Result<Vec<u8>, ProvisioningError>,
    manifest: &BootManifest,
    key: Option<&SymmetricKey>,
) -> Result<FileTable, ProvisioningError> {
    let rootfs = manifest.rootfs.as_ref().ok_or_else(|| format_err("image has no root filesystem"))?;
    let key = if rootfs.encrypted {
        Some(key.ok_or(ProvisioningError::DiskAuthentication(rootfs.blocks.first().copied().unwrap_or(0)))?)
    } else {
        None
    };
    let bytes = read_extent(read, &rootfs.blocks, None, key)?;
    serde_json::from_slice(trim_zeros(&bytes)).map_err(|e| format_err(format!("malformed file table: {e}")))
}

pub fn read_file(
    read: &mut dyn FnMut(u64) -> Result<Vec<u8>, ProvisioningError>,
    manifest: &BootManifest,
    table: &FileTable,
    path: &str,
    key: Option<&SymmetricKey>,
) -> Result<Vec<u8>, ProvisioningError> {
    let entry = table
        .files
        .get(path)
        .ok_or_else(|| ProvisioningError::NotFound(format!("file {path}")))?;
    let encrypted = manifest.rootfs.as_ref().is_some_and(|r| r.encrypted);
    let key = if encrypted { key } else { None };
    let bytes = read_extent(read, &entry.blocks, Some(entry.size), key)?;
    if Digest::of(&bytes) != entry.sha256 {
        return Err(format_err(format!("{path} digest does not match the file table")));
    }
    Ok(bytes)
}

/// Reference packer for the image layout above.
#[derive(Clone, Default)]
pub struct ImageBuilder {
    kernel: Vec<u8>,
    initrd: Vec<u8>,
    cmdline: String,
    files: BTreeMap<String, Vec<u8>>,
    init: Vec<String>,
    size_blocks: u64,
    disk_key: Option<SymmetricKey>,
}

/// A packed image: its non-zero prefix plus the logical size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedImage {
    pub content: Vec<u8>,
    pub size_blocks: u64,
}

impl ImageBuilder {
    pub fn new(kernel: Vec<u8>, initrd: Vec<u8>, cmdline: impl Into<String>) -> Self {
        Self {
            kernel,
            initrd,
            cmdline: cmdline.into(),
            ..Self::default()
        }
    }

    pub fn file(mut self, path: impl Into<String>, content: Vec<u8>) -> Self {
        self.files.insert(path.into(), content);
        self
    }

    /// Adds a file and runs it at startup.
    pub fn init_file(mut self, path: impl Into<String>, content: Vec<u8>) -> Self {
        let path = path.into();
        self.init.push(path.clone());
        self.files.insert(path, content);
        self
    }

    pub fn size_blocks(mut self, blocks: u64) -> Self {
        self.size_blocks = blocks;
        self
    }

    pub fn encrypted(mut self, key: SymmetricKey) -> Self {
        self.disk_key = Some(key);
        self
    }

    /// The (path, digest) pairs of every file, i.e. what a runtime
    /// whitelist built from this image allows.
    pub fn file_digests(&self) -> BTreeSet<(String, Digest)> {
        self.files.iter().map(|(p, c)| (p.clone(), Digest::of(c))).collect()
    }

    pub fn build(&self) -> Result<PackedImage, ProvisioningError> {
        let mut blocks: Vec<Vec<u8>> = vec![Vec::new()];
        let push_plain = |blocks: &mut Vec<Vec<u8>>, bytes: &[u8]| -> Vec<u64> {
            bytes
                .chunks(BLOCK_SIZE)
                .map(|chunk| {
                    blocks.push(chunk.to_vec());
                    blocks.len() as u64 - 1
                })
                .collect()
        };
        let kernel = BlobRef {
            blocks: push_plain(&mut blocks, &self.kernel),
            sha256: Digest::of(&self.kernel),
            size: Some(self.kernel.len()),
        };
        let initrd = BlobRef {
            blocks: push_plain(&mut blocks, &self.initrd),
            sha256: Digest::of(&self.initrd),
            size: Some(self.initrd.len()),
        };

        let chunk = if self.disk_key.is_some() { SEALED_BLOCK_CAPACITY } else { BLOCK_SIZE };
        let key = self.disk_key.as_ref();
        let push_fs = |blocks: &mut Vec<Vec<u8>>, bytes: &[u8]| -> Vec<u64> {
            bytes
                .chunks(chunk)
                .map(|part| {
                    let index = blocks.len() as u64;
                    let stored = match key {
                        Some(key) => {
                            let mut padded = part.to_vec();
                            padded.resize(SEALED_BLOCK_CAPACITY, 0);
                            seal_block(key, index, &padded)
                        }
                        None => part.to_vec(),
                    };
                    blocks.push(stored);
                    index
                })
                .collect()
        };

        let mut table = FileTable {
            files: BTreeMap::new(),
            init: self.init.clone(),
        };
        for (path, content) in &self.files {
            table.files.insert(
                path.clone(),
                FileEntry {
                    blocks: push_fs(&mut blocks, content),
                    size: content.len(),
                    sha256: Digest::of(content),
                },
            );
        }
        let table_bytes = serde_json::to_vec(&table).expect("file table serializes");
        let rootfs = RootfsRef {
            blocks: push_fs(&mut blocks, &table_bytes),
            encrypted: key.is_some(),
        };

        let manifest = BootManifest {
            kernel,
            initrd,
            cmdline: self.cmdline.clone(),
            rootfs: Some(rootfs),
        };
        let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
        if manifest_bytes.len() > BLOCK_SIZE {
            return Err(format_err("boot manifest does not fit in one block"));
        }
        blocks[0] = manifest_bytes;

        let used = blocks.len() as u64;
        let size_blocks = self.size_blocks.max(used);
        if size_blocks > MAX_IMAGE_BLOCKS {
            return Err(ProvisioningError::Range(format!("{size_blocks} blocks exceeds the image limit")));
        }
        let mut content = Vec::with_capacity(blocks.len() * BLOCK_SIZE);
        for mut block in blocks {
            block.resize(BLOCK_SIZE, 0);
            content.extend(block);
        }
        Ok(PackedImage { content, size_blocks })
    }
}
