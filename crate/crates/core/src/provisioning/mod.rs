// SPDX-License-Identifier: Apache-2.0

//! Stateless network-boot provisioning: a content-addressed copy-on-write
//! image store and per-node boot sessions that fetch blocks lazily.

pub mod image;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{NodeId, ProjectId};
use crate::tpm::Digest;

pub use image::{BootInfo, BootManifest, FileTable, ImageBuilder, PackedImage};

pub const BLOCK_SIZE: usize = 4096;
/// 16 MiB.
pub const MAX_IMAGE_BLOCKS: u64 = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProvisioningError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("range: {0}")]
    Range(String),
    #[error("format: {0}")]
    Format(String),
    #[error("authorization: {0}")]
    Authorization(String),
    #[error("block {0} failed disk authentication")]
    DiskAuthentication(u64),
}

impl ProvisioningError {
    pub fn code(&self) -> &'static str {
        match self {
            ProvisioningError::NotFound(_) => "not_found",
            ProvisioningError::Conflict(_) => "conflict",
            ProvisioningError::Range(_) => "range",
            ProvisioningError::Format(_) | ProvisioningError::DiskAuthentication(_) => "format",
            ProvisioningError::Authorization(_) => "authorization",
        }
    }
}

type Result<T> = std::result::Result<T, ProvisioningError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u32);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "img-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u32);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sess-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Visibility {
    /// Listed and addressable by its owner.
    Named,
    /// Frozen base shared by a writable image and its clones.
    Frozen,
    /// Deleted, kept only while children resolve through it.
    Tombstone,
    /// Private clone backing a boot session.
    Session,
}

#[derive(Debug, Clone)]
struct ImageNode {
    owner: ProjectId,
    name: String,
    parent: Option<ImageId>,
    blocks: BTreeMap<u64, Digest>,
    size_blocks: u64,
    read_only: bool,
    visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: ImageId,
    pub name: String,
    pub owner: ProjectId,
    pub parent: Option<ImageId>,
    pub size_blocks: u64,
    pub read_only: bool,
    /// Blocks written directly into this image, not inherited.
    pub own_blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootSession {
    pub id: SessionId,
    pub node: NodeId,
    pub project: ProjectId,
    /// The image the session was opened from.
    pub source: ImageId,
    /// The private clone that absorbs writes.
    pub clone: ImageId,
    pub fetched: BTreeSet<u64>,
}

impl BootSession {
    pub fn blocks_fetched(&self) -> usize {
        self.fetched.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ProvisioningService {
    images: BTreeMap<ImageId, ImageNode>,
    store: BTreeMap<Digest, Vec<u8>>,
    sessions: BTreeMap<SessionId, BootSession>,
    next_image: u32,
    next_session: u32,
}

impl ProvisioningService {
    pub fn new() -> Self {
        Self::default()
    }

    fn alloc_image(&mut self, node: ImageNode) -> ImageId {
        let id = ImageId(self.next_image);
        self.next_image += 1;
        self.images.insert(id, node);
        id
    }

    fn image(&self, id: ImageId) -> Result<&ImageNode> {
        self.images.get(&id).ok_or_else(|| ProvisioningError::NotFound(id.to_string()))
    }

    /// Looks up a named image and checks that `owner` may use it.
    fn owned(&self, owner: &ProjectId, id: ImageId) -> Result<&ImageNode> {
        let node = self.image(id)?;
        if node.visibility != Visibility::Named {
            return Err(ProvisioningError::NotFound(id.to_string()));
        }
        if &node.owner != owner {
            return Err(ProvisioningError::Authorization(format!("{id} belongs to another project")));
        }
        Ok(node)
    }

    pub fn info(&self, owner: &ProjectId, id: ImageId) -> Result<ImageInfo> {
        let node = self.owned(owner, id)?;
        Ok(ImageInfo {
            id,
            name: node.name.clone(),
            owner: node.owner.clone(),
            parent: node.parent,
            size_blocks: node.size_blocks,
            read_only: node.read_only,
            own_blocks: node.blocks.len(),
        })
    }

    pub fn list(&self, owner: &ProjectId) -> Vec<ImageInfo> {
        let ids: Vec<ImageId> = self
            .images
            .iter()
            .filter(|(_, n)| n.visibility == Visibility::Named && &n.owner == owner)
            .map(|(id, _)| *id)
            .collect();
        ids.into_iter().filter_map(|id| self.info(owner, id).ok()).collect()
    }

    fn check_name(&self, owner: &ProjectId, name: &str) -> Result<()> {
        let taken = self
            .images
            .values()
            .any(|n| n.visibility == Visibility::Named && &n.owner == owner && n.name == name);
        if taken {
            return Err(ProvisioningError::Conflict(format!("image name {name} is taken")));
        }
        Ok(())
    }

    fn put_block(&mut self, bytes: &[u8]) -> Result<Digest> {
        if bytes.len() > BLOCK_SIZE {
            return Err(ProvisioningError::Range(format!("{} bytes exceeds the block size", bytes.len())));
        }
        let mut block = bytes.to_vec();
        block.resize(BLOCK_SIZE, 0);
        let digest = Digest::of(&block);
        self.store.entry(digest).or_insert(block);
        Ok(digest)
    }

    /// Creates an image from `content`. Trailing all-zero blocks are not
    /// stored; `size_blocks` extends the logical size with zeros.
    pub fn create(&mut self, owner: &ProjectId, name: &str, content: &[u8], size_blocks: Option<u64>) -> Result<ImageId> {
        self.check_name(owner, name)?;
        let used = content.len().div_ceil(BLOCK_SIZE) as u64;
        let size = size_blocks.unwrap_or(used).max(used);
        if size == 0 || size > MAX_IMAGE_BLOCKS {
            return Err(ProvisioningError::Range(format!("image of {size} blocks")));
        }
        let mut blocks = BTreeMap::new();
        for (i, chunk) in content.chunks(BLOCK_SIZE).enumerate() {
            if chunk.iter().any(|&b| b != 0) {
                blocks.insert(i as u64, self.put_block(chunk)?);
            }
        }
        Ok(self.alloc_image(ImageNode {
            owner: owner.clone(),
            name: name.to_owned(),
            parent: None,
            blocks,
            size_blocks: size,
            read_only: false,
            visibility: Visibility::Named,
        }))
    }

    /// Returns an immutable node holding the current contents of `id`.
    /// A writable image is split in O(1): its block map moves into a new
    /// frozen base that both it and the caller's new child will share.
    fn freeze(&mut self, id: ImageId) -> ImageId {
        let node = &self.images[&id];
        if node.read_only {
            return id;
        }
        if node.blocks.is_empty() {
            if let Some(parent) = node.parent {
                return parent;
            }
        }
        let node = self.images.get_mut(&id).expect("exists");
        let frozen = ImageNode {
            owner: node.owner.clone(),
            name: String::new(),
            parent: node.parent,
            blocks: std::mem::take(&mut node.blocks),
            size_blocks: node.size_blocks,
            read_only: true,
            visibility: Visibility::Frozen,
        };
        let frozen_id = self.alloc_image(frozen);
        self.images.get_mut(&id).expect("exists").parent = Some(frozen_id);
        frozen_id
    }

    fn derive(&mut self, id: ImageId, owner: ProjectId, name: String, read_only: bool, visibility: Visibility) -> ImageId {
        let size_blocks = self.images[&id].size_blocks;
        let base = self.freeze(id);
        self.alloc_image(ImageNode {
            owner,
            name,
            parent: Some(base),
            blocks: BTreeMap::new(),
            size_blocks,
            read_only,
            visibility,
        })
    }

    pub fn clone_image(&mut self, owner: &ProjectId, id: ImageId, name: &str) -> Result<ImageId> {
        self.owned(owner, id)?;
        self.check_name(owner, name)?;
        Ok(self.derive(id, owner.clone(), name.to_owned(), false, Visibility::Named))
    }

    pub fn snapshot(&mut self, owner: &ProjectId, id: ImageId, name: &str) -> Result<ImageId> {
        self.owned(owner, id)?;
        self.check_name(owner, name)?;
        Ok(self.derive(id, owner.clone(), name.to_owned(), true, Visibility::Named))
    }

    fn has_children(&self, id: ImageId) -> bool {
        self.images.values().any(|n| n.parent == Some(id))
    }

    pub fn delete(&mut self, owner: &ProjectId, id: ImageId) -> Result<()> {
        self.owned(owner, id)?;
        if let Some(session) = self.sessions.values().find(|s| s.source == id) {
            return Err(ProvisioningError::Conflict(format!("{id} is in use by {}", session.id)));
        }
        self.remove_node(id);
        Ok(())
    }

    /// Drops an image, tombstoning it if children still resolve through it,
    /// then prunes unreferenced hidden ancestors and unreferenced blocks.
    fn remove_node(&mut self, id: ImageId) {
        let mut current = Some(id);
        while let Some(id) = current {
            if self.has_children(id) {
                let node = self.images.get_mut(&id).expect("exists");
                if node.visibility != Visibility::Frozen {
                    node.visibility = Visibility::Tombstone;
                    node.name.clear();
                }
                break;
            }
            let node = self.images.remove(&id).expect("exists");
            current = node
                .parent
                .filter(|p| matches!(self.images[p].visibility, Visibility::Frozen | Visibility::Tombstone));
        }
        self.collect_garbage();
    }

    fn collect_garbage(&mut self) {
        let live: BTreeSet<Digest> = self.images.values().flat_map(|n| n.blocks.values().copied()).collect();
        self.store.retain(|digest, _| live.contains(digest));
    }

    fn resolve(&self, id: ImageId, index: u64) -> Result<Vec<u8>> {
        let size = self.image(id)?.size_blocks;
        if index >= size {
            return Err(ProvisioningError::Range(format!("block {index} of a {size}-block image")));
        }
        let mut current = Some(id);
        while let Some(id) = current {
            let node = &self.images[&id];
            if let Some(digest) = node.blocks.get(&index) {
                return Ok(self.store[digest].clone());
            }
            current = node.parent;
        }
        Ok(vec![0; BLOCK_SIZE])
    }

    pub fn read_block(&self, owner: &ProjectId, id: ImageId, index: u64) -> Result<Vec<u8>> {
        self.owned(owner, id)?;
        self.resolve(id, index)
    }

    fn write_into(&mut self, id: ImageId, index: u64, bytes: &[u8]) -> Result<()> {
        let node = self.image(id)?;
        if node.read_only {
            return Err(ProvisioningError::Conflict(format!("{id} is read-only")));
        }
        if index >= node.size_blocks {
            return Err(ProvisioningError::Range(format!("block {index} of a {}-block image", node.size_blocks)));
        }
        let digest = self.put_block(bytes)?;
        self.images.get_mut(&id).expect("exists").blocks.insert(index, digest);
        self.collect_garbage();
        Ok(())
    }

    pub fn write_block(&mut self, owner: &ProjectId, id: ImageId, index: u64, bytes: &[u8]) -> Result<()> {
        self.owned(owner, id)?;
        self.write_into(id, index, bytes)
    }

    pub fn boot_info(&self, owner: &ProjectId, id: ImageId) -> Result<BootInfo> {
        self.owned(owner, id)?;
        image::read_boot_info(&mut |i| self.resolve(id, i))
    }

    pub fn open_session(&mut self, owner: &ProjectId, image: ImageId, node: NodeId) -> Result<SessionId> {
        self.owned(owner, image)?;
        if let Some(existing) = self.sessions.values().find(|s| s.node == node) {
            return Err(ProvisioningError::Conflict(format!("{node} already boots from {}", existing.id)));
        }
        let clone = self.derive(image, owner.clone(), String::new(), false, Visibility::Session);
        let id = SessionId(self.next_session);
        self.next_session += 1;
        self.sessions.insert(
            id,
            BootSession {
                id,
                node,
                project: owner.clone(),
                source: image,
                clone,
                fetched: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    pub fn session(&self, id: SessionId) -> Result<&BootSession> {
        self.sessions.get(&id).ok_or_else(|| ProvisioningError::NotFound(id.to_string()))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &BootSession> {
        self.sessions.values()
    }

    pub fn session_for_node(&self, node: NodeId) -> Option<&BootSession> {
        self.sessions.values().find(|s| s.node == node)
    }

    /// Serves one block to the session's node, counting first fetches.
    pub fn serve_block(&mut self, id: SessionId, index: u64) -> Result<Vec<u8>> {
        let clone = self.session(id)?.clone;
        let block = self.resolve(clone, index)?;
        self.sessions.get_mut(&id).expect("exists").fetched.insert(index);
        Ok(block)
    }

    pub fn session_write(&mut self, id: SessionId, index: u64, bytes: &[u8]) -> Result<()> {
        let clone = self.session(id)?.clone;
        self.write_into(clone, index, bytes)
    }

    /// Ends a session. With `save_as` the session's writes are kept as a new
    /// named image of the session's project; otherwise they are discarded.
    pub fn close_session(&mut self, id: SessionId, save_as: Option<&str>) -> Result<Option<ImageId>> {
        let session = self.session(id)?.clone();
        if let Some(name) = save_as {
            self.check_name(&session.project, name)?;
        }
        self.sessions.remove(&id);
        match save_as {
            Some(name) => {
                let node = self.images.get_mut(&session.clone).expect("session clone exists");
                node.visibility = Visibility::Named;
                node.name = name.to_owned();
                Ok(Some(session.clone))
            }
            None => {
                self.remove_node(session.clone);
                Ok(None)
            }
        }
    }

    /// Number of distinct blocks held by the store.
    pub fn stored_blocks(&self) -> usize {
        self.store.len()
    }

    /// Blocks reachable from the named images of `owner`.
    pub fn reachable_blocks(&self, owner: &ProjectId) -> BTreeSet<Digest> {
        let mut out = BTreeSet::new();
        for (id, node) in &self.images {
            if node.visibility != Visibility::Named || &node.owner != owner {
                continue;
            }
            let mut current = Some(*id);
            while let Some(id) = current {
                let node = &self.images[&id];
                out.extend(node.blocks.values().copied());
                current = node.parent;
            }
        }
        out
    }

    /// Every block digest the store holds on behalf of `owner`, through any
    /// image node including hidden ones.
    pub fn blocks_held_for(&self, owner: &ProjectId) -> BTreeSet<Digest> {
        self.images
            .values()
            .filter(|n| &n.owner == owner)
            .flat_map(|n| n.blocks.values().copied())
            .collect()
    }
}
