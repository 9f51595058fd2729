//! Block tree with ancestry queries and per-block certificate records.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::types::{Block, BlockId, QuorumCert, View};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockStoreError {
    #[error("block {0} breaks the height/view rule against its parent")]
    MalformedBlock(BlockId),
    #[error("block {0} is not stored")]
    UnknownBlock(BlockId),
}

/// Outcome of a successful [`BlockTree::insert_block`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Insertion {
    /// The block and any orphans it unblocked, in storage order.
    Stored(Vec<BlockId>),
    Duplicate,
    /// Parent unknown; kept aside until the parent arrives.
    Orphaned,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CertRecord {
    Added,
    Duplicate,
    /// The certified block is not stored yet; the QC is attached when it is.
    Buffered,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockTree {
    blocks: BTreeMap<BlockId, Block>,
    children: BTreeMap<BlockId, BTreeSet<BlockId>>,
    certified: BTreeMap<BlockId, BTreeSet<QuorumCert>>,
    /// Orphans keyed by the missing parent.
    orphans: BTreeMap<BlockId, BTreeMap<BlockId, Block>>,
    pending_certs: BTreeMap<BlockId, BTreeSet<QuorumCert>>,
}

impl Default for BlockTree {
    fn default() -> Self {
        BlockTree::new()
    }
}

impl BlockTree {
    pub fn new() -> BlockTree {
        let g = Block::genesis();
        let mut blocks = BTreeMap::new();
        blocks.insert(g.id(), g.clone());
        BlockTree {
            blocks,
            children: BTreeMap::new(),
            certified: BTreeMap::new(),
            orphans: BTreeMap::new(),
            pending_certs: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: BlockId) -> Option<&Block> {
        self.blocks.get(&id)
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.blocks.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn orphan_count(&self) -> usize {
        self.orphans.values().map(BTreeMap::len).sum()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.values()
    }

    pub fn children(&self, id: BlockId) -> impl Iterator<Item = BlockId> + '_ {
        self.children.get(&id).into_iter().flat_map(|c| c.iter().copied())
    }

    pub fn insert_block(&mut self, block: Block) -> Result<Insertion, BlockStoreError> {
        if self.blocks.contains_key(&block.id()) {
            return Ok(Insertion::Duplicate);
        }
        if block.is_genesis() {
            return Ok(Insertion::Duplicate);
        }
        let Some(parent) = self.blocks.get(&block.parent()) else {
            let bucket = self.orphans.entry(block.parent()).or_default();
            if bucket.contains_key(&block.id()) {
                return Ok(Insertion::Duplicate);
            }
            bucket.insert(block.id(), block);
            return Ok(Insertion::Orphaned);
        };
        if !Self::fits(parent, &block) {
            return Err(BlockStoreError::MalformedBlock(block.id()));
        }
        let mut stored = Vec::new();
        let mut work = vec![block];
        while let Some(b) = work.pop() {
            let id = b.id();
            self.children.entry(b.parent()).or_default().insert(id);
            self.blocks.insert(id, b);
            if let Some(qcs) = self.pending_certs.remove(&id) {
                self.certified.entry(id).or_default().extend(qcs);
            }
            stored.push(id);
            if let Some(waiting) = self.orphans.remove(&id) {
                let parent = &self.blocks[&id];
                // Malformed orphans are discarded silently once their parent is known.
                work.extend(waiting.into_values().filter(|o| Self::fits(parent, o)).rev());
            }
        }
        Ok(Insertion::Stored(stored))
    }

    fn fits(parent: &Block, child: &Block) -> bool {
        child.height() == parent.height().next() && child.view() > parent.view()
    }

    /// Reflexive ancestry: true iff `ancestor` is reached from `descendant` by
    /// following parent links zero or more times.
    pub fn is_ancestor(&self, ancestor: BlockId, descendant: BlockId) -> Result<bool, BlockStoreError> {
        let a = self.blocks.get(&ancestor).ok_or(BlockStoreError::UnknownBlock(ancestor))?;
        let mut cur = self.blocks.get(&descendant).ok_or(BlockStoreError::UnknownBlock(descendant))?;
        while cur.height() > a.height() {
            cur = &self.blocks[&cur.parent()];
        }
        Ok(cur.id() == ancestor)
    }

    /// Ids from `id` up to genesis, starting with `id` itself.
    pub fn ancestors(&self, id: BlockId) -> impl Iterator<Item = &Block> + '_ {
        let mut cur = self.blocks.get(&id);
        std::iter::from_fn(move || {
            let b = cur?;
            cur = if b.is_genesis() { None } else { self.blocks.get(&b.parent()) };
            Some(b)
        })
    }

    pub fn record_certified(&mut self, qc: &QuorumCert) -> CertRecord {
        if !self.blocks.contains_key(&qc.block) {
            return if self.pending_certs.entry(qc.block).or_default().insert(qc.clone()) {
                CertRecord::Buffered
            } else {
                CertRecord::Duplicate
            };
        }
        if self.certified.entry(qc.block).or_default().insert(qc.clone()) {
            CertRecord::Added
        } else {
            CertRecord::Duplicate
        }
    }

    pub fn certs(&self, id: BlockId) -> impl Iterator<Item = &QuorumCert> + '_ {
        self.certified.get(&id).into_iter().flat_map(|s| s.iter())
    }

    pub fn certified_views(&self, id: BlockId) -> BTreeSet<View> {
        self.certs(id).map(|q| q.view).collect()
    }

    pub fn is_certified(&self, id: BlockId) -> bool {
        self.certified.get(&id).is_some_and(|s| !s.is_empty())
    }
}
