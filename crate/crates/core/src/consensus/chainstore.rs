//! Block tree, head selection and the chain comparison rule.
//!
//! Finality truncates the tree: once a macro block is finalized, everything
//! not descending from it is dropped. Above the last finalized macro the
//! store keeps every accepted branch and selects the head by the cumulative
//! rule (most macro blocks, then highest view numbers, then most blocks),
//! additionally refusing branches superseded by a known view-change quorum.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use crate::chain::{Block, BlockNumber, ViewNumber};
use crate::crypto::Seed;
use crate::hash::Hash32;
use crate::state::ChainState;

#[derive(Clone, Debug)]
pub struct StoredBlock {
    pub block: Arc<Block>,
    pub hash: Hash32,
    pub parent: Hash32,
}

/// Outcome of comparing two chain tips.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ChainOrdering {
    ABetter,
    BBetter,
    Equal,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CompareError {
    UnknownTip,
    /// Tips do not share the last finalized macro ancestor; under the
    /// safety assumption this cannot happen and signals a violation.
    Incomparable,
}

impl fmt::Display for CompareError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompareError::UnknownTip => write!(f, "unknown tip"),
            CompareError::Incomparable => write!(f, "tips cross a finality boundary"),
        }
    }
}

/// A head switch that abandoned part of the previous head's branch.
#[derive(Clone, Debug)]
pub struct Reorg {
    pub old_head: Hash32,
    pub new_head: Hash32,
    /// Blocks abandoned from the old branch (deepest first).
    pub abandoned: Vec<Hash32>,
}

pub struct ChainStore {
    blocks: BTreeMap<Hash32, StoredBlock>,
    children: BTreeMap<Hash32, Vec<Hash32>>,
    states: BTreeMap<Hash32, ChainState>,
    tips: BTreeSet<Hash32>,
    head: Hash32,
    genesis: Hash32,
    /// Finalized macro hashes, ascending by height, starting with genesis.
    finalized: Vec<Hash32>,
    /// Minimum acceptable view per height, from completed view-change
    /// quorums this node has seen.
    min_views: BTreeMap<BlockNumber, ViewNumber>,
    /// Height-indexed view of the current head's path.
    canonical: BTreeMap<BlockNumber, Hash32>,
    /// Keep every state (true for archival nodes); otherwise states below
    /// the last finalized macro are pruned.
    archival: bool,
}

impl ChainStore {
    pub fn new(genesis_block: Arc<Block>, genesis_state: ChainState, archival: bool) -> Self {
        let hash = genesis_block.hash();
        let mut blocks = BTreeMap::new();
        blocks.insert(
            hash,
            StoredBlock {
                block: genesis_block,
                hash,
                parent: Hash32::ZERO,
            },
        );
        let mut states = BTreeMap::new();
        states.insert(hash, genesis_state);
        let mut tips = BTreeSet::new();
        tips.insert(hash);
        let mut canonical = BTreeMap::new();
        canonical.insert(0, hash);
        ChainStore {
            blocks,
            children: BTreeMap::new(),
            states,
            tips,
            head: hash,
            genesis: hash,
            finalized: alloc::vec![hash],
            min_views: BTreeMap::new(),
            canonical,
            archival,
        }
    }

    pub fn genesis_hash(&self) -> Hash32 {
        self.genesis
    }

    pub fn head(&self) -> Hash32 {
        self.head
    }

    pub fn head_block(&self) -> &StoredBlock {
        &self.blocks[&self.head]
    }

    pub fn head_state(&self) -> &ChainState {
        &self.states[&self.head]
    }

    pub fn head_height(&self) -> BlockNumber {
        self.head_block().block.number()
    }

    pub fn contains(&self, hash: &Hash32) -> bool {
        self.blocks.contains_key(hash)
    }

    pub fn get(&self, hash: &Hash32) -> Option<&StoredBlock> {
        self.blocks.get(hash)
    }

    pub fn state_of(&self, hash: &Hash32) -> Option<&ChainState> {
        self.states.get(hash)
    }

    pub fn last_finalized(&self) -> Hash32 {
        *self.finalized.last().unwrap()
    }

    pub fn last_finalized_height(&self) -> BlockNumber {
        self.blocks[&self.last_finalized()].block.number()
    }

    pub fn finalized_chain(&self) -> &[Hash32] {
        &self.finalized
    }

    pub fn canonical_hash(&self, height: BlockNumber) -> Option<Hash32> {
        self.canonical.get(&height).copied()
    }

    pub fn canonical_block(&self, height: BlockNumber) -> Option<&StoredBlock> {
        self.canonical.get(&height).and_then(|h| self.blocks.get(h))
    }

    pub fn min_view(&self, height: BlockNumber) -> ViewNumber {
        self.min_views.get(&height).copied().unwrap_or(0)
    }

    /// Record a completed quorum: blocks at `height` with a view below
    /// `view` are no longer acceptable. Returns true if this tightened the
    /// constraint.
    pub fn set_min_view(&mut self, height: BlockNumber, view: ViewNumber) -> bool {
        let entry = self.min_views.entry(height).or_insert(0);
        if view > *entry {
            *entry = view;
            true
        } else {
            false
        }
    }

    /// Walk a block's ancestry (itself first, genesis last).
    pub fn ancestors<'a>(&'a self, from: &Hash32) -> impl Iterator<Item = &'a StoredBlock> {
        let mut cursor = self.blocks.get(from);
        core::iter::from_fn(move || {
            let current = cursor?;
            cursor = self.blocks.get(&current.parent);
            Some(current)
        })
    }

    /// The seed of this branch's block at `height`, walking from `from`.
    pub fn seed_at(&self, from: &Hash32, height: BlockNumber) -> Option<Seed> {
        self.ancestors(from)
            .find(|b| b.block.number() == height)
            .map(|b| *b.block.seed())
    }

    pub fn insert(&mut self, block: Arc<Block>, state: ChainState) {
        let hash = block.hash();
        if self.blocks.contains_key(&hash) {
            return;
        }
        let parent = block.header().parent_hash;
        debug_assert!(self.blocks.contains_key(&parent));
        self.children.entry(parent).or_default().push(hash);
        self.tips.remove(&parent);
        self.tips.insert(hash);
        self.blocks.insert(
            hash,
            StoredBlock {
                block,
                hash,
                parent,
            },
        );
        self.states.insert(hash, state);
    }

    /// True if every block on the path from `hash` down to the finalized
    /// anchor satisfies the known minimum views.
    fn path_acceptable(&self, hash: &Hash32) -> bool {
        let anchor = self.last_finalized();
        for b in self.ancestors(hash) {
            if b.hash == anchor {
                return true;
            }
            if b.block.view() < self.min_view(b.block.number()) {
                return false;
            }
        }
        // Never reached the anchor: parallel to finality, not acceptable.
        false
    }

    /// Candidate heads: each tip trimmed back to its deepest ancestor with
    /// an acceptable path.
    fn candidates(&self) -> Vec<Hash32> {
        let anchor = self.last_finalized();
        let mut out = BTreeSet::new();
        for tip in &self.tips {
            let mut cursor = *tip;
            loop {
                if self.path_acceptable(&cursor) {
                    out.insert(cursor);
                    break;
                }
                if cursor == anchor {
                    break;
                }
                match self.blocks.get(&cursor) {
                    Some(b) if b.hash != anchor => cursor = b.parent,
                    _ => break,
                }
            }
        }
        if out.is_empty() {
            out.insert(anchor);
        }
        out.into_iter().collect()
    }

    /// Path from the finalized anchor (exclusive) up to `tip` (inclusive):
    /// (macro_count, views by ascending height, length).
    fn path_profile(&self, tip: &Hash32) -> Option<(u64, Vec<ViewNumber>, u64)> {
        let anchor = self.last_finalized();
        let mut views = Vec::new();
        let mut macros = 0u64;
        let mut cursor = *tip;
        while cursor != anchor {
            let b = self.blocks.get(&cursor)?;
            if b.block.is_macro() {
                macros += 1;
            }
            views.push(b.block.view());
            cursor = b.parent;
        }
        views.reverse();
        let len = views.len() as u64;
        Some((macros, views, len))
    }

    /// The cumulative chain comparison: most macro blocks first, then the
    /// first differing view number (higher wins), then most blocks. Fully
    /// tied chains are equal and either may be extended.
    pub fn compare_chains(&self, a: &Hash32, b: &Hash32) -> Result<ChainOrdering, CompareError> {
        if !self.blocks.contains_key(a) || !self.blocks.contains_key(b) {
            return Err(CompareError::UnknownTip);
        }
        let pa = self.path_profile(a).ok_or(CompareError::Incomparable)?;
        let pb = self.path_profile(b).ok_or(CompareError::Incomparable)?;
        if pa.0 != pb.0 {
            return Ok(if pa.0 > pb.0 {
                ChainOrdering::ABetter
            } else {
                ChainOrdering::BBetter
            });
        }
        for (va, vb) in pa.1.iter().zip(pb.1.iter()) {
            if va != vb {
                return Ok(if va > vb {
                    ChainOrdering::ABetter
                } else {
                    ChainOrdering::BBetter
                });
            }
        }
        if pa.2 != pb.2 {
            return Ok(if pa.2 > pb.2 {
                ChainOrdering::ABetter
            } else {
                ChainOrdering::BBetter
            });
        }
        Ok(ChainOrdering::Equal)
    }

    /// Re-run head selection. Returns reorg details when the new head does
    /// not extend the old one.
    pub fn reselect_head(&mut self) -> Option<Reorg> {
        let mut best = self.last_finalized();
        for candidate in self.candidates() {
            match self.compare_chains(&candidate, &best) {
                Ok(ChainOrdering::ABetter) => best = candidate,
                // Deterministic tie-break: the smaller header hash.
                Ok(ChainOrdering::Equal) if candidate < best => best = candidate,
                _ => {}
            }
        }
        if best == self.head {
            return None;
        }
        let old_head = self.head;
        self.head = best;

        // Collect both paths down to their meeting point.
        let old_path: Vec<Hash32> = self.ancestors(&old_head).map(|b| b.hash).collect();
        let old_set: BTreeSet<Hash32> = old_path.iter().copied().collect();
        let mut fork_point = best;
        for b in self.ancestors(&best) {
            if old_set.contains(&b.hash) {
                fork_point = b.hash;
                break;
            }
        }
        let abandoned: Vec<Hash32> = old_path
            .iter()
            .copied()
            .take_while(|h| *h != fork_point)
            .collect();

        self.rebuild_canonical();
        if abandoned.is_empty() {
            None
        } else {
            Some(Reorg {
                old_head,
                new_head: best,
                abandoned,
            })
        }
    }

    fn rebuild_canonical(&mut self) {
        let anchor = self.last_finalized();
        let anchor_height = self.blocks[&anchor].block.number();
        self.canonical.split_off(&anchor_height);
        self.canonical.insert(anchor_height, anchor);
        let chain: Vec<(BlockNumber, Hash32)> = self
            .ancestors(&self.head)
            .take_while(|b| b.block.number() > anchor_height)
            .map(|b| (b.block.number(), b.hash))
            .collect();
        for (height, hash) in chain {
            self.canonical.insert(height, hash);
        }
    }

    /// Mark a macro block final: drop competing branches and prune states
    /// (and, for non-archival stores, the structures they anchor) below it.
    pub fn finalize(&mut self, macro_hash: Hash32) -> Result<(), CompareError> {
        if self.finalized.contains(&macro_hash) {
            return Ok(());
        }
        let stored = self.blocks.get(&macro_hash).ok_or(CompareError::UnknownTip)?;
        debug_assert!(stored.block.is_macro());
        // The new final block must descend from the previous one.
        let prev = self.last_finalized();
        if !self.ancestors(&macro_hash).any(|b| b.hash == prev) {
            return Err(CompareError::Incomparable);
        }
        self.finalized.push(macro_hash);

        // Keep the finalized path and everything descending from the new
        // final macro; drop other branches.
        let mut keep: BTreeSet<Hash32> = self.ancestors(&macro_hash).map(|b| b.hash).collect();
        let mut stack = alloc::vec![macro_hash];
        while let Some(h) = stack.pop() {
            if let Some(kids) = self.children.get(&h) {
                for kid in kids {
                    if keep.insert(*kid) {
                        stack.push(*kid);
                    }
                }
            }
        }
        self.blocks.retain(|h, _| keep.contains(h));
        self.children.retain(|h, _| keep.contains(h));
        for kids in self.children.values_mut() {
            kids.retain(|k| keep.contains(k));
        }
        self.tips.retain(|h| keep.contains(h));
        if self.tips.is_empty() || !keep.contains(&self.head) {
            self.tips.insert(macro_hash);
        }

        // States below the finalized macro are only needed by archives.
        let final_height = self.blocks[&macro_hash].block.number();
        if !self.archival {
            let blocks = &self.blocks;
            self.states.retain(|h, _| {
                keep.contains(h)
                    && blocks
                        .get(h)
                        .is_some_and(|b| b.block.number() >= final_height)
            });
        } else {
            self.states.retain(|h, _| keep.contains(h));
        }
        self.min_views = self.min_views.split_off(&(final_height + 1));
        if !keep.contains(&self.head) {
            self.head = macro_hash;
        }
        self.rebuild_canonical();
        Ok(())
    }

    /// Serve a block-range request along the canonical path.
    pub fn canonical_range(&self, from_height: BlockNumber, max: usize) -> Vec<Arc<Block>> {
        self.canonical
            .range(from_height..)
            .take(max)
            .filter_map(|(_, h)| self.blocks.get(h).map(|b| b.block.clone()))
            .collect()
    }

    /// All block hashes currently at the given height (any branch).
    pub fn blocks_at_height(&self, height: BlockNumber) -> Vec<Hash32> {
        self.blocks
            .values()
            .filter(|b| b.block.number() == height)
            .map(|b| b.hash)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::export::GenesisRecord;
    use crate::chain::{BlockHeader, MicroBlock, MicroDigest, MicroJustification};
    use crate::consensus::validate::make_genesis_block;
    use crate::crypto::{sign, Seed};
    use crate::state::tests_support::small_genesis;

    fn micro_on(
        store: &ChainStore,
        record: &GenesisRecord,
        parent: Hash32,
        number: BlockNumber,
        view: ViewNumber,
        salt: u8,
    ) -> Arc<Block> {
        // Structurally minimal blocks: these tests exercise tree shape and
        // comparison only, not validation.
        let parent_seed = *store.get(&parent).unwrap().block.seed();
        let (sk, _) = crate::crypto::keygen(record.params.backend, &[salt; 32]);
        let seed = crate::crypto::next_seed(&sk, &parent_seed);
        let digest = MicroDigest {
            timestamp: number * 10 + salt as u64,
            seed,
            view_changes: alloc::vec![],
            fork_proofs: alloc::vec![],
        };
        let header = BlockHeader {
            parent_hash: parent,
            block_number: number,
            view_number: view,
            digest_root: digest.root(),
            transactions_root: crate::chain::transactions_root(&[]),
            state_root: Hash32::ZERO,
        };
        let justification = MicroJustification {
            producer_slot: 0,
            signature: sign(&sk, b"test"),
        };
        Arc::new(Block::Micro(MicroBlock {
            header,
            digest,
            transactions: alloc::vec![],
            justification,
        }))
    }

    fn store_with_genesis() -> (ChainStore, GenesisRecord) {
        let (record, _) = small_genesis();
        let (block, state) = make_genesis_block(&record).unwrap();
        (ChainStore::new(Arc::new(block), state, true), record)
    }

    fn extend(
        store: &mut ChainStore,
        record: &GenesisRecord,
        parent: Hash32,
        number: BlockNumber,
        view: ViewNumber,
        salt: u8,
    ) -> Hash32 {
        let block = micro_on(store, record, parent, number, view, salt);
        let state = store.head_state().clone();
        let hash = block.hash();
        store.insert(block, state);
        hash
    }

    #[test]
    fn longer_chain_wins_without_views() {
        let (mut store, record) = store_with_genesis();
        let g = store.genesis_hash();
        let a1 = extend(&mut store, &record, g, 1, 0, 1);
        let b1 = extend(&mut store, &record, g, 1, 0, 2);
        let a2 = extend(&mut store, &record, a1, 2, 0, 1);
        assert_eq!(
            store.compare_chains(&a2, &b1).unwrap(),
            ChainOrdering::ABetter
        );
        store.reselect_head();
        assert_eq!(store.head(), a2);
    }

    #[test]
    fn higher_view_beats_longer_chain() {
        let (mut store, record) = store_with_genesis();
        let g = store.genesis_hash();
        let a1 = extend(&mut store, &record, g, 1, 0, 1);
        let a2 = extend(&mut store, &record, a1, 2, 0, 1);
        let _a3 = extend(&mut store, &record, a2, 3, 0, 1);
        let b1 = extend(&mut store, &record, g, 1, 1, 2);
        assert_eq!(
            store.compare_chains(&b1, &_a3).unwrap(),
            ChainOrdering::ABetter
        );
    }

    #[test]
    fn equal_chains_tie_break_on_hash() {
        let (mut store, record) = store_with_genesis();
        let g = store.genesis_hash();
        let a1 = extend(&mut store, &record, g, 1, 0, 1);
        let b1 = extend(&mut store, &record, g, 1, 0, 2);
        assert_eq!(
            store.compare_chains(&a1, &b1).unwrap(),
            ChainOrdering::Equal
        );
        store.reselect_head();
        assert_eq!(store.head(), a1.min(b1));
    }

    #[test]
    fn min_view_supersedes_accepted_branch() {
        let (mut store, record) = store_with_genesis();
        let g = store.genesis_hash();
        let a1 = extend(&mut store, &record, g, 1, 0, 1);
        let a2 = extend(&mut store, &record, a1, 2, 0, 1);
        store.reselect_head();
        assert_eq!(store.head(), a2);

        // Quorum for view 1 at height 1: the whole branch is abandoned.
        store.set_min_view(1, 1);
        let reorg = store.reselect_head().unwrap();
        assert_eq!(store.head(), g);
        assert_eq!(reorg.abandoned.len(), 2);

        // A view-1 block at height 1 becomes the head.
        let b1 = extend(&mut store, &record, g, 1, 1, 2);
        store.reselect_head();
        assert_eq!(store.head(), b1);
    }

    #[test]
    fn reorg_reports_abandoned_blocks() {
        let (mut store, record) = store_with_genesis();
        let g = store.genesis_hash();
        let a1 = extend(&mut store, &record, g, 1, 0, 1);
        store.reselect_head();
        let b1 = extend(&mut store, &record, g, 1, 0, 2);
        let b2 = extend(&mut store, &record, b1, 2, 0, 2);
        let reorg = store.reselect_head();
        if store.head() == b2 {
            let reorg = reorg.unwrap();
            assert_eq!(reorg.abandoned, alloc::vec![a1]);
        }
    }

    #[test]
    fn seed_lookup_walks_the_branch() {
        let (mut store, record) = store_with_genesis();
        let g = store.genesis_hash();
        let a1 = extend(&mut store, &record, g, 1, 0, 1);
        let genesis_seed: Seed = record.genesis_seed();
        assert_eq!(store.seed_at(&a1, 0), Some(genesis_seed));
        assert!(store.seed_at(&a1, 5).is_none());
    }
}
