//! Chain synchronization over an export stream, at three verification
//! depths.
//!
//! Archival sync replays and fully validates every block. Full sync walks
//! only the macro header chain (hash links plus 2f+1 justifications against
//! each previous list), checks the shipped state against the last macro's
//! state root, and fully validates just the current epoch's micro blocks.
//! Light sync walks the macro chain the same way but only checks producer
//! signatures and the seed chain on current-epoch micro blocks, answering
//! state queries via Merkle proofs instead of holding state.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use crate::chain::export::{ExportReader, RecordKind};
use crate::chain::{
    self, block_signing_bytes, hash_header, Block, BlockNumber, MacroBlock, ViewNumber,
};
use crate::consensus::validate::{
    self, make_genesis_block, parent_info, RejectReason, SeedLookup,
};
use crate::crypto::{self, PublicKey, Seed};
use crate::encoding::{CodecError, Decode};
use crate::hash::Hash32;
use crate::selection::select_slot_owners;
use crate::state::ChainState;

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum SyncError {
    Parse(CodecError),
    BadGenesis(String),
    /// Full validation failed at a specific height.
    InvalidBlock { height: BlockNumber, reason: String },
    /// A macro header's prev link does not match the chain.
    BrokenMacroChain { height: BlockNumber },
    /// A macro justification failed or lacked quorum.
    BadJustification { height: BlockNumber },
    /// The shipped state does not hash to the last macro's state root.
    StateRootMismatch { height: BlockNumber },
    /// The export carries no usable state snapshot.
    MissingState,
    /// Blocks out of order or with gaps.
    BrokenSequence { height: BlockNumber },
}

impl fmt::Display for SyncError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyncError::Parse(e) => write!(f, "malformed export: {e}"),
            SyncError::BadGenesis(what) => write!(f, "bad genesis: {what}"),
            SyncError::InvalidBlock { height, reason } => {
                write!(f, "invalid block at height {height}: {reason}")
            }
            SyncError::BrokenMacroChain { height } => {
                write!(f, "broken macro header chain at height {height}")
            }
            SyncError::BadJustification { height } => {
                write!(f, "bad macro justification at height {height}")
            }
            SyncError::StateRootMismatch { height } => {
                write!(f, "state does not match root at height {height}")
            }
            SyncError::MissingState => write!(f, "export lacks a state snapshot"),
            SyncError::BrokenSequence { height } => {
                write!(f, "non-contiguous block sequence at height {height}")
            }
        }
    }
}

impl From<CodecError> for SyncError {
    fn from(e: CodecError) -> Self {
        SyncError::Parse(e)
    }
}

/// What a sync produced, with the work counters the mode guarantees.
#[derive(Clone, Debug)]
pub struct SyncOutcome {
    pub head_hash: Hash32,
    pub head_height: BlockNumber,
    /// Hot keys of the current epoch's validator list.
    pub validator_list_keys: Vec<PublicKey>,
    pub state_root: Hash32,
    /// Present for archival and full sync.
    pub state: Option<ChainState>,
    pub stats: SyncStats,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct SyncStats {
    pub macro_headers_verified: u64,
    pub micro_blocks_validated: u64,
    /// Micro records skipped without decoding their payload.
    pub old_micro_records_skipped: u64,
}

struct MapSeedLookup<'a> {
    seeds: &'a BTreeMap<BlockNumber, Seed>,
}

impl SeedLookup for MapSeedLookup<'_> {
    fn seed_at(&self, height: BlockNumber) -> Option<Seed> {
        self.seeds.get(&height).copied()
    }
}

/// Download-everything verification: every block revalidated, the final
/// state rederived from genesis.
pub fn sync_archival(bytes: &[u8]) -> Result<SyncOutcome, SyncError> {
    let reader = ExportReader::open(bytes)?;
    let params = reader.genesis.params;
    let (genesis_block, genesis_state) = make_genesis_block(&reader.genesis)
        .map_err(|e| SyncError::BadGenesis(alloc::format!("{e}")))?;

    let mut parent_block = Arc::new(genesis_block);
    let mut parent_state = genesis_state;
    let mut last_macro_hash = parent_block.hash();
    let mut seeds: BTreeMap<BlockNumber, Seed> = BTreeMap::new();
    seeds.insert(0, *parent_block.seed());
    let mut stats = SyncStats::default();

    for record in reader.records() {
        let record = record?;
        if record.kind == RecordKind::State {
            continue;
        }
        let block = record.decode_block()?;
        let height = block.number();
        if height != parent_state.height + 1 {
            return Err(SyncError::BrokenSequence { height });
        }
        if block.header().parent_hash != parent_block.hash() {
            return Err(SyncError::InvalidBlock {
                height,
                reason: String::from("parent hash mismatch"),
            });
        }
        let parent = parent_info(&parent_block, &parent_state, last_macro_hash);
        let lookup = MapSeedLookup { seeds: &seeds };
        let validated = validate::validate_block(&params, &parent, &block, &lookup, true)
            .map_err(|reason| SyncError::InvalidBlock {
                height,
                reason: alloc::format!("{reason}"),
            })?;
        match record.kind {
            RecordKind::Macro => stats.macro_headers_verified += 1,
            RecordKind::Micro => stats.micro_blocks_validated += 1,
            RecordKind::State => unreachable!(),
        }
        seeds.insert(height, *block.seed());
        // Seeds older than two epochs can no longer be referenced.
        let cutoff = height.saturating_sub(2 * params.epoch_period());
        seeds = seeds.split_off(&cutoff);
        parent_state = validated.post_state;
        parent_block = Arc::new(block);
        if parent_block.is_macro() {
            last_macro_hash = parent_block.hash();
        }
    }

    Ok(SyncOutcome {
        head_hash: parent_block.hash(),
        head_height: parent_block.number(),
        validator_list_keys: parent_state.ctx.slot_keys.clone(),
        state_root: parent_state.root(),
        state: Some(parent_state),
        stats,
    })
}

/// The macro header walk shared by full and light sync: verify hash links
/// and a 2f+1 justification against each previous epoch's list. Returns the
/// macro blocks and the raw current-epoch micro payloads.
struct MacroWalk<'a> {
    genesis_block: Block,
    macros: Vec<MacroBlock>,
    current_epoch_micros: Vec<&'a [u8]>,
    skipped_old_micros: u64,
}

fn walk_macro_chain<'a>(reader: &ExportReader<'a>) -> Result<MacroWalk<'a>, SyncError> {
    let params = reader.genesis.params;
    let (genesis_block, genesis_state) = make_genesis_block(&reader.genesis)
        .map_err(|e| SyncError::BadGenesis(alloc::format!("{e}")))?;
    let f = params.f();

    // First pass: find the last macro height so "current epoch" is defined.
    let mut last_macro_height = 0u64;
    for record in reader.records() {
        let record = record?;
        if record.kind == RecordKind::Macro {
            last_macro_height = record.number;
        }
    }

    let mut macros: Vec<MacroBlock> = Vec::new();
    let mut current_epoch_micros: Vec<&[u8]> = Vec::new();
    let mut skipped_old_micros = 0u64;
    let mut prev_hash = genesis_block.hash();
    let mut prev_keys: Vec<PublicKey> = genesis_state.ctx.slot_keys.clone();

    for record in reader.records() {
        let record = record?;
        match record.kind {
            RecordKind::State => {}
            RecordKind::Micro => {
                if record.number > last_macro_height {
                    current_epoch_micros.push(record.payload);
                } else {
                    // Old-epoch micro blocks are skipped outright; their
                    // payloads are never decoded.
                    skipped_old_micros += 1;
                }
            }
            RecordKind::Macro => {
                let block = MacroBlock::decode_all(record.payload)?;
                let height = block.header.block_number;
                if !params.is_macro_height(height) {
                    return Err(SyncError::BrokenMacroChain { height });
                }
                if block.digest.prev_macro_hash != prev_hash {
                    return Err(SyncError::BrokenMacroChain { height });
                }
                match chain::verify_macro_justification(&block, &prev_keys, f) {
                    Ok(true) => {}
                    _ => return Err(SyncError::BadJustification { height }),
                }
                prev_hash = hash_header(&block.header);
                prev_keys = block.digest.validator_list_keys.clone();
                macros.push(block);
            }
        }
    }

    Ok(MacroWalk {
        genesis_block,
        macros,
        current_epoch_micros,
        skipped_old_micros,
    })
}

fn shipped_state(reader: &ExportReader<'_>) -> Result<Option<(BlockNumber, ChainState)>, SyncError> {
    for record in reader.records() {
        let record = record?;
        if record.kind == RecordKind::State {
            let state = ChainState::decode_all(record.payload)?;
            return Ok(Some((record.number, state)));
        }
    }
    Ok(None)
}

/// Macro-header sync plus shipped state: verifies the macro chain, checks
/// the state against the last macro's state root, and fully validates only
/// the micro blocks after it.
pub fn sync_full(bytes: &[u8]) -> Result<SyncOutcome, SyncError> {
    let reader = ExportReader::open(bytes)?;
    let params = reader.genesis.params;
    let walk = walk_macro_chain(&reader)?;
    let mut stats = SyncStats {
        macro_headers_verified: walk.macros.len() as u64,
        old_micro_records_skipped: walk.skipped_old_micros,
        ..SyncStats::default()
    };

    // Starting point: the last macro block, or genesis when none exist.
    let (mut parent_block, mut parent_state, mut last_macro_hash) = match walk.macros.last() {
        None => {
            let (genesis_block, genesis_state) = make_genesis_block(&reader.genesis)
                .map_err(|e| SyncError::BadGenesis(alloc::format!("{e}")))?;
            let hash = genesis_block.hash();
            (Arc::new(genesis_block), genesis_state, hash)
        }
        Some(last_macro) => {
            let height = last_macro.header.block_number;
            let (_, state) = shipped_state(&reader)?.ok_or(SyncError::MissingState)?;
            if state.root() != last_macro.header.state_root || state.height != height {
                return Err(SyncError::StateRootMismatch { height });
            }
            let hash = hash_header(&last_macro.header);
            (
                Arc::new(Block::Macro(last_macro.clone())),
                state,
                hash,
            )
        }
    };

    // Full validation of the current epoch's micro blocks. Fork proofs in
    // them may reference previous-epoch heights whose seeds full nodes do
    // not have; macro digests carry the boundary seed.
    let mut seeds: BTreeMap<BlockNumber, Seed> = BTreeMap::new();
    seeds.insert(parent_block.number(), *parent_block.seed());
    for payload in &walk.current_epoch_micros {
        let block = Block::decode_all(payload)?;
        let height = block.number();
        if height != parent_state.height + 1 {
            return Err(SyncError::BrokenSequence { height });
        }
        if block.header().parent_hash != parent_block.hash() {
            return Err(SyncError::InvalidBlock {
                height,
                reason: String::from("parent hash mismatch"),
            });
        }
        let parent = parent_info(&parent_block, &parent_state, last_macro_hash);
        let lookup = MapSeedLookup { seeds: &seeds };
        let validated = validate::validate_block(&params, &parent, &block, &lookup, true)
            .map_err(|reason| SyncError::InvalidBlock {
                height,
                reason: alloc::format!("{reason}"),
            })?;
        stats.micro_blocks_validated += 1;
        seeds.insert(height, *block.seed());
        parent_state = validated.post_state;
        parent_block = Arc::new(block);
        if parent_block.is_macro() {
            last_macro_hash = parent_block.hash();
        }
    }

    Ok(SyncOutcome {
        head_hash: parent_block.hash(),
        head_height: parent_block.number(),
        validator_list_keys: parent_state.ctx.slot_keys.clone(),
        state_root: parent_state.root(),
        state: Some(parent_state),
        stats,
    })
}

/// Headers-and-digests sync: macro chain verification as in full sync, but
/// current-epoch micro blocks are only checked for producer signature and
/// seed-chain validity. No state, no transaction execution; queries go
/// through [`light_query`].
pub fn sync_light(bytes: &[u8]) -> Result<SyncOutcome, SyncError> {
    let reader = ExportReader::open(bytes)?;
    let params = reader.genesis.params;
    let walk = walk_macro_chain(&reader)?;
    let mut stats = SyncStats {
        macro_headers_verified: walk.macros.len() as u64,
        old_micro_records_skipped: walk.skipped_old_micros,
        ..SyncStats::default()
    };

    let (mut prev_hash, mut prev_seed, mut state_root, list_keys, mut height) =
        match walk.macros.last() {
            None => {
                let g = &walk.genesis_block;
                let keys = match g {
                    Block::Macro(m) => m.digest.validator_list_keys.clone(),
                    Block::Micro(_) => Vec::new(),
                };
                (
                    g.hash(),
                    *g.seed(),
                    g.header().state_root,
                    keys,
                    0,
                )
            }
            Some(m) => (
                hash_header(&m.header),
                m.digest.seed,
                m.header.state_root,
                m.digest.validator_list_keys.clone(),
                m.header.block_number,
            ),
        };

    for payload in &walk.current_epoch_micros {
        let block = Block::decode_all(payload)?;
        let micro = block.as_micro().ok_or(SyncError::BrokenSequence {
            height: block.number(),
        })?;
        let h = micro.header.block_number;
        if h != height + 1 {
            return Err(SyncError::BrokenSequence { height: h });
        }
        if micro.header.parent_hash != prev_hash {
            return Err(SyncError::InvalidBlock {
                height: h,
                reason: String::from("parent hash mismatch"),
            });
        }
        // Producer resolution needs no state: the owner schedule is a pure
        // function of the parent seed.
        let owners = select_slot_owners(&prev_seed, params.slots);
        let expected = owners.owner_at(micro.header.view_number);
        if micro.justification.producer_slot != expected {
            return Err(SyncError::InvalidBlock {
                height: h,
                reason: alloc::format!("{}", RejectReason::WrongProducer),
            });
        }
        let key = list_keys
            .get(expected as usize)
            .ok_or(SyncError::InvalidBlock {
                height: h,
                reason: String::from("slot outside list"),
            })?;
        let header_hash = hash_header(&micro.header);
        if !crypto::verify(
            key,
            &block_signing_bytes(&header_hash),
            &micro.justification.signature,
        ) {
            return Err(SyncError::InvalidBlock {
                height: h,
                reason: alloc::format!("{}", RejectReason::BadSignature),
            });
        }
        if !crypto::verify_seed(key, &prev_seed, &micro.digest.seed) {
            return Err(SyncError::InvalidBlock {
                height: h,
                reason: alloc::format!("{}", RejectReason::BadSeed),
            });
        }
        if micro.digest.root() != micro.header.digest_root {
            return Err(SyncError::InvalidBlock {
                height: h,
                reason: alloc::format!("{}", RejectReason::BadDigestRoot),
            });
        }
        stats.micro_blocks_validated += 1;
        prev_hash = header_hash;
        prev_seed = micro.digest.seed;
        state_root = micro.header.state_root;
        height = h;
    }

    Ok(SyncOutcome {
        head_hash: prev_hash,
        head_height: height,
        validator_list_keys: list_keys,
        state_root,
        state: None,
        stats,
    })
}

/// Check a single state entry against a state root, as a light client does
/// when it asks a full node for `key`.
pub fn light_query(
    state_root: &Hash32,
    key: &[u8],
    value: &[u8],
    proof: &crate::merkle::MerkleProof,
) -> bool {
    crate::state::verify_state_entry(state_root, key, value, proof)
}

/// Resolve a view-change quorum requirement for external callers that only
/// track headers.
pub fn expected_view_owner(prev_seed: &Seed, slots: u32, view: ViewNumber) -> u32 {
    select_slot_owners(prev_seed, slots).owner_at(view)
}
