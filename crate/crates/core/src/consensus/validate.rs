//! Block validation shared by live consensus and chain synchronization.
//!
//! Validation is parent-relative: given the parent's post-state and seed, a
//! block either yields its own post-state or a reject reason. The barred
//! set never changes who owns a slot; it makes the owner's blocks
//! unacceptable, forcing the height through the view-change path instead.

use alloc::collections::BTreeSet;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use crate::chain::export::{GenesisRecord, Params};
use crate::chain::{
    self, block_signing_bytes, hash_header, transactions_root, Block, BlockHeader, BlockNumber,
    ForkProof, ForkProofError, MacroBlock, MacroDigest, MicroBlock, SlotIndex, Timestamp,
    ViewNumber,
};
use crate::crypto::{self, Seed};
use crate::hash::Hash32;
use crate::selection::select_slot_owners;
use crate::state::{ChainState, ForkFact, MacroOutcome, MicroEffects, StateError, TxError};

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum RejectReason {
    WrongHeight,
    /// A micro block at a macro height or vice versa.
    WrongBlockKind,
    /// Producer is not the slot owner resolved for (height, view).
    WrongProducer,
    /// The resolved owner is barred for this epoch.
    BarredValidator,
    BadSignature,
    BadSeed,
    BadTimestamp,
    /// View > 0 without 2f+1 valid messages for every skipped view.
    MissingViewChangeQuorum,
    InvalidViewChangeMessage,
    InvalidForkProof,
    /// Fork proof outside its submission window.
    StaleForkProof,
    /// Fork proof for a slot already slashed on this chain.
    DuplicateForkProof,
    InvalidTransaction(TxError),
    BadDigestRoot,
    BadTransactionsRoot,
    BadStateRoot,
    /// Macro digest's validator list does not match the sampled one.
    BadValidatorList,
    BadPrevMacroHash,
    MissingJustification,
    BadJustification,
    /// A block at a view below a known 2f+1 view-change quorum.
    ViewSuperseded,
    State(StateError),
}

impl RejectReason {
    pub fn label(&self) -> &'static str {
        match self {
            RejectReason::WrongHeight => "wrong-height",
            RejectReason::WrongBlockKind => "wrong-block-kind",
            RejectReason::WrongProducer => "wrong-producer",
            RejectReason::BarredValidator => "barred-validator",
            RejectReason::BadSignature => "bad-signature",
            RejectReason::BadSeed => "bad-seed",
            RejectReason::BadTimestamp => "bad-timestamp",
            RejectReason::MissingViewChangeQuorum => "missing-view-change-quorum",
            RejectReason::InvalidViewChangeMessage => "invalid-view-change-message",
            RejectReason::InvalidForkProof => "invalid-fork-proof",
            RejectReason::StaleForkProof => "stale-fork-proof",
            RejectReason::DuplicateForkProof => "duplicate-fork-proof",
            RejectReason::InvalidTransaction(_) => "invalid-transaction",
            RejectReason::BadDigestRoot => "bad-digest-root",
            RejectReason::BadTransactionsRoot => "bad-transactions-root",
            RejectReason::BadStateRoot => "bad-state-root",
            RejectReason::BadValidatorList => "bad-validator-list",
            RejectReason::BadPrevMacroHash => "bad-prev-macro-hash",
            RejectReason::MissingJustification => "missing-justification",
            RejectReason::BadJustification => "bad-justification",
            RejectReason::ViewSuperseded => "view-superseded",
            RejectReason::State(_) => "state-error",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::InvalidTransaction(e) => write!(f, "invalid transaction: {e}"),
            RejectReason::State(e) => write!(f, "state error: {e}"),
            other => write!(f, "{}", other.label()),
        }
    }
}

/// A block that passed validation, with the state it produces and the
/// chain-derived facts extracted along the way.
pub struct ValidatedBlock {
    pub post_state: ChainState,
    pub skipped_slots: Vec<SlotIndex>,
    pub fork_facts: Vec<ForkFact>,
    /// Settlement details for macro blocks.
    pub macro_outcome: Option<MacroOutcome>,
}

/// What validation needs to know about the parent.
pub struct ParentInfo<'a> {
    pub state: &'a ChainState,
    pub seed: &'a Seed,
    pub timestamp: Timestamp,
    /// Header hash of the last macro block on the parent's branch
    /// (the parent itself when it is a macro block).
    pub last_macro_hash: Hash32,
}

/// Lets validation look up the seed of an ancestor height on this branch,
/// for resolving fork-proof slot owners.
pub trait SeedLookup {
    fn seed_at(&self, height: BlockNumber) -> Option<Seed>;
}

impl<F: Fn(BlockNumber) -> Option<Seed>> SeedLookup for F {
    fn seed_at(&self, height: BlockNumber) -> Option<Seed> {
        self(height)
    }
}

/// The slots skipped when a block lands at `view`: the owners of all lower
/// views, deduplicated (the owner list wraps past `n`).
pub fn skipped_slots(parent_seed: &Seed, slots: u32, view: ViewNumber) -> Vec<SlotIndex> {
    let owners = select_slot_owners(parent_seed, slots);
    let mut seen = BTreeSet::new();
    (0..view)
        .map(|v| owners.owner_at(v))
        .filter(|s| seen.insert(*s))
        .collect()
}

/// Check the embedded view-change evidence for a block at `view`: one
/// quorum of valid, distinct-signer messages per skipped view.
fn check_view_change_evidence(
    params: &Params,
    parent_state: &ChainState,
    height: BlockNumber,
    view: ViewNumber,
    messages: &[chain::ViewChangeMessage],
) -> Result<(), RejectReason> {
    for msg in messages {
        if msg.block_number != height || msg.view == 0 || msg.view > view {
            return Err(RejectReason::InvalidViewChangeMessage);
        }
        let key = parent_state
            .ctx
            .slot_keys
            .get(msg.signer_slot as usize)
            .ok_or(RejectReason::InvalidViewChangeMessage)?;
        if !msg.verify(key) {
            return Err(RejectReason::InvalidViewChangeMessage);
        }
    }
    for target in 1..=view {
        let mut signers = BTreeSet::new();
        for msg in messages.iter().filter(|m| m.view == target) {
            signers.insert(msg.signer_slot);
        }
        if signers.len() < params.quorum() {
            return Err(RejectReason::MissingViewChangeQuorum);
        }
    }
    Ok(())
}

/// Resolve and verify a single fork proof against a branch: the offense
/// must fall in the running epoch or the one before it, verify under that
/// epoch's keys, and target a slot not yet slashed on this chain.
pub fn resolve_fork_proof(
    params: &Params,
    parent_state: &ChainState,
    proof: &ForkProof,
    seeds: &impl SeedLookup,
) -> Result<ForkFact, RejectReason> {
    let current_epoch = parent_state.ctx.epoch;
    let offense_epoch = params.epoch_of(proof.block_number());
    if offense_epoch != current_epoch && offense_epoch + 1 != current_epoch {
        return Err(RejectReason::StaleForkProof);
    }
    let keys = parent_state
        .keys_for_epoch(offense_epoch)
        .ok_or(RejectReason::StaleForkProof)?;
    let resolve = |height: BlockNumber, view: ViewNumber| {
        seeds
            .seed_at(height.checked_sub(1)?)
            .map(|seed| select_slot_owners(&seed, params.slots).owner_at(view))
    };
    match chain::verify_fork_proof(proof, keys, resolve) {
        Ok(true) => {}
        Ok(false) | Err(ForkProofError::ForeignEpoch) => {
            return Err(RejectReason::InvalidForkProof)
        }
    }
    let slot = proof.slot();
    if parent_state.ledger.is_slot_slashed(offense_epoch, slot) {
        return Err(RejectReason::DuplicateForkProof);
    }
    let list = parent_state
        .list_for_epoch(offense_epoch)
        .ok_or(RejectReason::StaleForkProof)?;
    let validator = *list
        .slots
        .get(slot as usize)
        .ok_or(RejectReason::InvalidForkProof)?;
    Ok(ForkFact {
        offense_epoch,
        slot,
        validator,
    })
}

/// Validate embedded fork proofs against this branch and turn them into
/// state facts.
fn check_fork_proofs(
    params: &Params,
    parent_state: &ChainState,
    proofs: &[ForkProof],
    seeds: &impl SeedLookup,
) -> Result<Vec<ForkFact>, RejectReason> {
    let mut facts = Vec::with_capacity(proofs.len());
    let mut seen = BTreeSet::new();
    for proof in proofs {
        let fact = resolve_fork_proof(params, parent_state, proof, seeds)?;
        if !seen.insert((fact.offense_epoch, fact.slot)) {
            return Err(RejectReason::DuplicateForkProof);
        }
        facts.push(fact);
    }
    Ok(facts)
}

/// Full validation of a micro block against its parent. On success the
/// returned state is the block's post-state.
pub fn validate_micro(
    params: &Params,
    parent: &ParentInfo<'_>,
    block: &MicroBlock,
    seeds: &impl SeedLookup,
) -> Result<ValidatedBlock, RejectReason> {
    let height = block.header.block_number;
    if height != parent.state.height + 1 {
        return Err(RejectReason::WrongHeight);
    }
    if params.is_macro_height(height) {
        return Err(RejectReason::WrongBlockKind);
    }
    let view = block.header.view_number;
    let owners = select_slot_owners(parent.seed, params.slots);
    let expected = owners.owner_at(view);
    if block.justification.producer_slot != expected {
        return Err(RejectReason::WrongProducer);
    }
    if parent.state.ctx.is_barred(expected) {
        return Err(RejectReason::BarredValidator);
    }
    let key = parent.state.ctx.slot_key(expected);
    let header_hash = hash_header(&block.header);
    if !crypto::verify(
        key,
        &block_signing_bytes(&header_hash),
        &block.justification.signature,
    ) {
        return Err(RejectReason::BadSignature);
    }
    if !crypto::verify_seed(key, parent.seed, &block.digest.seed) {
        return Err(RejectReason::BadSeed);
    }
    if block.digest.timestamp < parent.timestamp {
        return Err(RejectReason::BadTimestamp);
    }
    check_view_change_evidence(params, parent.state, height, view, &block.digest.view_changes)?;
    let fork_facts = check_fork_proofs(params, parent.state, &block.digest.fork_proofs, seeds)?;
    if block.digest.root() != block.header.digest_root {
        return Err(RejectReason::BadDigestRoot);
    }
    if transactions_root(&block.transactions) != block.header.transactions_root {
        return Err(RejectReason::BadTransactionsRoot);
    }

    let skipped = skipped_slots(parent.seed, params.slots, view);
    let mut state = parent.state.clone();
    // Internal transactions carry no state transition; filter them out.
    let externals: Vec<chain::Transaction> = block
        .transactions
        .iter()
        .filter(|t| t.is_external())
        .cloned()
        .collect();
    state
        .apply_micro(&MicroEffects {
            height,
            transactions: &externals,
            skipped_slots: &skipped,
            fork_facts: &fork_facts,
        })
        .map_err(RejectReason::InvalidTransaction)?;
    if state.root() != block.header.state_root {
        return Err(RejectReason::BadStateRoot);
    }
    Ok(ValidatedBlock {
        post_state: state,
        skipped_slots: skipped,
        fork_facts,
        macro_outcome: None,
    })
}

/// Full validation of a macro block against its parent. Pass
/// `require_justification = false` for PBFT proposals, which are validated
/// before any votes exist.
pub fn validate_macro(
    params: &Params,
    parent: &ParentInfo<'_>,
    block: &MacroBlock,
    require_justification: bool,
) -> Result<ValidatedBlock, RejectReason> {
    let height = block.header.block_number;
    if height != parent.state.height + 1 {
        return Err(RejectReason::WrongHeight);
    }
    if !params.is_macro_height(height) {
        return Err(RejectReason::WrongBlockKind);
    }
    let view = block.header.view_number;
    let owners = select_slot_owners(parent.seed, params.slots);
    let leader = owners.owner_at(view);
    if parent.state.ctx.is_barred(leader) {
        return Err(RejectReason::BarredValidator);
    }
    // The seed signature is the leader's authentication: only the owner of
    // the leader slot can produce it.
    let key = parent.state.ctx.slot_key(leader);
    if !crypto::verify_seed(key, parent.seed, &block.digest.seed) {
        return Err(RejectReason::BadSeed);
    }
    if block.digest.timestamp < parent.timestamp {
        return Err(RejectReason::BadTimestamp);
    }
    if block.digest.prev_macro_hash != parent.last_macro_hash {
        return Err(RejectReason::BadPrevMacroHash);
    }
    if block.digest.root() != block.header.digest_root {
        return Err(RejectReason::BadDigestRoot);
    }
    // Macro blocks carry no external transactions.
    if block.header.transactions_root != transactions_root(&[]) {
        return Err(RejectReason::BadTransactionsRoot);
    }

    let skipped = skipped_slots(parent.seed, params.slots, view);
    let mut state = parent.state.clone();
    let outcome = state
        .apply_macro(height, &block.digest.seed, &skipped)
        .map_err(RejectReason::State)?;
    if outcome.next_slot_keys != block.digest.validator_list_keys {
        return Err(RejectReason::BadValidatorList);
    }
    if state.root() != block.header.state_root {
        return Err(RejectReason::BadStateRoot);
    }
    if require_justification {
        match &block.justification {
            None => return Err(RejectReason::MissingJustification),
            Some(_) => {
                let ok = chain::verify_macro_justification(
                    block,
                    &parent.state.ctx.slot_keys,
                    params.f(),
                )
                .map_err(|_| RejectReason::BadJustification)?;
                if !ok {
                    return Err(RejectReason::BadJustification);
                }
            }
        }
    }
    Ok(ValidatedBlock {
        post_state: state,
        skipped_slots: skipped,
        fork_facts: Vec::new(),
        macro_outcome: Some(outcome),
    })
}

/// Dispatch on block kind.
pub fn validate_block(
    params: &Params,
    parent: &ParentInfo<'_>,
    block: &Block,
    seeds: &impl SeedLookup,
    require_justification: bool,
) -> Result<ValidatedBlock, RejectReason> {
    match block {
        Block::Micro(b) => validate_micro(params, parent, b, seeds),
        Block::Macro(b) => validate_macro(params, parent, b, require_justification),
    }
}

/// Synthesize the genesis macro block every node derives from the genesis
/// record. It carries the first epoch's validator list and no
/// justification.
pub fn make_genesis_block(record: &GenesisRecord) -> Result<(Block, ChainState), StateError> {
    let state = ChainState::genesis(record)?;
    let digest = MacroDigest {
        timestamp: 0,
        seed: record.genesis_seed(),
        validator_list_keys: state.ctx.slot_keys.clone(),
        prev_macro_hash: Hash32::ZERO,
    };
    let header = BlockHeader {
        parent_hash: Hash32::ZERO,
        block_number: 0,
        view_number: 0,
        digest_root: digest.root(),
        transactions_root: transactions_root(&[]),
        state_root: state.root(),
    };
    Ok((
        Block::Macro(MacroBlock {
            header,
            digest,
            justification: None,
        }),
        state,
    ))
}

/// Convenience for building `ParentInfo` from a stored parent block.
pub fn parent_info<'a>(
    parent_block: &'a Block,
    parent_state: &'a ChainState,
    last_macro_hash: Hash32,
) -> ParentInfo<'a> {
    ParentInfo {
        state: parent_state,
        seed: parent_block.seed(),
        timestamp: parent_block.timestamp(),
        last_macro_hash,
    }
}

/// A `SeedLookup` over a chain store branch ending at `parent_hash`.
pub struct StoreSeedLookup<'a> {
    pub store: &'a super::ChainStore,
    pub parent_hash: Hash32,
}

impl SeedLookup for StoreSeedLookup<'_> {
    fn seed_at(&self, height: BlockNumber) -> Option<Seed> {
        self.store.seed_at(&self.parent_hash, height)
    }
}

/// Helper shared by producers: build the micro block for this parent,
/// returning it with its post-state.
#[allow(clippy::too_many_arguments)]
pub fn build_micro(
    params: &Params,
    parent: &ParentInfo<'_>,
    parent_hash: Hash32,
    height: BlockNumber,
    view: ViewNumber,
    producer_slot: SlotIndex,
    hot_key: &crypto::SecretKey,
    timestamp: Timestamp,
    transactions: Vec<chain::Transaction>,
    view_changes: Vec<chain::ViewChangeMessage>,
    fork_proofs: Vec<ForkProof>,
    fork_facts: &[ForkFact],
) -> (Arc<Block>, ChainState) {
    let seed = crypto::next_seed(hot_key, parent.seed);
    let skipped = skipped_slots(parent.seed, params.slots, view);
    let mut state = parent.state.clone();
    state
        .apply_micro(&MicroEffects {
            height,
            transactions: &transactions,
            skipped_slots: &skipped,
            fork_facts,
        })
        .expect("producer pre-validated transactions");
    let digest = chain::MicroDigest {
        timestamp,
        seed,
        view_changes,
        fork_proofs,
    };
    let header = BlockHeader {
        parent_hash,
        block_number: height,
        view_number: view,
        digest_root: digest.root(),
        transactions_root: transactions_root(&transactions),
        state_root: state.root(),
    };
    let justification = chain::MicroJustification {
        producer_slot,
        signature: crypto::sign(hot_key, &block_signing_bytes(&hash_header(&header))),
    };
    (
        Arc::new(Block::Micro(MicroBlock {
            header,
            digest,
            transactions,
            justification,
        })),
        state,
    )
}

/// Build a macro proposal (no justification yet) for this parent.
pub fn build_macro_proposal(
    params: &Params,
    parent: &ParentInfo<'_>,
    parent_hash: Hash32,
    height: BlockNumber,
    view: ViewNumber,
    hot_key: &crypto::SecretKey,
    timestamp: Timestamp,
) -> Result<(Arc<MacroBlock>, ChainState), StateError> {
    let seed = crypto::next_seed(hot_key, parent.seed);
    let skipped = skipped_slots(parent.seed, params.slots, view);
    let mut state = parent.state.clone();
    let outcome = state.apply_macro(height, &seed, &skipped)?;
    let digest = MacroDigest {
        timestamp,
        seed,
        validator_list_keys: outcome.next_slot_keys,
        prev_macro_hash: parent.last_macro_hash,
    };
    let header = BlockHeader {
        parent_hash,
        block_number: height,
        view_number: view,
        digest_root: digest.root(),
        transactions_root: transactions_root(&[]),
        state_root: state.root(),
    };
    Ok((
        Arc::new(MacroBlock {
            header,
            digest,
            justification: None,
        }),
        state,
    ))
}
