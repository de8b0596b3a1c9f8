//! The per-validator node: an event-driven state machine producing and
//! validating blocks, running the view-change protocol and the PBFT rounds
//! for macro blocks, and resynchronizing after partitions.
//!
//! Adversarial behaviors are folded into the same state machine: they only
//! change what the node sends, never what it accepts as valid.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::chain::export::Params;
use crate::chain::{
    commit_signing_bytes, prepare_signing_bytes, Address, Block, BlockNumber, ForkProof,
    MacroBlock, PbftJustification, SlotIndex, Transaction, ViewChangeMessage, ViewNumber,
};
use crate::crypto::{self, SecretKey, Signature};
use crate::hash::Hash32;
use crate::simnet::trace::Observation;
use crate::state::{ChainState, ForkFact};

use super::chainstore::ChainStore;
use super::validate::{
    self, parent_info, validate_block, RejectReason, StoreSeedLookup, ValidatedBlock,
};
use super::{NetMessage, NodeAction, NodeEvent, NodeId, PbftVote};

/// How a validator behaves on the wire. Honest nodes follow the protocol;
/// the others implement specific failure and attack models.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Behavior {
    Honest,
    /// Stops participating entirely once its head reaches this height.
    Offline { from_height: BlockNumber },
    /// Withholds produced blocks until it sees a view-change message for
    /// that height, then releases.
    Delayer,
    /// Produces two conflicting blocks per owned slot and sends each to a
    /// different half of the network.
    Equivocator,
    /// Coalition member for the withheld-view-change attack: the coalition
    /// member owning a slot withholds its block until enough honest
    /// view-change votes exist, every member suppresses its own votes, and
    /// the stash is released once the withheld block has descendants.
    VcWithholder {
        coalition: Vec<NodeId>,
        release_depth: u64,
    },
    /// Produces normally but never includes transactions touching the
    /// target address.
    Censor { target: Address },
}

impl Behavior {
    pub fn is_byzantine(&self) -> bool {
        !matches!(self, Behavior::Honest)
    }
}

#[derive(Clone, Debug)]
pub struct NodeParams {
    pub id: NodeId,
    pub address: Address,
    pub cold: SecretKey,
    pub warm: SecretKey,
    pub hot: SecretKey,
    pub behavior: Behavior,
    pub params: Params,
    /// Simulated block construction / validation cost.
    pub processing_ms: u64,
    pub max_block_txs: usize,
    pub archival: bool,
    /// Validator address per node id, for coalition and split bookkeeping.
    pub all_addresses: Vec<Address>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum TimerPurpose {
    ViewTimeout {
        height: BlockNumber,
        view: ViewNumber,
    },
    Produce {
        height: BlockNumber,
        view: ViewNumber,
    },
}

struct PbftRound {
    proposal: Option<(Arc<MacroBlock>, ChainState)>,
    prepares: BTreeMap<SlotIndex, Signature>,
    commits: BTreeMap<SlotIndex, Signature>,
    sent_commit: bool,
    finalized: bool,
}

impl PbftRound {
    fn new() -> Self {
        PbftRound {
            proposal: None,
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            sent_commit: false,
            finalized: false,
        }
    }
}

#[derive(Default)]
struct AttackState {
    /// Height the withheld-view-change attack runs at.
    height: Option<BlockNumber>,
    withheld_block: Option<Arc<Block>>,
    suppressed_vcs: Vec<ViewChangeMessage>,
    block_released: bool,
    vcs_released: bool,
    done: bool,
}

pub struct ValidatorNode {
    cfg: NodeParams,
    store: ChainStore,
    now: u64,

    mempool: Vec<Transaction>,
    mempool_hashes: BTreeSet<Hash32>,

    /// Verified view-change messages by (height, target view, signer slot).
    vc_pool: BTreeMap<(BlockNumber, ViewNumber), BTreeMap<SlotIndex, ViewChangeMessage>>,
    /// Own broadcast view-change messages, for stall rebroadcast.
    own_vc_sent: BTreeMap<(BlockNumber, ViewNumber), Vec<ViewChangeMessage>>,

    fork_pool: BTreeMap<(BlockNumber, ViewNumber, SlotIndex), ForkProof>,
    /// First header seen per (height, view, slot), for equivocation watch.
    seen_headers: BTreeMap<(BlockNumber, ViewNumber, SlotIndex), Arc<Block>>,

    height: BlockNumber,
    view: ViewNumber,
    deadline: u64,

    next_token: u64,
    timers: BTreeMap<u64, TimerPurpose>,
    production_armed: BTreeSet<(BlockNumber, ViewNumber)>,

    pbft: BTreeMap<Hash32, PbftRound>,
    /// Proposal hash prepared per view at the current macro height.
    prepared_views: BTreeMap<ViewNumber, Hash32>,
    pending_votes: BTreeMap<BlockNumber, Vec<(bool, PbftVote)>>,
    pending_proposals: BTreeMap<BlockNumber, Vec<Arc<MacroBlock>>>,

    orphans: BTreeMap<Hash32, Vec<Arc<Block>>>,
    orphan_count: usize,
    last_request: BTreeMap<NodeId, u64>,

    delayed_block: Option<Arc<Block>>,
    attack: AttackState,

    out: Vec<NodeAction>,
}

const ORPHAN_CAP: usize = 512;
const REQUEST_BATCH: usize = 128;

impl ValidatorNode {
    pub fn new(cfg: NodeParams, genesis_block: Arc<Block>, genesis_state: ChainState) -> Self {
        let archival = cfg.archival;
        ValidatorNode {
            store: ChainStore::new(genesis_block, genesis_state, archival),
            cfg,
            now: 0,
            mempool: Vec::new(),
            mempool_hashes: BTreeSet::new(),
            vc_pool: BTreeMap::new(),
            own_vc_sent: BTreeMap::new(),
            fork_pool: BTreeMap::new(),
            seen_headers: BTreeMap::new(),
            height: 0,
            view: 0,
            deadline: 0,
            next_token: 0,
            timers: BTreeMap::new(),
            production_armed: BTreeSet::new(),
            pbft: BTreeMap::new(),
            prepared_views: BTreeMap::new(),
            pending_votes: BTreeMap::new(),
            pending_proposals: BTreeMap::new(),
            orphans: BTreeMap::new(),
            orphan_count: 0,
            last_request: BTreeMap::new(),
            delayed_block: None,
            attack: AttackState::default(),
            out: Vec::new(),
        }
    }

    pub fn store(&self) -> &ChainStore {
        &self.store
    }

    pub fn id(&self) -> NodeId {
        self.cfg.id
    }

    pub fn address(&self) -> Address {
        self.cfg.address
    }

    /// Arm the initial timers. Call once at simulation start.
    pub fn start(&mut self, now: u64) -> Vec<NodeAction> {
        self.now = now;
        self.sync_position();
        core::mem::take(&mut self.out)
    }

    pub fn handle(&mut self, now: u64, event: NodeEvent) -> Vec<NodeAction> {
        self.now = now;
        if self.is_offline() {
            return Vec::new();
        }
        match event {
            NodeEvent::Deliver { from, msg } => self.on_message(from, msg),
            NodeEvent::Timer { token } => self.on_timer(token),
            NodeEvent::AnnounceTick => self.on_announce_tick(),
            NodeEvent::InjectTx(tx) => self.on_inject_tx(tx),
        }
        core::mem::take(&mut self.out)
    }

    fn is_offline(&self) -> bool {
        matches!(self.cfg.behavior, Behavior::Offline { from_height }
            if self.store.head_height() >= from_height)
    }

    fn observe(&mut self, what: Observation) {
        self.out.push(NodeAction::Observe(what));
    }

    fn arm_timer(&mut self, at: u64, purpose: TimerPurpose) {
        let token = self.next_token;
        self.next_token += 1;
        self.timers.insert(token, purpose);
        self.out.push(NodeAction::ArmTimer { at, token });
    }

    fn quorum(&self) -> usize {
        self.cfg.params.quorum()
    }

    fn delta(&self) -> u64 {
        self.cfg.params.timeout_ms
    }

    fn my_slots(&self, state: &ChainState) -> Vec<SlotIndex> {
        state
            .ctx
            .list
            .slots
            .iter()
            .enumerate()
            .filter(|(_, addr)| **addr == self.cfg.address)
            .map(|(i, _)| i as SlotIndex)
            .collect()
    }

    fn coalition_addresses(&self) -> Vec<Address> {
        match &self.cfg.behavior {
            Behavior::VcWithholder { coalition, .. } => coalition
                .iter()
                .filter_map(|id| self.cfg.all_addresses.get(*id as usize).copied())
                .collect(),
            _ => Vec::new(),
        }
    }

    // ------------------------------------------------------------------
    // Message dispatch
    // ------------------------------------------------------------------

    fn on_message(&mut self, from: NodeId, msg: NetMessage) {
        match msg {
            NetMessage::Block(block) => self.on_block(from, block),
            NetMessage::ViewChange(msg) => self.on_view_change(msg),
            NetMessage::Proposal(proposal) => self.on_proposal(proposal),
            NetMessage::Prepare(vote) => self.on_pbft_vote(true, vote),
            NetMessage::Commit(vote) => self.on_pbft_vote(false, vote),
            NetMessage::ForkProofGossip(proof) => self.on_fork_proof(proof),
            NetMessage::Announce { height, head } => self.on_announce(from, height, head),
            NetMessage::BlockRequest { from_height } => {
                let blocks = self.store.canonical_range(from_height, REQUEST_BATCH);
                if !blocks.is_empty() {
                    self.out
                        .push(NodeAction::Send(from, NetMessage::BlockResponse { blocks }));
                }
            }
            NetMessage::BlockResponse { blocks } => {
                for block in blocks {
                    self.on_block(from, block);
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Blocks
    // ------------------------------------------------------------------

    fn on_block(&mut self, from: NodeId, block: Arc<Block>) {
        let mut queue = alloc::vec![block];
        while let Some(block) = queue.pop() {
            let hash = block.hash();
            if self.store.contains(&hash) {
                continue;
            }
            if block.number() <= self.store.last_finalized_height() {
                continue;
            }
            let parent = block.header().parent_hash;
            if !self.store.contains(&parent) {
                self.buffer_orphan(from, block);
                continue;
            }
            if self.process_block(&block) {
                // Anything waiting on this block can now be tried.
                if let Some(children) = self.orphans.remove(&hash) {
                    self.orphan_count -= children.len();
                    queue.extend(children);
                }
            }
        }
    }

    fn buffer_orphan(&mut self, from: NodeId, block: Arc<Block>) {
        if self.orphan_count >= ORPHAN_CAP {
            return;
        }
        let parent = block.header().parent_hash;
        self.orphans.entry(parent).or_default().push(block);
        self.orphan_count += 1;
        // Fetch the gap from whoever sent us the tip of it.
        self.request_blocks(from, self.store.last_finalized_height() + 1);
    }

    fn request_blocks(&mut self, from: NodeId, from_height: BlockNumber) {
        let last = self.last_request.get(&from).copied().unwrap_or(0);
        if self.now.saturating_sub(last) < self.delta() / 2 && last != 0 {
            return;
        }
        self.last_request.insert(from, self.now);
        self.out
            .push(NodeAction::Send(from, NetMessage::BlockRequest { from_height }));
    }

    /// Validate and adopt a block whose parent is present. Returns true if
    /// the block was accepted.
    fn process_block(&mut self, block: &Arc<Block>) -> bool {
        let _hash = block.hash();
        let height = block.number();
        let view = block.view();

        if view < self.store.min_view(height) {
            self.observe(Observation::Rejected {
                height,
                view,
                reason: RejectReason::ViewSuperseded.label(),
            });
            return false;
        }
        let parent_hash = block.header().parent_hash;
        let Some(parent_state) = self.store.state_of(&parent_hash) else {
            // Parent exists but its state was pruned: a stale branch.
            return false;
        };
        let parent_block = self.store.get(&parent_hash).unwrap().block.clone();
        let last_macro = self.last_macro_on_branch(&parent_hash);
        let parent = parent_info(&parent_block, parent_state, last_macro);
        let lookup = StoreSeedLookup {
            store: &self.store,
            parent_hash,
        };
        let validated = match validate_block(&self.cfg.params, &parent, block, &lookup, true) {
            Ok(v) => v,
            Err(reason) => {
                self.observe(Observation::Rejected {
                    height,
                    view,
                    reason: reason.label(),
                });
                return false;
            }
        };
        self.adopt_validated(block.clone(), validated);
        true
    }

    /// Insert an already-validated block and run all the follow-up work:
    /// equivocation watch, relay, finalization, head selection, timers.
    fn adopt_validated(&mut self, block: Arc<Block>, validated: ValidatedBlock) {
        let hash = block.hash();
        let height = block.number();
        let view = block.view();
        let is_macro = block.is_macro();

        self.observe(Observation::Accepted {
            height,
            view,
            hash,
            is_macro,
        });
        if self.cfg.archival {
            if let Block::Micro(micro) = block.as_ref() {
                for proof in &micro.digest.fork_proofs {
                    self.observe(Observation::ForkProofOnChain {
                        offense_height: proof.block_number(),
                        slot: proof.slot(),
                        in_block: height,
                    });
                }
                for tx in &micro.transactions {
                    if tx.is_external() {
                        self.observe(Observation::TxIncluded {
                            tx: tx.hash(),
                            height,
                        });
                    }
                }
            }
            if let Some(outcome) = &validated.macro_outcome {
                let distributed: u64 = outcome
                    .settlement
                    .distributions
                    .iter()
                    .map(|(_, amount)| amount)
                    .sum();
                self.observe(Observation::Settled {
                    epoch: self.cfg.params.epoch_of(height),
                    distributed,
                    burned: outcome.settlement.burned,
                    expelled: outcome.settlement.expelled.len() as u32,
                });
            }
        }

        self.watch_equivocation(&block);
        self.store.insert(block.clone(), validated.post_state);
        self.out
            .push(NodeAction::Broadcast(NetMessage::Block(block.clone())));

        if is_macro && block.as_macro().is_some_and(|m| m.justification.is_some()) {
            match self.store.finalize(hash) {
                Ok(()) => {
                    self.observe(Observation::Finalized { height, hash });
                    self.prune_below_finality();
                }
                Err(_) => {
                    self.observe(Observation::SafetyViolation { height });
                }
            }
        }

        self.after_chain_update();
    }

    /// Head reselection plus everything downstream of a head move.
    fn after_chain_update(&mut self) {
        if let Some(reorg) = self.store.reselect_head() {
            self.observe(Observation::Reorg {
                depth: reorg.abandoned.len() as u64,
                old_head: reorg.old_head,
                new_head: reorg.new_head,
            });
            self.reinject_abandoned(&reorg.abandoned);
        }
        self.sync_position();
    }

    fn reinject_abandoned(&mut self, abandoned: &[Hash32]) {
        let head_state_txs = self.store.head_state().included_txs.clone();
        for hash in abandoned {
            let Some(stored) = self.store.get(hash) else {
                continue;
            };
            let Block::Micro(micro) = stored.block.as_ref() else {
                continue;
            };
            let txs: Vec<Transaction> = micro
                .transactions
                .iter()
                .filter(|t| t.is_external())
                .cloned()
                .collect();
            for tx in txs {
                let tx_hash = tx.hash();
                if !head_state_txs.contains(&tx_hash) && self.mempool_hashes.insert(tx_hash) {
                    self.mempool.push(tx);
                }
            }
        }
    }

    fn watch_equivocation(&mut self, block: &Arc<Block>) {
        let Block::Micro(micro) = block.as_ref() else {
            return;
        };
        let key = (
            micro.header.block_number,
            micro.header.view_number,
            micro.justification.producer_slot,
        );
        match self.seen_headers.get(&key) {
            None => {
                self.seen_headers.insert(key, block.clone());
            }
            Some(first) => {
                let Block::Micro(first_micro) = first.as_ref() else {
                    return;
                };
                if first_micro.header == micro.header {
                    return;
                }
                let mut proof = ForkProof {
                    header_a: first_micro.header,
                    header_b: micro.header,
                    justification_a: first_micro.justification.clone(),
                    justification_b: micro.justification.clone(),
                };
                proof.canonicalize();
                self.add_fork_proof(proof, true);
            }
        }
    }

    fn add_fork_proof(&mut self, proof: ForkProof, created_here: bool) {
        let key = (proof.block_number(), proof.view_number(), proof.slot());
        if self.fork_pool.contains_key(&key) {
            return;
        }
        if created_here {
            self.observe(Observation::ForkProofCreated {
                height: proof.block_number(),
                view: proof.view_number(),
                slot: proof.slot(),
            });
        }
        self.fork_pool.insert(key, proof.clone());
        self.out
            .push(NodeAction::Broadcast(NetMessage::ForkProofGossip(proof)));
    }

    fn on_fork_proof(&mut self, proof: ForkProof) {
        let key = (proof.block_number(), proof.view_number(), proof.slot());
        if self.fork_pool.contains_key(&key) {
            return;
        }
        // Only pool proofs that verify against a remembered epoch.
        let state = self.store.head_state();
        let head = self.store.head();
        let lookup = StoreSeedLookup {
            store: &self.store,
            parent_hash: head,
        };
        if validate::resolve_fork_proof(&self.cfg.params, state, &proof, &lookup).is_ok() {
            self.add_fork_proof(proof, false);
        }
    }

    fn last_macro_on_branch(&self, from: &Hash32) -> Hash32 {
        self.store
            .ancestors(from)
            .find(|b| b.block.is_macro())
            .map(|b| b.hash)
            .unwrap_or(self.store.genesis_hash())
    }

    fn prune_below_finality(&mut self) {
        let cut = self.store.last_finalized_height();
        self.vc_pool = self.vc_pool.split_off(&(cut + 1, 0));
        self.own_vc_sent = self.own_vc_sent.split_off(&(cut + 1, 0));
        self.seen_headers = self.seen_headers.split_off(&(cut + 1, 0, 0));
        self.fork_pool.retain(|(height, _, _), _| {
            self.cfg.params.epoch_of(*height) + 1 >= self.cfg.params.epoch_of(cut)
        });
        self.pending_votes = self.pending_votes.split_off(&(cut + 1));
        self.pending_proposals = self.pending_proposals.split_off(&(cut + 1));
        self.production_armed = self.production_armed.split_off(&(cut + 1, 0));
    }

    // ------------------------------------------------------------------
    // Position, timers, production
    // ------------------------------------------------------------------

    /// Align the working height and view with the current head, arm the
    /// view timer and consider producing.
    fn sync_position(&mut self) {
        let head_height = self.store.head_height();
        let working = head_height + 1;
        let known_view = self.store.min_view(working);
        if working != self.height {
            self.height = working;
            self.view = known_view;
            self.deadline = self.now + (self.view as u64 + 1) * self.delta();
            self.arm_timer(
                self.deadline,
                TimerPurpose::ViewTimeout {
                    height: working,
                    view: self.view,
                },
            );
            self.pbft.clear();
            self.prepared_views.clear();
            self.drain_pending_macro_inputs();
        } else if known_view > self.view {
            self.view = known_view;
            self.deadline = self.deadline.max(self.now) + (self.view as u64 + 1) * self.delta();
            self.arm_timer(
                self.deadline,
                TimerPurpose::ViewTimeout {
                    height: working,
                    view: self.view,
                },
            );
        }
        self.check_attack_triggers();
        self.maybe_produce();
    }

    fn drain_pending_macro_inputs(&mut self) {
        if !self.cfg.params.is_macro_height(self.height) {
            return;
        }
        let height = self.height;
        for proposal in self
            .pending_proposals
            .remove(&height)
            .unwrap_or_default()
        {
            self.on_proposal(proposal);
        }
        for (is_prepare, vote) in self.pending_votes.remove(&height).unwrap_or_default() {
            self.on_pbft_vote(is_prepare, vote);
        }
    }

    fn maybe_produce(&mut self) {
        let height = self.height;
        let view = self.view;
        if self.production_armed.contains(&(height, view)) {
            return;
        }
        let state = self.store.head_state();
        let head_seed = *self.store.head_block().block.seed();
        let owners = crate::selection::select_slot_owners(&head_seed, self.cfg.params.slots);
        let slot = owners.owner_at(view);
        if state.ctx.is_barred(slot) {
            return;
        }
        if state.ctx.slot_owner(slot) != self.cfg.address {
            return;
        }
        if view > 0 && !self.have_quorums(height, view) {
            return;
        }
        self.production_armed.insert((height, view));
        self.arm_timer(
            self.now + self.cfg.processing_ms,
            TimerPurpose::Produce { height, view },
        );
    }

    fn have_quorums(&self, height: BlockNumber, view: ViewNumber) -> bool {
        (1..=view).all(|w| {
            self.vc_pool
                .get(&(height, w))
                .is_some_and(|m| m.len() >= self.quorum())
        })
    }

    fn on_timer(&mut self, token: u64) {
        match self.timers.remove(&token) {
            Some(TimerPurpose::ViewTimeout { height, view }) => {
                if height == self.height && view == self.view {
                    self.on_view_timeout();
                }
            }
            Some(TimerPurpose::Produce { height, view }) => {
                if height == self.height && view == self.view {
                    self.produce(height, view);
                }
            }
            None => {}
        }
    }

    /// The owner of the current view failed to deliver: vote to skip it.
    fn on_view_timeout(&mut self) {
        let height = self.height;
        let target = self.view + 1;
        let state = self.store.head_state();
        let slots = self.my_slots(state);
        if slots.is_empty() {
            return;
        }
        let signing = ViewChangeMessage::signing_bytes(target, height);
        let msgs: Vec<ViewChangeMessage> = slots
            .iter()
            .map(|&slot| ViewChangeMessage {
                view: target,
                block_number: height,
                signer_slot: slot,
                signature: crypto::sign(&self.cfg.hot, &signing),
            })
            .collect();

        let suppress = self.attack.height == Some(height) && !self.attack.vcs_released;
        if suppress {
            self.attack.suppressed_vcs.extend(msgs);
            return;
        }
        for msg in msgs {
            self.observe(Observation::ViewChangeSent {
                height,
                target_view: target,
                slot: msg.signer_slot,
            });
            self.own_vc_sent
                .entry((height, target))
                .or_default()
                .push(msg.clone());
            self.out
                .push(NodeAction::Broadcast(NetMessage::ViewChange(msg.clone())));
            self.on_view_change(msg);
        }
        // After voting, wait indefinitely for either the block or a quorum;
        // the timer re-arms when the view actually advances.
    }

    // ------------------------------------------------------------------
    // View changes
    // ------------------------------------------------------------------

    fn on_view_change(&mut self, msg: ViewChangeMessage) {
        let height = msg.block_number;
        if height <= self.store.last_finalized_height() || msg.view == 0 {
            return;
        }
        // Verify against the epoch the height belongs to, if remembered.
        let state = self.store.head_state();
        let epoch = self.cfg.params.epoch_of(height);
        let Some(keys) = state.keys_for_epoch(epoch) else {
            return;
        };
        let Some(key) = keys.get(msg.signer_slot as usize) else {
            return;
        };
        if !msg.verify(key) {
            return;
        }
        let entry = self.vc_pool.entry((height, msg.view)).or_default();
        entry.entry(msg.signer_slot).or_insert(msg.clone());
        self.check_attack_triggers();
        self.release_delayed_if_due();
        let count = self.vc_pool[&(height, msg.view)].len();
        if count < self.quorum() {
            return;
        }
        // Coalition nodes ignore the quorum they are manufacturing until
        // the stash is out.
        if self.attack.height == Some(height) && !self.attack.vcs_released {
            return;
        }
        if self.store.set_min_view(height, msg.view) {
            self.observe(Observation::ViewQuorum {
                height,
                target_view: msg.view,
            });
            self.after_chain_update();
        }
    }

    // ------------------------------------------------------------------
    // Production
    // ------------------------------------------------------------------

    fn produce(&mut self, height: BlockNumber, view: ViewNumber) {
        if self.cfg.params.is_macro_height(height) {
            self.produce_macro_proposal(height, view);
        } else {
            self.produce_micro(height, view);
        }
    }

    fn produce_micro(&mut self, height: BlockNumber, view: ViewNumber) {
        let parent_hash = self.store.head();
        let parent_block = self.store.head_block().block.clone();
        let parent_state = self.store.head_state().clone();
        let last_macro = self.last_macro_on_branch(&parent_hash);
        let owners =
            crate::selection::select_slot_owners(parent_block.seed(), self.cfg.params.slots);
        let slot = owners.owner_at(view);

        let (proofs, facts) = self.usable_fork_proofs(&parent_state, parent_hash);
        let skipped = validate::skipped_slots(parent_block.seed(), self.cfg.params.slots, view);
        let txs = self.select_transactions(&parent_state, &facts, &skipped, height);
        let view_changes: Vec<ViewChangeMessage> = (1..=view)
            .flat_map(|w| {
                self.vc_pool
                    .get(&(height, w))
                    .map(|m| m.values().cloned().collect::<Vec<_>>())
                    .unwrap_or_default()
            })
            .collect();

        let parent = parent_info(&parent_block, &parent_state, last_macro);
        let (block, _state) = validate::build_micro(
            &self.cfg.params,
            &parent,
            parent_hash,
            height,
            view,
            slot,
            &self.cfg.hot,
            self.now,
            txs,
            view_changes,
            proofs,
            &facts,
        );
        self.observe(Observation::Produced {
            height,
            view,
            slot,
            hash: block.hash(),
        });

        match &self.cfg.behavior {
            Behavior::Equivocator => {
                let twin = self.equivocate(&block);
                self.observe(Observation::Produced {
                    height,
                    view,
                    slot,
                    hash: twin.hash(),
                });
                let n = self.cfg.all_addresses.len() as NodeId;
                let me = self.cfg.id;
                let half_a: Vec<NodeId> = (0..n).filter(|i| *i != me && i % 2 == 0).collect();
                let half_b: Vec<NodeId> = (0..n).filter(|i| *i != me && i % 2 == 1).collect();
                self.out.push(NodeAction::SendMany(
                    half_a,
                    NetMessage::Block(block.clone()),
                ));
                self.out
                    .push(NodeAction::SendMany(half_b, NetMessage::Block(twin)));
                self.accept_own(block);
            }
            Behavior::Delayer => {
                self.delayed_block = Some(block);
                // Released when a view-change message for this height shows
                // up; see `on_view_change_observed_for_delayer`.
            }
            Behavior::VcWithholder { .. } if self.attack.height == Some(height) => {
                self.attack.withheld_block = Some(block);
                self.observe(Observation::AttackBlockWithheld { height });
            }
            _ => {
                self.out
                    .push(NodeAction::Broadcast(NetMessage::Block(block.clone())));
                self.accept_own(block);
            }
        }
    }

    fn accept_own(&mut self, block: Arc<Block>) {
        // Run the full acceptance path so the producer holds itself to the
        // same rules it applies to others.
        self.process_block(&block);
    }

    fn equivocate(&self, block: &Arc<Block>) -> Arc<Block> {
        let Block::Micro(micro) = block.as_ref() else {
            unreachable!("only micro blocks are equivocated");
        };
        let mut twin = micro.clone();
        twin.digest.timestamp += 1;
        twin.header.digest_root = twin.digest.root();
        let hash = crate::chain::hash_header(&twin.header);
        twin.justification.signature =
            crypto::sign(&self.cfg.hot, &crate::chain::block_signing_bytes(&hash));
        Arc::new(Block::Micro(twin))
    }

    fn produce_macro_proposal(&mut self, height: BlockNumber, view: ViewNumber) {
        let parent_hash = self.store.head();
        let parent_block = self.store.head_block().block.clone();
        let parent_state = self.store.head_state().clone();
        let last_macro = self.last_macro_on_branch(&parent_hash);
        let parent = parent_info(&parent_block, &parent_state, last_macro);
        let proposal = validate::build_macro_proposal(
            &self.cfg.params,
            &parent,
            parent_hash,
            height,
            view,
            &self.cfg.hot,
            self.now,
        );
        let Ok((proposal, _state)) = proposal else {
            return;
        };
        self.observe(Observation::Produced {
            height,
            view,
            slot: crate::selection::select_slot_owners(parent_block.seed(), self.cfg.params.slots)
                .owner_at(view),
            hash: crate::chain::hash_header(&proposal.header),
        });
        self.out
            .push(NodeAction::Broadcast(NetMessage::Proposal(proposal.clone())));
        self.on_proposal(proposal);
    }

    /// Producer-side pool filter: the proofs that will be accepted by
    /// validation against this parent.
    fn usable_fork_proofs(
        &self,
        parent_state: &ChainState,
        parent_hash: Hash32,
    ) -> (Vec<ForkProof>, Vec<ForkFact>) {
        let lookup = StoreSeedLookup {
            store: &self.store,
            parent_hash,
        };
        let mut proofs = Vec::new();
        let mut facts = Vec::new();
        let mut claimed = BTreeSet::new();
        for proof in self.fork_pool.values() {
            match validate::resolve_fork_proof(&self.cfg.params, parent_state, proof, &lookup) {
                Ok(fact) => {
                    if claimed.insert((fact.offense_epoch, fact.slot)) {
                        proofs.push(proof.clone());
                        facts.push(fact);
                    }
                }
                Err(_) => continue,
            }
        }
        (proofs, facts)
    }

    fn censors(&self, tx: &Transaction) -> bool {
        let Behavior::Censor { target } = &self.cfg.behavior else {
            return false;
        };
        match tx {
            Transaction::Transfer(t) => t.from == *target || t.to == *target,
            Transaction::Stake(t) => t.main_address == *target,
            Transaction::Restake(t) => t.main_address == *target,
            Transaction::Unstake(t) => t.main_address == *target,
            Transaction::Reactivate(t) => t.main_address == *target,
            Transaction::Timestamp(_) => false,
        }
    }

    fn select_transactions(
        &mut self,
        parent_state: &ChainState,
        facts: &[ForkFact],
        skipped: &[SlotIndex],
        height: BlockNumber,
    ) -> Vec<Transaction> {
        let mut scratch = parent_state.clone();
        for fact in facts {
            scratch.record_fork_fact(fact);
        }
        for &slot in skipped {
            scratch.record_skipped_slot(slot);
        }
        let _ = height;

        let mut order: Vec<usize> = (0..self.mempool.len()).collect();
        order.sort_by_key(|&i| core::cmp::Reverse(self.mempool[i].fee()));
        let mut chosen = Vec::new();
        let mut drop_idx: Vec<usize> = Vec::new();
        for idx in order {
            if chosen.len() >= self.cfg.max_block_txs {
                break;
            }
            let tx = &self.mempool[idx];
            if self.censors(tx) {
                continue;
            }
            match scratch.execute_transaction(tx) {
                Ok(()) => chosen.push(tx.clone()),
                Err(crate::state::TxError::Replay)
                | Err(crate::state::TxError::BadSignature)
                | Err(crate::state::TxError::AddressKeyMismatch)
                | Err(crate::state::TxError::Internal) => drop_idx.push(idx),
                // Possibly valid later (balances, registry states).
                Err(crate::state::TxError::Staking(_)) => {}
            }
        }
        drop_idx.sort_unstable_by(|a, b| b.cmp(a));
        for idx in drop_idx {
            let tx = self.mempool.remove(idx);
            self.mempool_hashes.remove(&tx.hash());
        }
        chosen
    }

    fn on_inject_tx(&mut self, tx: Transaction) {
        if !tx.is_external() {
            return;
        }
        if self.mempool_hashes.insert(tx.hash()) {
            self.mempool.push(tx);
        }
    }

    // ------------------------------------------------------------------
    // PBFT rounds
    // ------------------------------------------------------------------

    fn on_proposal(&mut self, proposal: Arc<MacroBlock>) {
        let height = proposal.header.block_number;
        if !self.cfg.params.is_macro_height(height) {
            return;
        }
        if height > self.height {
            self.pending_proposals
                .entry(height)
                .or_default()
                .push(proposal);
            return;
        }
        if height < self.height {
            return;
        }
        let view = proposal.header.view_number;
        if view != self.view || view < self.store.min_view(height) {
            return;
        }
        let hash = crate::chain::hash_header(&proposal.header);
        if self
            .pbft
            .get(&hash)
            .is_some_and(|round| round.proposal.is_some())
        {
            return;
        }
        let parent_hash = proposal.header.parent_hash;
        let Some(parent_state) = self.store.state_of(&parent_hash) else {
            return;
        };
        let parent_block = self.store.get(&parent_hash).unwrap().block.clone();
        let last_macro = self.last_macro_on_branch(&parent_hash);
        let parent = parent_info(&parent_block, parent_state, last_macro);
        let validated =
            match validate::validate_macro(&self.cfg.params, &parent, &proposal, false) {
                Ok(v) => v,
                Err(reason) => {
                    self.observe(Observation::Rejected {
                        height,
                        view,
                        reason: reason.label(),
                    });
                    return;
                }
            };

        let round = self.pbft.entry(hash).or_insert_with(PbftRound::new);
        round.proposal = Some((proposal, validated.post_state));

        // Prepare the first valid proposal seen for this view.
        if !self.prepared_views.contains_key(&view) {
            self.prepared_views.insert(view, hash);
            let state = self.store.head_state();
            let slots = self.my_slots(state);
            let signing = prepare_signing_bytes(&hash);
            for slot in slots {
                let vote = PbftVote {
                    height,
                    proposal: hash,
                    slot,
                    signature: crypto::sign(&self.cfg.hot, &signing),
                };
                self.pbft
                    .get_mut(&hash)
                    .unwrap()
                    .prepares
                    .insert(slot, vote.signature);
                self.out
                    .push(NodeAction::Broadcast(NetMessage::Prepare(vote)));
            }
        }
        self.pbft_progress(hash);
    }

    fn on_pbft_vote(&mut self, is_prepare: bool, vote: PbftVote) {
        let height = vote.height;
        if !self.cfg.params.is_macro_height(height) {
            return;
        }
        if height > self.height {
            self.pending_votes
                .entry(height)
                .or_default()
                .push((is_prepare, vote));
            return;
        }
        if height < self.height {
            return;
        }
        let state = self.store.head_state();
        let Some(key) = state.ctx.slot_keys.get(vote.slot as usize) else {
            return;
        };
        let signing = if is_prepare {
            prepare_signing_bytes(&vote.proposal)
        } else {
            commit_signing_bytes(&vote.proposal)
        };
        if !crypto::verify(key, &signing, &vote.signature) {
            return;
        }
        let round = self.pbft.entry(vote.proposal).or_insert_with(PbftRound::new);
        if is_prepare {
            round.prepares.entry(vote.slot).or_insert(vote.signature);
        } else {
            round.commits.entry(vote.slot).or_insert(vote.signature);
        }
        self.pbft_progress(vote.proposal);
    }

    fn pbft_progress(&mut self, hash: Hash32) {
        let quorum = self.quorum();
        let Some(round) = self.pbft.get(&hash) else {
            return;
        };
        if round.proposal.is_none() || round.finalized {
            return;
        }
        let height = round.proposal.as_ref().unwrap().0.header.block_number;

        // Enough prepares: send commits once.
        if !round.sent_commit && round.prepares.len() >= quorum {
            let state = self.store.head_state();
            let slots = self.my_slots(state);
            let signing = commit_signing_bytes(&hash);
            let votes: Vec<PbftVote> = slots
                .iter()
                .map(|&slot| PbftVote {
                    height,
                    proposal: hash,
                    slot,
                    signature: crypto::sign(&self.cfg.hot, &signing),
                })
                .collect();
            let round = self.pbft.get_mut(&hash).unwrap();
            round.sent_commit = true;
            for vote in votes {
                round.commits.entry(vote.slot).or_insert(vote.signature);
                self.out.push(NodeAction::Broadcast(NetMessage::Commit(vote)));
            }
        }

        let round = self.pbft.get(&hash).unwrap();
        // Finalize on 2f+1 commits from slots that also prepared.
        let both: Vec<SlotIndex> = round
            .commits
            .keys()
            .filter(|slot| round.prepares.contains_key(slot))
            .copied()
            .collect();
        if both.len() < quorum {
            return;
        }
        let n = self.cfg.params.slots as usize;
        let prepare_slots: Vec<SlotIndex> = round.prepares.keys().copied().collect();
        let prepare_sigs: Vec<Signature> = round.prepares.values().copied().collect();
        let commit_sigs: Vec<Signature> = both
            .iter()
            .map(|slot| round.commits[slot])
            .collect();
        let prepare = crypto::aggregate(&prepare_sigs, &prepare_slots, n);
        let commit = crypto::aggregate(&commit_sigs, &both, n);
        let (Ok(prepare), Ok(commit)) = (prepare, commit) else {
            return;
        };
        let proposal = round.proposal.as_ref().unwrap().0.clone();
        self.pbft.get_mut(&hash).unwrap().finalized = true;

        let mut block = (*proposal).clone();
        block.justification = Some(PbftJustification { prepare, commit });
        let block = Arc::new(Block::Macro(block));
        self.process_block(&block);
    }

    // ------------------------------------------------------------------
    // Announcements, resync, stall recovery
    // ------------------------------------------------------------------

    fn on_announce_tick(&mut self) {
        self.out.push(NodeAction::Broadcast(NetMessage::Announce {
            height: self.store.head_height(),
            head: self.store.head(),
        }));
        // Long stall at the current height: make sure its view-change
        // messages survive partitions by re-gossiping them.
        if self.now > self.deadline.saturating_add(2 * self.delta()) {
            let msgs: Vec<ViewChangeMessage> = self
                .own_vc_sent
                .range((self.height, 0)..(self.height + 1, 0))
                .flat_map(|(_, msgs)| msgs.iter().cloned())
                .collect();
            for msg in msgs {
                self.out
                    .push(NodeAction::Broadcast(NetMessage::ViewChange(msg)));
            }
        }
        self.release_delayed_if_due();
    }

    fn on_announce(&mut self, from: NodeId, height: BlockNumber, head: Hash32) {
        if height > self.store.head_height() && !self.store.contains(&head) {
            let from_height = self.store.head_height() + 1;
            self.request_blocks(from, from_height);
        }
    }

    // ------------------------------------------------------------------
    // Behavior machinery
    // ------------------------------------------------------------------

    /// Delayer: release the withheld block as soon as any view change for
    /// its height has been observed.
    fn release_delayed_if_due(&mut self) {
        if self.delayed_block.is_none() {
            return;
        }
        let height = self.delayed_block.as_ref().unwrap().number();
        let pressured = self
            .vc_pool
            .range((height, 0)..(height + 1, 0))
            .any(|(_, m)| !m.is_empty());
        if pressured {
            let block = self.delayed_block.take().unwrap();
            self.out
                .push(NodeAction::Broadcast(NetMessage::Block(block.clone())));
            self.accept_own(block);
        }
    }

    /// Deterministic, chain-derived triggers for the withheld-view-change
    /// attack. Every coalition node computes the same decisions.
    fn check_attack_triggers(&mut self) {
        let Behavior::VcWithholder {
            coalition,
            release_depth,
        } = &self.cfg.behavior
        else {
            return;
        };
        let release_depth = *release_depth;
        let coalition = coalition.clone();
        if self.attack.done {
            return;
        }
        let params = self.cfg.params;
        let f = params.f() as usize;

        // Arm: first micro height whose view-0 owner is a coalition member,
        // in an epoch where the coalition holds between f+1 and 2f slots.
        if self.attack.height.is_none() {
            let height = self.height;
            if params.is_macro_height(height) || height <= 1 {
                return;
            }
            let state = self.store.head_state();
            let coalition_addrs: Vec<Address> = coalition
                .iter()
                .filter_map(|id| self.cfg.all_addresses.get(*id as usize).copied())
                .collect();
            let coalition_slots = state
                .ctx
                .list
                .slots
                .iter()
                .filter(|a| coalition_addrs.contains(a))
                .count();
            if coalition_slots < f + 1 || coalition_slots > 2 * f {
                return;
            }
            let head_seed = self.store.head_block().block.seed();
            let owners = crate::selection::select_slot_owners(head_seed, params.slots);
            let slot = owners.owner_at(0);
            if state.ctx.is_barred(slot) {
                return;
            }
            if coalition_addrs.contains(&state.ctx.slot_owner(slot)) {
                self.attack.height = Some(height);
            }
            return;
        }

        let attack_height = self.attack.height.unwrap();

        // Lead: release the withheld block once f honest view-change votes
        // for the attack height exist.
        if self.attack.withheld_block.is_some() && !self.attack.block_released {
            let coalition_addrs = self.coalition_addresses();
            let state = self.store.head_state();
            let honest_votes = self
                .vc_pool
                .get(&(attack_height, 1))
                .map(|m| {
                    m.keys()
                        .filter(|slot| {
                            state
                                .ctx
                                .list
                                .slots
                                .get(**slot as usize)
                                .is_some_and(|addr| !coalition_addrs.contains(addr))
                        })
                        .count()
                })
                .unwrap_or(0);
            if honest_votes >= f {
                let block = self.attack.withheld_block.take().unwrap();
                self.attack.block_released = true;
                self.observe(Observation::AttackBlockReleased {
                    height: attack_height,
                });
                self.out
                    .push(NodeAction::Broadcast(NetMessage::Block(block.clone())));
                self.accept_own(block);
                return;
            }
        }

        // All members: release the stashed view changes when the withheld
        // block has grown the agreed number of descendants.
        if !self.attack.vcs_released
            && self.store.head_height() >= attack_height + release_depth
            && self
                .store
                .canonical_hash(attack_height)
                .is_some()
        {
            self.attack.vcs_released = true;
            self.attack.done = true;
            let stash = core::mem::take(&mut self.attack.suppressed_vcs);
            if !stash.is_empty() {
                self.observe(Observation::AttackVcsReleased {
                    height: attack_height,
                });
            }
            for msg in stash {
                self.own_vc_sent
                    .entry((msg.block_number, msg.view))
                    .or_default()
                    .push(msg.clone());
                self.out
                    .push(NodeAction::Broadcast(NetMessage::ViewChange(msg.clone())));
                self.on_view_change(msg);
            }
        }
    }
}
