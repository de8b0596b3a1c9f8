//! The event loop: virtual clock, seeded delays, gossip fan-out,
//! partitions, scripted transactions and trace assembly.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cmp::Reverse;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::chain::export::{ExportBuilder, GenesisRecord, GenesisValidator};
use crate::chain::{
    Address, Block, BlockNumber, ReactivateTx, RestakeTx, StakeTx, Transaction, TransferTx,
    UnstakeTx,
};
use crate::consensus::{
    make_genesis_block, Behavior, NetMessage, NodeAction, NodeEvent, NodeId, NodeParams,
    ValidatorNode,
};
use crate::crypto::{self, keygen, SecretKey};
use crate::encoding::Encode;
use crate::hash::{sha256_parts, Hash32};
use crate::selection::select_slot_owners;
use crate::simnet::trace::{
    CanonicalBlock, EpochRoster, Metrics, Observation, SimEvent, SimTrace, SIM_NODE,
};

use super::{ConfigError, DelayModel, Duration, SimConfig};

/// Deterministic key material for one validator.
#[derive(Clone)]
pub struct ValidatorKeys {
    pub cold: SecretKey,
    pub warm: SecretKey,
    pub hot: SecretKey,
    pub address: Address,
}

/// Derive a validator's keys from the run seed and its node id.
pub fn validator_keys(config: &SimConfig, id: NodeId) -> ValidatorKeys {
    let seed_bytes = config.rng_seed.to_be_bytes();
    let id_bytes = id.to_be_bytes();
    let derive = |tag: &[u8]| sha256_parts(&[tag, &seed_bytes, &id_bytes]).0;
    let (cold, cold_pk) = keygen(config.backend, &derive(b"key/cold"));
    let (warm, _) = keygen(config.backend, &derive(b"key/warm"));
    let (hot, _) = keygen(config.backend, &derive(b"key/hot"));
    ValidatorKeys {
        address: Address::from_public_key(&cold_pk),
        cold,
        warm,
        hot,
    }
}

/// The genesis record a configuration implies.
pub fn genesis_record_for(config: &SimConfig) -> GenesisRecord {
    let mut validators = Vec::new();
    let mut accounts = Vec::new();
    for (id, spec) in config.validators.iter().enumerate() {
        let keys = validator_keys(config, id as NodeId);
        if spec.deposit > 0 {
            validators.push(GenesisValidator {
                address: keys.address,
                deposit: spec.deposit,
                cold_key: keys.cold.public(),
                warm_key: keys.warm.public(),
                hot_key: keys.hot.public(),
                possession: crypto::sign_proof_of_possession(&keys.hot),
                reward_address: None,
            });
        }
        if spec.liquid > 0 {
            accounts.push((keys.address, spec.liquid));
        }
    }
    GenesisRecord {
        params: config.params(),
        seed_tag: sha256_parts(&[b"genesis-tag", &config.rng_seed.to_be_bytes()]).0,
        validators,
        accounts,
    }
}

fn build_scripted_tx(
    keys: &[ValidatorKeys],
    spec: &super::TxSpec,
    nonce: u64,
) -> Option<Transaction> {
    let fee_default = 1u64;
    let finish = |mut tx: Transaction, signer: &SecretKey| {
        let signing = tx.signing_bytes();
        let signature = crypto::sign(signer, &signing);
        match &mut tx {
            Transaction::Transfer(t) => t.signature = signature,
            Transaction::Stake(t) => t.signature = signature,
            Transaction::Restake(t) => t.signature = signature,
            Transaction::Unstake(t) => t.signature = signature,
            Transaction::Reactivate(t) => t.signature = signature,
            Transaction::Timestamp(_) => {}
        }
        tx
    };
    match spec {
        super::TxSpec::Transfer {
            from,
            to,
            amount,
            fee,
        } => {
            let from_keys = keys.get(*from as usize)?;
            let to_keys = keys.get(*to as usize)?;
            let placeholder = crypto::sign(&from_keys.cold, b"");
            let tx = Transaction::Transfer(TransferTx {
                from: from_keys.address,
                to: to_keys.address,
                amount: *amount,
                fee: *fee,
                nonce,
                sender_key: from_keys.cold.public(),
                signature: placeholder,
            });
            Some(finish(tx, &from_keys.cold))
        }
        super::TxSpec::Stake {
            validator,
            amount,
            reward_address,
        } => {
            let v = keys.get(*validator as usize)?;
            let reward = reward_address
                .and_then(|id| keys.get(id as usize))
                .map(|k| k.address);
            let placeholder = crypto::sign(&v.cold, b"");
            let tx = Transaction::Stake(StakeTx {
                main_address: v.address,
                amount: *amount,
                warm_key: v.warm.public(),
                hot_key: v.hot.public(),
                possession: crypto::sign_proof_of_possession(&v.hot),
                reward_address: reward,
                fee: fee_default,
                nonce,
                cold_key: v.cold.public(),
                signature: placeholder,
            });
            Some(finish(tx, &v.cold))
        }
        super::TxSpec::Unstake { validator } => {
            let v = keys.get(*validator as usize)?;
            let placeholder = crypto::sign(&v.cold, b"");
            let tx = Transaction::Unstake(UnstakeTx {
                main_address: v.address,
                fee: fee_default,
                nonce,
                cold_key: v.cold.public(),
                signature: placeholder,
            });
            Some(finish(tx, &v.cold))
        }
        super::TxSpec::Restake {
            validator,
            new_amount,
            rotate_hot_key,
            new_reward_address,
        } => {
            let v = keys.get(*validator as usize)?;
            let new_hot_key = rotate_hot_key.then(|| {
                let entropy = sha256_parts(&[b"key/hot-rotated", &v.address.0]).0;
                let (hot, hot_pk) = keygen(v.hot.public().backend(), &entropy);
                (hot_pk, crypto::sign_proof_of_possession(&hot))
            });
            let reward = new_reward_address
                .and_then(|id| keys.get(id as usize))
                .map(|k| k.address);
            let placeholder = crypto::sign(&v.warm, b"");
            let tx = Transaction::Restake(RestakeTx {
                main_address: v.address,
                new_amount: *new_amount,
                new_hot_key,
                new_reward_address: reward,
                fee: fee_default,
                nonce,
                signature: placeholder,
            });
            Some(finish(tx, &v.warm))
        }
        super::TxSpec::Reactivate { validator } => {
            let v = keys.get(*validator as usize)?;
            let placeholder = crypto::sign(&v.warm, b"");
            let tx = Transaction::Reactivate(ReactivateTx {
                main_address: v.address,
                hot_key: v.hot.public(),
                possession: crypto::sign_proof_of_possession(&v.hot),
                fee: fee_default,
                nonce,
                signature: placeholder,
            });
            Some(finish(tx, &v.warm))
        }
    }
}

#[derive(Clone, Debug)]
enum Payload {
    Node(NodeEvent),
    PartitionMark(bool),
}

struct Scheduled {
    at: u64,
    seq: u64,
    target: NodeId,
    payload: Payload,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Everything a finished run yields: the trace and the archival node's
/// chain export.
pub struct RunOutput {
    pub trace: SimTrace,
    pub export: Vec<u8>,
}

struct Engine {
    config: SimConfig,
    nodes: Vec<ValidatorNode>,
    queue: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    now: u64,
    rng: ChaCha12Rng,
    events: Vec<SimEvent>,
    /// (height, parent) of every block seen on the wire, for fork metrics.
    block_registry: BTreeMap<Hash32, (BlockNumber, Hash32)>,
    /// Finalized macro hash per height, per honest node, for safety checks.
    finalized_seen: BTreeMap<BlockNumber, Hash32>,
    safety_violation: bool,
    sent: u64,
    delivered: u64,
    dropped_partition: u64,
    honest: Vec<bool>,
}

impl Engine {
    fn schedule(&mut self, at: u64, target: NodeId, payload: Payload) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            seq,
            target,
            payload,
        }));
    }

    fn delay(&mut self, from: NodeId, to: NodeId) -> u64 {
        match &self.config.delay {
            DelayModel::Constant(d) => *d,
            DelayModel::Uniform { lo, hi } => self.rng.gen_range(*lo..=*hi),
            DelayModel::PerLink { default, links } => {
                links.get(&(from, to)).copied().unwrap_or(*default)
            }
        }
    }

    fn partitioned(&self, a: NodeId, b: NodeId) -> bool {
        self.config.partitions.iter().any(|w| {
            self.now >= w.start_ms
                && self.now < w.end_ms
                && w.group_a.contains(&a) != w.group_a.contains(&b)
        })
    }

    fn dispatch(&mut self, from: NodeId, to: NodeId, msg: NetMessage) {
        self.sent += 1;
        if self.partitioned(from, to) {
            self.dropped_partition += 1;
            return;
        }
        if let NetMessage::Block(block) = &msg {
            self.register_block(block);
        }
        let delay = self.delay(from, to);
        self.schedule(
            self.now + delay,
            to,
            Payload::Node(NodeEvent::Deliver { from, msg }),
        );
    }

    fn register_block(&mut self, block: &Arc<Block>) {
        self.block_registry
            .entry(block.hash())
            .or_insert((block.number(), block.header().parent_hash));
    }

    fn apply_actions(&mut self, from: NodeId, actions: Vec<NodeAction>) {
        let n = self.nodes.len() as NodeId;
        for action in actions {
            match action {
                NodeAction::Broadcast(msg) => {
                    for to in 0..n {
                        if to != from {
                            self.dispatch(from, to, msg.clone());
                        }
                    }
                }
                NodeAction::Send(to, msg) => self.dispatch(from, to, msg),
                NodeAction::SendMany(targets, msg) => {
                    for to in targets {
                        if to != from {
                            self.dispatch(from, to, msg.clone());
                        }
                    }
                }
                NodeAction::ArmTimer { at, token } => {
                    self.schedule(
                        at.max(self.now),
                        from,
                        Payload::Node(NodeEvent::Timer { token }),
                    );
                }
                NodeAction::Observe(obs) => self.observe(from, obs),
            }
        }
    }

    fn observe(&mut self, node: NodeId, obs: Observation) {
        if let Observation::Finalized { height, hash } = &obs {
            if self.honest[node as usize] {
                match self.finalized_seen.get(height) {
                    Some(existing) if existing != hash => {
                        self.safety_violation = true;
                        self.events.push(SimEvent {
                            at: self.now,
                            node: SIM_NODE,
                            what: Observation::SafetyViolation { height: *height },
                        });
                    }
                    None => {
                        self.finalized_seen.insert(*height, *hash);
                    }
                    _ => {}
                }
            }
        }
        if matches!(obs, Observation::SafetyViolation { .. }) && self.honest[node as usize] {
            self.safety_violation = true;
        }
        self.events.push(SimEvent {
            at: self.now,
            node,
            what: obs,
        });
    }

    fn done(&self) -> bool {
        if self.now >= self.config.time_cap_ms {
            return true;
        }
        match self.config.duration {
            Duration::Blocks(target) => {
                self.nodes[self.config.archival_node as usize]
                    .store()
                    .head_height()
                    >= target
            }
            Duration::Millis(end) => self.now >= end,
        }
    }
}

/// Execute a configuration to completion.
pub fn run(config: &SimConfig) -> Result<RunOutput, ConfigError> {
    config.validate()?;
    let record = genesis_record_for(config);
    let (genesis_block, genesis_state) =
        make_genesis_block(&record).map_err(|_| ConfigError::NoStake)?;
    let genesis_block = Arc::new(genesis_block);
    let n = config.node_count();
    let keys: Vec<ValidatorKeys> = (0..n).map(|id| validator_keys(config, id as NodeId)).collect();
    let all_addresses: Vec<Address> = keys.iter().map(|k| k.address).collect();

    let mut nodes = Vec::with_capacity(n);
    for id in 0..n {
        let behavior = config
            .behaviors
            .get(&(id as NodeId))
            .cloned()
            .unwrap_or(Behavior::Honest);
        let params = NodeParams {
            id: id as NodeId,
            address: keys[id].address,
            cold: keys[id].cold.clone(),
            warm: keys[id].warm.clone(),
            hot: keys[id].hot.clone(),
            behavior,
            params: config.params(),
            processing_ms: config.processing_ms,
            max_block_txs: config.max_block_txs,
            archival: id as NodeId == config.archival_node,
            all_addresses: all_addresses.clone(),
        };
        nodes.push(ValidatorNode::new(
            params,
            genesis_block.clone(),
            genesis_state.clone(),
        ));
    }

    let honest: Vec<bool> = (0..n)
        .map(|id| {
            !config
                .behaviors
                .get(&(id as NodeId))
                .is_some_and(Behavior::is_byzantine)
        })
        .collect();

    let mut engine = Engine {
        nodes,
        queue: BinaryHeap::new(),
        seq: 0,
        now: 0,
        rng: ChaCha12Rng::seed_from_u64(config.rng_seed),
        events: Vec::new(),
        block_registry: BTreeMap::new(),
        finalized_seen: BTreeMap::new(),
        safety_violation: false,
        sent: 0,
        delivered: 0,
        dropped_partition: 0,
        honest,
        config: config.clone(),
    };
    engine.register_block(&genesis_block);

    // Initial timers, announce schedule, partitions and scripted txs.
    for id in 0..n as NodeId {
        let actions = engine.nodes[id as usize].start(0);
        engine.apply_actions(id, actions);
        engine.schedule(
            config.announce_ms,
            id,
            Payload::Node(NodeEvent::AnnounceTick),
        );
    }
    for w in &config.partitions {
        engine.schedule(w.start_ms, SIM_NODE, Payload::PartitionMark(true));
        engine.schedule(w.end_ms, SIM_NODE, Payload::PartitionMark(false));
    }
    for (i, scripted) in config.txs.iter().enumerate() {
        if let Some(tx) = build_scripted_tx(&keys, &scripted.kind, i as u64) {
            engine.events.push(SimEvent {
                at: scripted.at_ms,
                node: SIM_NODE,
                what: Observation::TxInjected { tx: tx.hash() },
            });
            for id in 0..n as NodeId {
                engine.schedule(
                    scripted.at_ms,
                    id,
                    Payload::Node(NodeEvent::InjectTx(tx.clone())),
                );
            }
        }
    }

    // Main loop.
    while let Some(Reverse(next)) = engine.queue.pop() {
        engine.now = next.at;
        if engine.done() {
            engine.queue.push(Reverse(next));
            break;
        }
        match next.payload {
            Payload::Node(event) => {
                let target = next.target;
                if target == SIM_NODE {
                    continue;
                }
                if matches!(event, NodeEvent::AnnounceTick) {
                    engine.schedule(
                        engine.now + engine.config.announce_ms,
                        target,
                        Payload::Node(NodeEvent::AnnounceTick),
                    );
                }
                if matches!(event, NodeEvent::Deliver { .. }) {
                    engine.delivered += 1;
                }
                let actions = engine.nodes[target as usize].handle(engine.now, event);
                engine.apply_actions(target, actions);
            }
            Payload::PartitionMark(start) => {
                let what = if start {
                    Observation::PartitionStart
                } else {
                    Observation::PartitionEnd
                };
                engine.events.push(SimEvent {
                    at: engine.now,
                    node: SIM_NODE,
                    what,
                });
            }
        }
    }

    // Everything still queued counts as undelivered.
    let pending = engine
        .queue
        .iter()
        .filter(|Reverse(s)| matches!(s.payload, Payload::Node(NodeEvent::Deliver { .. })))
        .count() as u64;

    let trace = assemble_trace(&engine, &all_addresses, pending);
    let export = build_export(&engine, &record);
    Ok(RunOutput { trace, export })
}

fn assemble_trace(engine: &Engine, addresses: &[Address], pending: u64) -> SimTrace {
    let config = &engine.config;
    let archival = &engine.nodes[config.archival_node as usize];
    let store = archival.store();
    let params = config.params();

    // Canonical chain summary.
    let mut canonical = Vec::new();
    let mut canonical_hashes = BTreeSet::new();
    let head_height = store.head_height();
    for height in 0..=head_height {
        let Some(stored) = store.canonical_block(height) else {
            continue;
        };
        canonical_hashes.insert(stored.hash);
        let first_owner_slot = if height == 0 {
            0
        } else {
            match store.canonical_block(height - 1) {
                Some(parent) => select_slot_owners(parent.block.seed(), params.slots).owner_at(0),
                None => 0,
            }
        };
        let producer_slot = stored
            .block
            .as_micro()
            .map(|m| m.justification.producer_slot);
        canonical.push(CanonicalBlock {
            height,
            view: stored.block.view(),
            is_macro: stored.block.is_macro(),
            producer_slot,
            first_owner_slot,
            timestamp: stored.block.timestamp(),
            hash: stored.hash,
        });
    }

    // Epoch rosters from the archival node's macro states.
    let addr_to_node: BTreeMap<Address, u32> = addresses
        .iter()
        .enumerate()
        .map(|(id, a)| (*a, id as u32))
        .collect();
    let mut epochs = Vec::new();
    for c in canonical.iter().filter(|c| c.is_macro) {
        if let Some(state) = store.state_of(&c.hash) {
            let roster = EpochRoster {
                epoch: state.ctx.epoch,
                slot_nodes: state
                    .ctx
                    .list
                    .slots
                    .iter()
                    .map(|a| addr_to_node.get(a).copied().unwrap_or(u32::MAX))
                    .collect(),
            };
            epochs.push(roster);
        }
    }

    // Fork statistics over every block seen on the wire.
    let mut by_height: BTreeMap<BlockNumber, Vec<Hash32>> = BTreeMap::new();
    for (hash, (height, _)) in &engine.block_registry {
        by_height.entry(*height).or_default().push(*hash);
    }
    let fork_heights = by_height.values().filter(|v| v.len() > 1).count() as u64;
    let non_canonical: BTreeSet<Hash32> = engine
        .block_registry
        .keys()
        .filter(|h| !canonical_hashes.contains(*h))
        .copied()
        .collect();
    let has_nc_child: BTreeSet<Hash32> = engine
        .block_registry
        .iter()
        .filter(|(h, _)| non_canonical.contains(*h))
        .map(|(_, (_, parent))| *parent)
        .collect();
    let mut fork_length_histogram: BTreeMap<u32, u64> = BTreeMap::new();
    for hash in &non_canonical {
        if has_nc_child.contains(hash) {
            continue; // not a branch tip
        }
        let mut len = 0u32;
        let mut cursor = *hash;
        while non_canonical.contains(&cursor) {
            len += 1;
            cursor = engine.block_registry[&cursor].1;
        }
        *fork_length_histogram.entry(len).or_insert(0) += 1;
    }

    let mut revert_depth_histogram: BTreeMap<u32, u64> = BTreeMap::new();
    for e in &engine.events {
        if let Observation::Reorg { depth, .. } = &e.what {
            if e.node != SIM_NODE && engine.honest[e.node as usize] {
                *revert_depth_histogram.entry(*depth as u32).or_insert(0) += 1;
            }
        }
    }

    let canonical_micro_blocks = canonical.iter().filter(|c| !c.is_macro).count() as u64;
    let heights_with_view_change = canonical.iter().filter(|c| c.view > 0).count() as u64;
    let total_view_skips = canonical.iter().map(|c| c.view as u64).sum();
    let finalized_macros = canonical
        .iter()
        .filter(|c| c.is_macro && c.height > 0)
        .count() as u64;
    let blocks_produced = engine
        .events
        .iter()
        .filter(|e| matches!(e.what, Observation::Produced { .. }))
        .count() as u64;

    let final_heads: Vec<(u32, BlockNumber, alloc::string::String)> = engine
        .nodes
        .iter()
        .map(|node| {
            (
                node.id(),
                node.store().head_height(),
                node.store().head().short(),
            )
        })
        .collect();

    // Honest nodes agree if their chains match at the lowest honest head
    // height; above that only in-flight blocks can differ.
    let honest_nodes: Vec<&crate::consensus::ValidatorNode> = engine
        .nodes
        .iter()
        .filter(|n| engine.honest[n.id() as usize])
        .collect();
    let honest_heads_agree = match honest_nodes
        .iter()
        .map(|n| n.store().head_height())
        .min()
    {
        None => true,
        Some(min_height) => {
            let hashes: BTreeSet<Option<Hash32>> = honest_nodes
                .iter()
                .map(|n| n.store().canonical_hash(min_height))
                .collect();
            hashes.len() == 1 && !hashes.contains(&None)
        }
    };

    let metrics = Metrics {
        sim_time_ms: engine.now,
        blocks_produced,
        canonical_blocks: canonical.len() as u64,
        canonical_micro_blocks,
        finalized_macros,
        heights_with_view_change,
        total_view_skips,
        fork_heights,
        fork_length_histogram,
        revert_depth_histogram,
        messages_sent: engine.sent,
        messages_delivered: engine.delivered,
        messages_dropped_partition: engine.dropped_partition,
        messages_pending_at_end: pending,
        safety_violation: engine.safety_violation,
        honest_heads_agree,
        final_heads,
    };

    let mut events = engine.events.clone();
    // Stable by time; emission order within a tick is already stable.
    events.sort_by_key(|e| e.at);
    SimTrace {
        events,
        canonical,
        epochs,
        metrics,
    }
}

fn build_export(engine: &Engine, record: &GenesisRecord) -> Vec<u8> {
    let store = engine.nodes[engine.config.archival_node as usize].store();
    let mut builder = ExportBuilder::new(record);
    let head_height = store.head_height();
    let mut last_macro_height = 0;
    for height in 1..=head_height {
        if let Some(stored) = store.canonical_block(height) {
            builder.push_block(&stored.block);
            if stored.block.is_macro() {
                last_macro_height = height;
            }
        }
    }
    let last_macro_hash = store
        .canonical_hash(last_macro_height)
        .unwrap_or(store.genesis_hash());
    if let Some(state) = store.state_of(&last_macro_hash) {
        builder.push_state(last_macro_height, &state.encoded());
    }
    builder.finish()
}

impl core::fmt::Debug for ValidatorKeys {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "ValidatorKeys({})", self.address.to_hex())
    }
}
