//! Deterministic discrete-event network simulator.
//!
//! A run is a pure function of its [`SimConfig`]: the virtual clock, the
//! seeded delay sampling, event ordering and every node decision replay
//! bit-identically. Gossip is modeled as a flood to all peers with a
//! sampled per-message delay; partitions drop messages crossing group
//! boundaries during their window.

pub mod engine;
pub mod trace;

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::chain::export::Params;
use crate::chain::{Address, Amount, BlockNumber};
use crate::consensus::{Behavior, NodeId};
use crate::crypto::Backend;

pub use engine::run;
pub use trace::{Metrics, ParsedTrace, SimEvent, SimTrace};

/// Per-message delay model, in simulated milliseconds.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum DelayModel {
    Constant(u64),
    /// Uniformly sampled from [lo, hi].
    Uniform { lo: u64, hi: u64 },
    /// Explicit per-link delays; missing links fall back to `default`.
    PerLink {
        default: u64,
        links: BTreeMap<(NodeId, NodeId), u64>,
    },
}

/// When a run stops.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Duration {
    /// Stop once any honest node's head reaches this height.
    Blocks(BlockNumber),
    Millis(u64),
}

/// A network split: during [start_ms, end_ms) messages between `group_a`
/// and its complement are dropped.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PartitionWindow {
    pub start_ms: u64,
    pub end_ms: u64,
    pub group_a: Vec<NodeId>,
}

/// A transaction scripted into the run, handed to every node's mempool at
/// `at_ms`. Validators are referred to by node id; the engine signs with
/// that node's keys.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ScriptedTx {
    pub at_ms: u64,
    pub kind: TxSpec,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum TxSpec {
    Transfer {
        from: NodeId,
        to: NodeId,
        amount: Amount,
        fee: Amount,
    },
    /// Register node `validator` with this deposit (it must have liquid
    /// funds and no registry entry).
    Stake {
        validator: NodeId,
        amount: Amount,
        reward_address: Option<NodeId>,
    },
    Unstake {
        validator: NodeId,
    },
    Restake {
        validator: NodeId,
        new_amount: Option<Amount>,
        rotate_hot_key: bool,
        new_reward_address: Option<NodeId>,
    },
    Reactivate {
        validator: NodeId,
    },
}

/// One validator's funding at genesis. A zero deposit means the node runs
/// but starts unregistered (it can stake later).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ValidatorSpec {
    pub deposit: Amount,
    pub liquid: Amount,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SimConfig {
    pub rng_seed: u64,
    pub backend: Backend,
    pub validators: Vec<ValidatorSpec>,
    /// Validator list length n = 3f + 1.
    pub slots: u32,
    /// Micro blocks per epoch (m).
    pub epoch_length: u32,
    /// Base view-change timeout (delta), simulated ms.
    pub timeout_ms: u64,
    pub delay: DelayModel,
    /// Simulated block construction cost.
    pub processing_ms: u64,
    /// Interval between head announcements (stall recovery).
    pub announce_ms: u64,
    pub coinbase: Amount,
    pub max_block_txs: usize,
    pub duration: Duration,
    /// Hard stop even if the block target was not reached.
    pub time_cap_ms: u64,
    pub behaviors: BTreeMap<NodeId, Behavior>,
    pub partitions: Vec<PartitionWindow>,
    pub txs: Vec<ScriptedTx>,
    /// The node that retains all blocks and states and provides the chain
    /// export.
    pub archival_node: NodeId,
}

impl SimConfig {
    /// All-honest baseline over `n` equally staked validators.
    pub fn honest(n: u32, rng_seed: u64) -> SimConfig {
        SimConfig {
            rng_seed,
            backend: Backend::Mock,
            validators: alloc::vec![
                ValidatorSpec {
                    deposit: 1000,
                    liquid: 1000,
                };
                n as usize
            ],
            slots: n,
            epoch_length: 10,
            timeout_ms: 1000,
            delay: DelayModel::Constant(100),
            processing_ms: 10,
            announce_ms: 1000,
            coinbase: 10,
            max_block_txs: 200,
            duration: Duration::Blocks(50),
            time_cap_ms: 24 * 3600 * 1000,
            behaviors: BTreeMap::new(),
            partitions: Vec::new(),
            txs: Vec::new(),
            archival_node: 0,
        }
    }

    pub fn params(&self) -> Params {
        Params {
            backend: self.backend,
            slots: self.slots,
            epoch_length: self.epoch_length,
            timeout_ms: self.timeout_ms,
            coinbase: self.coinbase,
        }
    }

    pub fn node_count(&self) -> usize {
        self.validators.len()
    }

    /// Install a behavior on one validator.
    pub fn assign_behavior(
        mut self,
        validator: NodeId,
        behavior: Behavior,
    ) -> Result<SimConfig, ConfigError> {
        if validator as usize >= self.validators.len() {
            return Err(ConfigError::UnknownValidator(validator));
        }
        self.behaviors.insert(validator, behavior);
        Ok(self)
    }

    /// Add a partition window. Windows touching the same node must not
    /// overlap.
    pub fn inject_partition(
        mut self,
        start_ms: u64,
        end_ms: u64,
        group_a: Vec<NodeId>,
    ) -> Result<SimConfig, ConfigError> {
        let window = PartitionWindow {
            start_ms,
            end_ms,
            group_a,
        };
        let candidate = {
            let mut partitions = self.partitions.clone();
            partitions.push(window.clone());
            partitions
        };
        validate_partitions(&candidate, self.node_count())?;
        self.partitions.push(window);
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params().validate().map_err(ConfigError::Params)?;
        if self.validators.is_empty() {
            return Err(ConfigError::NoValidators);
        }
        if self.validators.iter().all(|v| v.deposit == 0) {
            return Err(ConfigError::NoStake);
        }
        for id in self.behaviors.keys() {
            if *id as usize >= self.validators.len() {
                return Err(ConfigError::UnknownValidator(*id));
            }
        }
        if let Some(Behavior::VcWithholder { coalition, .. }) = self
            .behaviors
            .values()
            .find(|b| matches!(b, Behavior::VcWithholder { .. }))
        {
            for id in coalition {
                if *id as usize >= self.validators.len() {
                    return Err(ConfigError::UnknownValidator(*id));
                }
            }
        }
        if self.archival_node as usize >= self.validators.len() {
            return Err(ConfigError::UnknownValidator(self.archival_node));
        }
        if self.announce_ms == 0 || self.processing_ms > self.timeout_ms {
            return Err(ConfigError::BadTiming);
        }
        validate_partitions(&self.partitions, self.node_count())?;
        Ok(())
    }
}

fn validate_partitions(
    partitions: &[PartitionWindow],
    node_count: usize,
) -> Result<(), ConfigError> {
    for w in partitions {
        if w.start_ms >= w.end_ms {
            return Err(ConfigError::BadPartitionWindow);
        }
        if w.group_a.is_empty() || w.group_a.len() >= node_count {
            return Err(ConfigError::BadPartitionGroup);
        }
        for id in &w.group_a {
            if *id as usize >= node_count {
                return Err(ConfigError::UnknownValidator(*id));
            }
        }
    }
    for (i, a) in partitions.iter().enumerate() {
        for b in partitions.iter().skip(i + 1) {
            let disjoint_time = a.end_ms <= b.start_ms || b.end_ms <= a.start_ms;
            if !disjoint_time {
                return Err(ConfigError::OverlappingPartitions);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ConfigError {
    Params(&'static str),
    NoValidators,
    NoStake,
    UnknownValidator(NodeId),
    BadTiming,
    BadPartitionWindow,
    BadPartitionGroup,
    /// Two partition windows overlap in time.
    OverlappingPartitions,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Params(what) => write!(f, "{what}"),
            ConfigError::NoValidators => write!(f, "no validators configured"),
            ConfigError::NoStake => write!(f, "no stake at genesis"),
            ConfigError::UnknownValidator(id) => write!(f, "unknown validator {id}"),
            ConfigError::BadTiming => write!(f, "invalid timing parameters"),
            ConfigError::BadPartitionWindow => write!(f, "invalid partition window"),
            ConfigError::BadPartitionGroup => write!(f, "partition group must be a proper subset"),
            ConfigError::OverlappingPartitions => write!(f, "overlapping partition windows"),
        }
    }
}

/// Deterministic per-validator key material and genesis construction live
/// with the engine; re-exported here for tests and the CLI.
pub use engine::{genesis_record_for, validator_keys, ValidatorKeys};

/// Convenience: map a node id to the validator address the engine will
/// derive for it.
pub fn validator_address(config: &SimConfig, id: NodeId) -> Address {
    validator_keys(config, id).address
}
