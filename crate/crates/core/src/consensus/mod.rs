//! The per-validator protocol state machine, its block store and the
//! validation rules shared with chain synchronization.
//!
//! A node is a single-threaded event handler: the network simulator (or any
//! other driver) delivers one event at a time and collects the actions the
//! node wants performed. Nothing here reads clocks or sockets; time is the
//! `now` argument.

pub mod chainstore;
pub mod node;
pub mod validate;

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::chain::{
    Block, BlockNumber, ForkProof, MacroBlock, SlotIndex, Transaction, ViewChangeMessage,
};
use crate::crypto::Signature;
use crate::hash::Hash32;

pub use chainstore::{ChainOrdering, ChainStore, CompareError, Reorg};
pub use node::{Behavior, NodeParams, ValidatorNode};
pub use validate::{make_genesis_block, RejectReason, ValidatedBlock};

pub type NodeId = u32;

/// A single PBFT vote (prepare or commit) on a macro proposal.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PbftVote {
    pub height: BlockNumber,
    pub proposal: Hash32,
    pub slot: SlotIndex,
    pub signature: Signature,
}

/// Everything nodes say to each other.
#[derive(Clone, Debug)]
pub enum NetMessage {
    Block(Arc<Block>),
    ViewChange(ViewChangeMessage),
    /// Macro block candidate from the PBFT leader, not yet justified.
    Proposal(Arc<MacroBlock>),
    Prepare(PbftVote),
    Commit(PbftVote),
    ForkProofGossip(ForkProof),
    /// Periodic head advertisement; drives resynchronization.
    Announce { height: BlockNumber, head: Hash32 },
    BlockRequest { from_height: BlockNumber },
    BlockResponse { blocks: Vec<Arc<Block>> },
}

impl NetMessage {
    /// Short label for traces and diagnostics.
    pub fn label(&self) -> &'static str {
        match self {
            NetMessage::Block(_) => "block",
            NetMessage::ViewChange(_) => "view-change",
            NetMessage::Proposal(_) => "proposal",
            NetMessage::Prepare(_) => "prepare",
            NetMessage::Commit(_) => "commit",
            NetMessage::ForkProofGossip(_) => "fork-proof",
            NetMessage::Announce { .. } => "announce",
            NetMessage::BlockRequest { .. } => "block-request",
            NetMessage::BlockResponse { .. } => "block-response",
        }
    }
}

/// Inputs a node reacts to.
#[derive(Clone, Debug)]
pub enum NodeEvent {
    Deliver { from: NodeId, msg: NetMessage },
    Timer { token: u64 },
    /// Periodic local tick for announcements and stall recovery.
    AnnounceTick,
    /// A client handed the node a transaction.
    InjectTx(Transaction),
}

/// Outputs a node requests from its driver.
#[derive(Clone, Debug)]
pub enum NodeAction {
    Broadcast(NetMessage),
    Send(NodeId, NetMessage),
    SendMany(Vec<NodeId>, NetMessage),
    ArmTimer { at: u64, token: u64 },
    Observe(crate::simnet::trace::Observation),
}
