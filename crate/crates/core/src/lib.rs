//! Core protocol and simulation library for a speculative-BFT proof-of-stake
//! consensus design: an optimistic single-producer fast path for micro blocks,
//! a PBFT-finalized macro block closing every epoch, stake-weighted committee
//! sampling driven by a VRF seed chain, and evidence-based punishment.
//!
//! The crate is `no_std` (with `alloc`) and performs no IO. Everything here is
//! a pure function of its inputs: the discrete-event simulator in [`simnet`]
//! replays bit-identically from a configuration, and the sync routines in
//! [`sync`] verify exported chains from byte slices. File handling, the CLI
//! and the scenario format live in the companion `specbft-cli` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod bitmap;
pub mod chain;
pub mod consensus;
pub mod crypto;
pub mod encoding;
pub mod hash;
pub mod merkle;
pub mod selection;
pub mod simnet;
pub mod staking;
pub mod state;
pub mod sync;

pub use chain::{Address, Amount, BlockNumber, EpochNumber, SlotIndex, ViewNumber};
pub use hash::Hash32;
