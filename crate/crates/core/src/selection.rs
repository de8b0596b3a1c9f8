//! Stake-weighted validator sampling and per-block slot-owner ordering.
//!
//! Both algorithms draw `hash(S || i) mod t` style values from the seed
//! chain. The reduction is deliberately the naive modulo; its bias is
//! bounded by `t / 2^256` and stays far below anything the statistical
//! acceptance tests can detect for the token totals used here.

use alloc::vec::Vec;
use core::fmt;

use crate::chain::{Address, Amount, SlotIndex};
use crate::crypto::{seed_entropy, Seed};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SelectionError {
    /// No validator with positive stake to sample from.
    NoEligibleValidators,
}

impl fmt::Display for SelectionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionError::NoEligibleValidators => write!(f, "no eligible validators"),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct StakeRangeEntry {
    pub validator: Address,
    pub deposit: Amount,
    /// Inclusive token range [lo, hi] owned by this validator.
    pub lo: Amount,
    pub hi: Amount,
}

/// Deposits of all eligible validators, ordered by address and mapped onto
/// contiguous token ranges starting at zero.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct StakeRangeTable {
    entries: Vec<StakeRangeEntry>,
    total: Amount,
}

impl StakeRangeTable {
    pub fn entries(&self) -> &[StakeRangeEntry] {
        &self.entries
    }

    pub fn total(&self) -> Amount {
        self.total
    }

    /// The validator whose range contains `r`. Requires `r < total`.
    pub fn locate(&self, r: Amount) -> &StakeRangeEntry {
        let idx = self
            .entries
            .partition_point(|e| e.hi < r);
        &self.entries[idx]
    }
}

/// Order eligible validators by address and assign each the token range
/// matching its deposit. Zero-deposit entries are skipped.
pub fn build_range_table(
    stakes: impl IntoIterator<Item = (Address, Amount)>,
) -> Result<StakeRangeTable, SelectionError> {
    let mut stakes: Vec<(Address, Amount)> =
        stakes.into_iter().filter(|(_, d)| *d > 0).collect();
    if stakes.is_empty() {
        return Err(SelectionError::NoEligibleValidators);
    }
    stakes.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    let mut entries = Vec::with_capacity(stakes.len());
    let mut next = 0u64;
    for (validator, deposit) in stakes {
        entries.push(StakeRangeEntry {
            validator,
            deposit,
            lo: next,
            hi: next + deposit - 1,
        });
        next += deposit;
    }
    Ok(StakeRangeTable {
        entries,
        total: next,
    })
}

/// The active validators of an epoch, one address per slot. A validator
/// holding multiple slots appears once per slot.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ValidatorList {
    pub slots: Vec<Address>,
}

impl ValidatorList {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Fill `n` slots by repeatedly drawing a token index from the seed and
/// taking the validator whose range contains it (sampling with
/// replacement).
pub fn select_validator_list(seed: &Seed, table: &StakeRangeTable, n: u32) -> ValidatorList {
    let mut slots = Vec::with_capacity(n as usize);
    for i in 0..n as u64 {
        let r = seed_entropy(seed, i).mod_u64(table.total());
        slots.push(table.locate(r).validator);
    }
    ValidatorList { slots }
}

/// Random ordering of the slot indices `0..n`: the owner schedule for one
/// block height. Entry `v` is the slot expected to produce at view `v`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SlotOwnerList {
    pub order: Vec<SlotIndex>,
}

impl SlotOwnerList {
    /// Owner for a view; views beyond the list wrap around.
    pub fn owner_at(&self, view: u32) -> SlotIndex {
        self.order[view as usize % self.order.len()]
    }
}

/// Draw slots without replacement: pick index `hash(S || i) mod remaining`
/// among the not-yet-chosen slots, append, repeat.
pub fn select_slot_owners(seed: &Seed, n: u32) -> SlotOwnerList {
    let mut remaining: Vec<SlotIndex> = (0..n).collect();
    let mut order = Vec::with_capacity(n as usize);
    let mut counter = 0u64;
    while !remaining.is_empty() {
        let r = seed_entropy(seed, counter).mod_u64(remaining.len() as u64) as usize;
        order.push(remaining.remove(r));
        counter += 1;
    }
    SlotOwnerList { order }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Backend, Seed};
    use alloc::vec;

    fn addr(i: u8) -> Address {
        Address([i; 20])
    }

    fn seed(tag: u8) -> Seed {
        Seed::genesis(Backend::Mock, &[tag; 32])
    }

    #[test]
    fn range_table_matches_worked_example() {
        // Deposits 10, 50, 15 map to [0,9], [10,59], [60,74].
        let table =
            build_range_table(vec![(addr(1), 10), (addr(2), 50), (addr(3), 15)]).unwrap();
        let ranges: Vec<(u64, u64)> = table.entries().iter().map(|e| (e.lo, e.hi)).collect();
        assert_eq!(ranges, vec![(0, 9), (10, 59), (60, 74)]);
        assert_eq!(table.total(), 75);
        assert_eq!(table.locate(0).validator, addr(1));
        assert_eq!(table.locate(9).validator, addr(1));
        assert_eq!(table.locate(10).validator, addr(2));
        assert_eq!(table.locate(74).validator, addr(3));
    }

    #[test]
    fn range_table_single_validator() {
        let table = build_range_table(vec![(addr(7), 7)]).unwrap();
        assert_eq!(table.entries().len(), 1);
        assert_eq!((table.entries()[0].lo, table.entries()[0].hi), (0, 6));
    }

    #[test]
    fn range_table_is_input_order_independent() {
        let stakes = vec![(addr(3), 15), (addr(1), 10), (addr(2), 50)];
        let mut permuted = stakes.clone();
        permuted.rotate_left(1);
        assert_eq!(
            build_range_table(stakes).unwrap(),
            build_range_table(permuted).unwrap()
        );
    }

    #[test]
    fn empty_or_zero_stake_is_an_error() {
        assert_eq!(
            build_range_table(Vec::new()).unwrap_err(),
            SelectionError::NoEligibleValidators
        );
        assert_eq!(
            build_range_table(vec![(addr(1), 0)]).unwrap_err(),
            SelectionError::NoEligibleValidators
        );
    }

    #[test]
    fn list_selection_is_deterministic() {
        let table =
            build_range_table(vec![(addr(1), 10), (addr(2), 50), (addr(3), 15)]).unwrap();
        let a = select_validator_list(&seed(1), &table, 100);
        let b = select_validator_list(&seed(1), &table, 100);
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
    }

    #[test]
    fn single_validator_owns_every_slot() {
        let table = build_range_table(vec![(addr(9), 3)]).unwrap();
        let list = select_validator_list(&seed(2), &table, 16);
        assert!(list.slots.iter().all(|a| *a == addr(9)));
    }

    #[test]
    fn slot_owner_list_is_a_permutation() {
        for tag in 0..32u8 {
            let owners = select_slot_owners(&seed(tag), 13);
            let mut sorted = owners.order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..13).collect::<Vec<_>>());
        }
        assert_eq!(select_slot_owners(&seed(0), 1).order, vec![0]);
    }

    #[test]
    fn owner_at_wraps_past_the_list() {
        let owners = select_slot_owners(&seed(3), 4);
        assert_eq!(owners.owner_at(0), owners.order[0]);
        assert_eq!(owners.owner_at(5), owners.order[1]);
    }
}
