//! Validator registry state machine: stake/restake/unstake/reactivate
//! transitions, reward accrual, delayed distribution and punishment
//! settlement.
//!
//! Rewards accrue per epoch into a pot and are paid out one epoch late, per
//! slot: each of the n list entries of epoch `e-1` earns `pot / n` at the
//! macro block closing epoch `e`. Slots slashed by then forfeit their share
//! (burned, never redistributed). Slashed validators leave the registry at
//! the same macro with their deposit returned; validators that merely missed
//! a slot can avert expulsion by proving availability before it.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;

use crate::chain::{Address, Amount, EpochNumber, SlotIndex};
use crate::crypto::{self, PublicKey};
use crate::encoding::{CodecError, Decode, Encode, Reader};
use crate::selection::ValidatorList;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ValidatorStatus {
    Active,
    /// Exit requested during `exit_epoch`; still serving until its end, the
    /// deposit is released at the macro block closing `exit_epoch + 1`.
    PendingUnstake { exit_epoch: EpochNumber },
    /// Skipped a slot; expelled at the macro block closing `deadline_epoch`
    /// unless a reactivation proof arrives first.
    MarkedForExpulsion { deadline_epoch: EpochNumber },
}

impl Encode for ValidatorStatus {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            ValidatorStatus::Active => out.push(0),
            ValidatorStatus::PendingUnstake { exit_epoch } => {
                out.push(1);
                exit_epoch.encode_into(out);
            }
            ValidatorStatus::MarkedForExpulsion { deadline_epoch } => {
                out.push(2);
                deadline_epoch.encode_into(out);
            }
        }
    }
}

impl Decode for ValidatorStatus {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            0 => Ok(ValidatorStatus::Active),
            1 => Ok(ValidatorStatus::PendingUnstake {
                exit_epoch: u64::decode_from(r)?,
            }),
            2 => Ok(ValidatorStatus::MarkedForExpulsion {
                deadline_epoch: u64::decode_from(r)?,
            }),
            t => Err(CodecError::BadTag(t)),
        }
    }
}

/// On-chain record of one potential validator. The main address doubles as
/// the cold-key identity, so only the warm and hot keys are stored.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RegistryEntry {
    pub main_address: Address,
    pub deposit: Amount,
    pub warm_key: PublicKey,
    pub hot_key: PublicKey,
    pub reward_address: Option<Address>,
    pub status: ValidatorStatus,
}

impl Encode for RegistryEntry {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.main_address.encode_into(out);
        self.deposit.encode_into(out);
        self.warm_key.encode_into(out);
        self.hot_key.encode_into(out);
        self.reward_address.encode_into(out);
        self.status.encode_into(out);
    }
}

impl Decode for RegistryEntry {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(RegistryEntry {
            main_address: Address::decode_from(r)?,
            deposit: u64::decode_from(r)?,
            warm_key: PublicKey::decode_from(r)?,
            hot_key: PublicKey::decode_from(r)?,
            reward_address: Option::decode_from(r)?,
            status: ValidatorStatus::decode_from(r)?,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StakingError {
    /// Proof of possession for a hot key failed.
    RogueKey,
    /// Address already registered.
    DuplicateAddress,
    InsufficientBalance,
    UnknownValidator,
    /// Restake signature did not match the registered warm key.
    WrongWarmKey,
    AlreadyPendingUnstake,
    /// Reactivation from a validator that is not marked for expulsion.
    NotMarked,
    /// Restaking the deposit to zero; exit goes through unstaking.
    ZeroDeposit,
    /// `settle_epoch` invoked twice for the same macro block.
    DoubleSettlement,
}

impl fmt::Display for StakingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            StakingError::RogueKey => "rogue key",
            StakingError::DuplicateAddress => "address already registered",
            StakingError::InsufficientBalance => "insufficient balance",
            StakingError::UnknownValidator => "unknown validator",
            StakingError::WrongWarmKey => "wrong warm key",
            StakingError::AlreadyPendingUnstake => "already pending unstake",
            StakingError::NotMarked => "validator not marked for expulsion",
            StakingError::ZeroDeposit => "deposit would drop to zero",
            StakingError::DoubleSettlement => "epoch already settled",
        };
        write!(f, "{msg}")
    }
}

/// Liquid account balances.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Accounts {
    balances: BTreeMap<Address, Amount>,
}

impl Accounts {
    pub fn balance(&self, addr: &Address) -> Amount {
        self.balances.get(addr).copied().unwrap_or(0)
    }

    pub fn credit(&mut self, addr: Address, amount: Amount) {
        if amount > 0 {
            *self.balances.entry(addr).or_insert(0) += amount;
        }
    }

    pub fn debit(&mut self, addr: &Address, amount: Amount) -> Result<(), StakingError> {
        let balance = self
            .balances
            .get_mut(addr)
            .ok_or(StakingError::InsufficientBalance)?;
        if *balance < amount {
            return Err(StakingError::InsufficientBalance);
        }
        *balance -= amount;
        if *balance == 0 {
            self.balances.remove(addr);
        }
        Ok(())
    }

    pub fn total(&self) -> Amount {
        self.balances.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Address, &Amount)> {
        self.balances.iter()
    }
}

impl Encode for Accounts {
    fn encode_into(&self, out: &mut Vec<u8>) {
        (self.balances.len() as u32).encode_into(out);
        for (addr, amount) in &self.balances {
            addr.encode_into(out);
            amount.encode_into(out);
        }
    }
}

impl Decode for Accounts {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n = r.list_len()?;
        let mut balances = BTreeMap::new();
        for _ in 0..n {
            balances.insert(Address::decode_from(r)?, u64::decode_from(r)?);
        }
        Ok(Accounts { balances })
    }
}

/// The registry of potential validators.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Registry {
    entries: BTreeMap<Address, RegistryEntry>,
}

impl Registry {
    pub fn get(&self, addr: &Address) -> Option<&RegistryEntry> {
        self.entries.get(addr)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    pub fn insert(&mut self, entry: RegistryEntry) {
        self.entries.insert(entry.main_address, entry);
    }

    /// Stakes eligible for the next epoch's sampling: everything except
    /// entries already on their way out.
    pub fn sampling_stakes(&self) -> impl Iterator<Item = (Address, Amount)> + '_ {
        self.entries.values().filter_map(|e| match e.status {
            ValidatorStatus::PendingUnstake { .. } => None,
            _ => Some((e.main_address, e.deposit)),
        })
    }

    pub fn total_locked(&self) -> Amount {
        self.entries.values().map(|e| e.deposit).sum()
    }
}

impl Encode for Registry {
    fn encode_into(&self, out: &mut Vec<u8>) {
        (self.entries.len() as u32).encode_into(out);
        for entry in self.entries.values() {
            entry.encode_into(out);
        }
    }
}

impl Decode for Registry {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n = r.list_len()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let entry = RegistryEntry::decode_from(r)?;
            entries.insert(entry.main_address, entry);
        }
        Ok(Registry { entries })
    }
}

/// Lock the deposit and add a registry entry. The funds and the fee must
/// already be liquid; the possession proof guards the hot key.
pub fn apply_stake(
    registry: &mut Registry,
    accounts: &mut Accounts,
    tx: &crate::chain::StakeTx,
) -> Result<(), StakingError> {
    if !crypto::verify_proof_of_possession(&tx.hot_key, &tx.possession) {
        return Err(StakingError::RogueKey);
    }
    if registry.entries.contains_key(&tx.main_address) {
        return Err(StakingError::DuplicateAddress);
    }
    if tx.amount == 0 {
        return Err(StakingError::ZeroDeposit);
    }
    accounts.debit(&tx.main_address, tx.amount)?;
    registry.insert(RegistryEntry {
        main_address: tx.main_address,
        deposit: tx.amount,
        warm_key: tx.warm_key,
        hot_key: tx.hot_key,
        reward_address: tx.reward_address,
        status: ValidatorStatus::Active,
    });
    Ok(())
}

/// Update the blank-able registry fields. The caller has already checked
/// the warm-key signature against the stored entry.
pub fn apply_restake(
    registry: &mut Registry,
    accounts: &mut Accounts,
    tx: &crate::chain::RestakeTx,
) -> Result<(), StakingError> {
    if let Some((hot_key, possession)) = &tx.new_hot_key {
        if !crypto::verify_proof_of_possession(hot_key, possession) {
            return Err(StakingError::RogueKey);
        }
    }
    // Validate the deposit delta before mutating anything.
    let entry = registry
        .entries
        .get(&tx.main_address)
        .ok_or(StakingError::UnknownValidator)?;
    if let Some(new_amount) = tx.new_amount {
        if new_amount == 0 {
            return Err(StakingError::ZeroDeposit);
        }
        if new_amount > entry.deposit {
            let addr = tx.main_address;
            accounts.debit(&addr, new_amount - entry.deposit)?;
        }
    }
    let entry = registry.entries.get_mut(&tx.main_address).unwrap();
    if let Some(new_amount) = tx.new_amount {
        if new_amount < entry.deposit {
            accounts.credit(tx.main_address, entry.deposit - new_amount);
        }
        entry.deposit = new_amount;
    }
    if let Some((hot_key, _)) = &tx.new_hot_key {
        entry.hot_key = *hot_key;
    }
    if let Some(reward) = tx.new_reward_address {
        entry.reward_address = Some(reward);
    }
    Ok(())
}

/// Mark the entry as exiting. It keeps serving until the end of the current
/// epoch and the deposit is only released at the macro closing the epoch
/// after that.
pub fn apply_unstake(
    registry: &mut Registry,
    tx: &crate::chain::UnstakeTx,
    current_epoch: EpochNumber,
) -> Result<(), StakingError> {
    let entry = registry
        .entries
        .get_mut(&tx.main_address)
        .ok_or(StakingError::UnknownValidator)?;
    if matches!(entry.status, ValidatorStatus::PendingUnstake { .. }) {
        return Err(StakingError::AlreadyPendingUnstake);
    }
    entry.status = ValidatorStatus::PendingUnstake {
        exit_epoch: current_epoch,
    };
    Ok(())
}

/// Availability proof from a marked validator: clears the expulsion mark
/// and installs the (possibly fresh) hot key.
pub fn apply_reactivate(
    registry: &mut Registry,
    tx: &crate::chain::ReactivateTx,
) -> Result<(), StakingError> {
    if !crypto::verify_proof_of_possession(&tx.hot_key, &tx.possession) {
        return Err(StakingError::RogueKey);
    }
    let entry = registry
        .entries
        .get_mut(&tx.main_address)
        .ok_or(StakingError::UnknownValidator)?;
    if !matches!(entry.status, ValidatorStatus::MarkedForExpulsion { .. }) {
        return Err(StakingError::NotMarked);
    }
    entry.hot_key = tx.hot_key;
    entry.status = ValidatorStatus::Active;
    Ok(())
}

/// Per-epoch reward and punishment bookkeeping.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct EpochLedger {
    /// Accrued coinbase plus fees, per epoch, awaiting distribution.
    pots: BTreeMap<EpochNumber, Amount>,
    /// Slots whose epoch reward share is forfeited.
    slashed: BTreeMap<EpochNumber, BTreeSet<SlotIndex>>,
    /// Validators that skipped a slot, with their expulsion deadline.
    delayed: BTreeMap<Address, EpochNumber>,
    /// Validators caught equivocating, by offense epoch. Expulsion is
    /// unconditional for these.
    forkers: BTreeMap<EpochNumber, BTreeSet<Address>>,
    settled: BTreeSet<EpochNumber>,
}

impl EpochLedger {
    pub fn accrue(&mut self, epoch: EpochNumber, amount: Amount) {
        if amount > 0 {
            *self.pots.entry(epoch).or_insert(0) += amount;
        }
    }

    pub fn pot(&self, epoch: EpochNumber) -> Amount {
        self.pots.get(&epoch).copied().unwrap_or(0)
    }

    pub fn pending_pots(&self) -> Amount {
        self.pots.values().sum()
    }

    pub fn slash_slot(&mut self, epoch: EpochNumber, slot: SlotIndex) {
        self.slashed.entry(epoch).or_default().insert(slot);
    }

    pub fn slashed_slots(&self, epoch: EpochNumber) -> impl Iterator<Item = SlotIndex> + '_ {
        self.slashed.get(&epoch).into_iter().flatten().copied()
    }

    pub fn is_slot_slashed(&self, epoch: EpochNumber, slot: SlotIndex) -> bool {
        self.slashed
            .get(&epoch)
            .is_some_and(|slots| slots.contains(&slot))
    }

    pub fn mark_delayed(&mut self, addr: Address, deadline_epoch: EpochNumber) {
        // Keep the earliest deadline if marked more than once.
        let deadline = self
            .delayed
            .get(&addr)
            .copied()
            .map_or(deadline_epoch, |d| d.min(deadline_epoch));
        self.delayed.insert(addr, deadline);
    }

    pub fn clear_delayed(&mut self, addr: &Address) {
        self.delayed.remove(addr);
    }

    pub fn is_delayed(&self, addr: &Address) -> bool {
        self.delayed.contains_key(addr)
    }

    pub fn record_forker(&mut self, epoch: EpochNumber, addr: Address) {
        self.forkers.entry(epoch).or_default().insert(addr);
    }

    pub fn is_settled(&self, epoch: EpochNumber) -> bool {
        self.settled.contains(&epoch)
    }
}

impl Encode for EpochLedger {
    fn encode_into(&self, out: &mut Vec<u8>) {
        (self.pots.len() as u32).encode_into(out);
        for (epoch, amount) in &self.pots {
            epoch.encode_into(out);
            amount.encode_into(out);
        }
        (self.slashed.len() as u32).encode_into(out);
        for (epoch, slots) in &self.slashed {
            epoch.encode_into(out);
            (slots.len() as u32).encode_into(out);
            for slot in slots {
                slot.encode_into(out);
            }
        }
        (self.delayed.len() as u32).encode_into(out);
        for (addr, deadline) in &self.delayed {
            addr.encode_into(out);
            deadline.encode_into(out);
        }
        (self.forkers.len() as u32).encode_into(out);
        for (epoch, addrs) in &self.forkers {
            epoch.encode_into(out);
            (addrs.len() as u32).encode_into(out);
            for addr in addrs {
                addr.encode_into(out);
            }
        }
        (self.settled.len() as u32).encode_into(out);
        for epoch in &self.settled {
            epoch.encode_into(out);
        }
    }
}

impl Decode for EpochLedger {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let mut ledger = EpochLedger::default();
        for _ in 0..r.list_len()? {
            let epoch = u64::decode_from(r)?;
            ledger.pots.insert(epoch, u64::decode_from(r)?);
        }
        for _ in 0..r.list_len()? {
            let epoch = u64::decode_from(r)?;
            let mut slots = BTreeSet::new();
            for _ in 0..r.list_len()? {
                slots.insert(u32::decode_from(r)?);
            }
            ledger.slashed.insert(epoch, slots);
        }
        for _ in 0..r.list_len()? {
            let addr = Address::decode_from(r)?;
            ledger.delayed.insert(addr, u64::decode_from(r)?);
        }
        for _ in 0..r.list_len()? {
            let epoch = u64::decode_from(r)?;
            let mut addrs = BTreeSet::new();
            for _ in 0..r.list_len()? {
                addrs.insert(Address::decode_from(r)?);
            }
            ledger.forkers.insert(epoch, addrs);
        }
        for _ in 0..r.list_len()? {
            ledger.settled.insert(u64::decode_from(r)?);
        }
        Ok(ledger)
    }
}

/// What a settlement moved: paid shares, burned tokens, expelled validators
/// (deposits returned) and released unstake deposits.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct SettlementOutcome {
    pub distributions: Vec<(Address, Amount)>,
    pub burned: Amount,
    pub expelled: Vec<Address>,
    pub refunded: Vec<(Address, Amount)>,
}

/// Settle the macro block closing `closing_epoch`: distribute the previous
/// epoch's pot over its slots, burn slashed shares, expel punished
/// validators (returning deposits), and release matured unstakes.
/// `previous_list` is the validator list of `closing_epoch - 1`.
pub fn settle_epoch(
    ledger: &mut EpochLedger,
    registry: &mut Registry,
    accounts: &mut Accounts,
    closing_epoch: EpochNumber,
    previous_list: Option<&ValidatorList>,
) -> Result<SettlementOutcome, StakingError> {
    if !ledger.settled.insert(closing_epoch) {
        return Err(StakingError::DoubleSettlement);
    }
    let mut outcome = SettlementOutcome::default();
    let reward_epoch = closing_epoch.wrapping_sub(1);

    if closing_epoch >= 1 {
        if let Some(list) = previous_list {
            let pot = ledger.pots.remove(&reward_epoch).unwrap_or(0);
            let n = list.len() as u64;
            let share = pot / n;
            outcome.burned += pot % n;
            let slashed = ledger.slashed.remove(&reward_epoch).unwrap_or_default();
            for (slot, owner) in list.slots.iter().enumerate() {
                if slashed.contains(&(slot as SlotIndex)) {
                    outcome.burned += share;
                    continue;
                }
                if share == 0 {
                    continue;
                }
                match registry.entries.get_mut(owner) {
                    Some(entry) => match entry.reward_address {
                        Some(reward_addr) => {
                            accounts.credit(reward_addr, share);
                            outcome.distributions.push((reward_addr, share));
                        }
                        None => {
                            entry.deposit += share;
                            outcome.distributions.push((*owner, share));
                        }
                    },
                    // Entry already gone; pay the share out liquid rather
                    // than losing track of it.
                    None => {
                        accounts.credit(*owner, share);
                        outcome.distributions.push((*owner, share));
                    }
                }
            }
        }

        // Expulsions for offenses during the previous epoch.
        let mut to_expel: BTreeSet<Address> =
            ledger.forkers.remove(&reward_epoch).unwrap_or_default();
        let overdue: Vec<Address> = ledger
            .delayed
            .iter()
            .filter(|(_, &deadline)| deadline <= closing_epoch)
            .map(|(addr, _)| *addr)
            .collect();
        for addr in overdue {
            ledger.delayed.remove(&addr);
            to_expel.insert(addr);
        }
        for addr in to_expel {
            if let Some(entry) = registry.entries.remove(&addr) {
                accounts.credit(addr, entry.deposit);
                outcome.expelled.push(addr);
            }
        }

        // Matured unstakes: requested during the previous epoch.
        let released: Vec<Address> = registry
            .entries
            .values()
            .filter(|e| {
                matches!(e.status, ValidatorStatus::PendingUnstake { exit_epoch }
                    if exit_epoch <= reward_epoch)
            })
            .map(|e| e.main_address)
            .collect();
        for addr in released {
            let entry = registry.entries.remove(&addr).unwrap();
            accounts.credit(addr, entry.deposit);
            outcome.refunded.push((addr, entry.deposit));
        }
    }

    Ok(outcome)
}

/// Render the registry in the snapshot text format: one line per entry,
/// `address deposit warm-key hot-key reward-address-or-dash status`.
pub fn format_registry(registry: &Registry) -> String {
    let mut out = String::new();
    for entry in registry.iter() {
        let reward = entry
            .reward_address
            .map_or_else(|| String::from("-"), |a| a.to_hex());
        let status = match entry.status {
            ValidatorStatus::Active => String::from("active"),
            ValidatorStatus::PendingUnstake { exit_epoch } => {
                let mut s = String::from("pending-unstake:");
                let _ = write!(s, "{exit_epoch}");
                s
            }
            ValidatorStatus::MarkedForExpulsion { deadline_epoch } => {
                let mut s = String::from("marked:");
                let _ = write!(s, "{deadline_epoch}");
                s
            }
        };
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            entry.main_address.to_hex(),
            entry.deposit,
            entry.warm_key.to_hex(),
            entry.hot_key.to_hex(),
            reward,
            status,
        );
    }
    out
}

/// Parse the registry snapshot text format produced by [`format_registry`].
pub fn parse_registry(text: &str) -> Option<Registry> {
    let mut registry = Registry::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let main_address = Address::from_hex(fields.next()?)?;
        let deposit: Amount = fields.next()?.parse().ok()?;
        let warm_key = PublicKey::decode_all(&hex::decode(fields.next()?).ok()?).ok()?;
        let hot_key = PublicKey::decode_all(&hex::decode(fields.next()?).ok()?).ok()?;
        let reward_address = match fields.next()? {
            "-" => None,
            hex_addr => Some(Address::from_hex(hex_addr)?),
        };
        let status_field = fields.next()?;
        let status = if status_field == "active" {
            ValidatorStatus::Active
        } else if let Some(epoch) = status_field.strip_prefix("pending-unstake:") {
            ValidatorStatus::PendingUnstake {
                exit_epoch: epoch.parse().ok()?,
            }
        } else if let Some(epoch) = status_field.strip_prefix("marked:") {
            ValidatorStatus::MarkedForExpulsion {
                deadline_epoch: epoch.parse().ok()?,
            }
        } else {
            return None;
        };
        registry.insert(RegistryEntry {
            main_address,
            deposit,
            warm_key,
            hot_key,
            reward_address,
            status,
        });
    }
    Some(registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{ReactivateTx, RestakeTx, StakeTx, UnstakeTx};
    use crate::crypto::{keygen, sign, sign_proof_of_possession, Backend, SecretKey, Signature};
    use alloc::vec;

    struct Keys {
        cold: SecretKey,
        warm: SecretKey,
        hot: SecretKey,
        address: Address,
    }

    fn keys(tag: u8) -> Keys {
        let (cold, cold_pk) = keygen(Backend::Mock, &[tag; 32]);
        let (warm, _) = keygen(Backend::Mock, &[tag | 0x40; 32]);
        let (hot, _) = keygen(Backend::Mock, &[tag | 0x80; 32]);
        Keys {
            address: Address::from_public_key(&cold_pk),
            cold,
            warm,
            hot,
        }
    }

    fn dummy_sig(sk: &SecretKey) -> Signature {
        sign(sk, b"placeholder")
    }

    fn stake_tx(k: &Keys, amount: Amount) -> StakeTx {
        StakeTx {
            main_address: k.address,
            amount,
            warm_key: k.warm.public(),
            hot_key: k.hot.public(),
            possession: sign_proof_of_possession(&k.hot),
            reward_address: None,
            fee: 0,
            nonce: 0,
            cold_key: k.cold.public(),
            signature: dummy_sig(&k.cold),
        }
    }

    #[test]
    fn stake_locks_funds_and_registers() {
        let k = keys(1);
        let mut registry = Registry::default();
        let mut accounts = Accounts::default();
        accounts.credit(k.address, 100);

        apply_stake(&mut registry, &mut accounts, &stake_tx(&k, 60)).unwrap();
        assert_eq!(accounts.balance(&k.address), 40);
        assert_eq!(registry.get(&k.address).unwrap().deposit, 60);

        // Same address cannot register twice.
        assert_eq!(
            apply_stake(&mut registry, &mut accounts, &stake_tx(&k, 10)),
            Err(StakingError::DuplicateAddress)
        );
    }

    #[test]
    fn stake_with_wrong_possession_proof_is_a_rogue_key() {
        let k = keys(2);
        let other = keys(3);
        let mut tx = stake_tx(&k, 10);
        tx.possession = sign_proof_of_possession(&other.hot);
        let mut registry = Registry::default();
        let mut accounts = Accounts::default();
        accounts.credit(k.address, 100);
        assert_eq!(
            apply_stake(&mut registry, &mut accounts, &tx),
            Err(StakingError::RogueKey)
        );
    }

    #[test]
    fn stake_requires_balance() {
        let k = keys(4);
        let mut registry = Registry::default();
        let mut accounts = Accounts::default();
        accounts.credit(k.address, 5);
        assert_eq!(
            apply_stake(&mut registry, &mut accounts, &stake_tx(&k, 10)),
            Err(StakingError::InsufficientBalance)
        );
    }

    fn staked_setup(tag: u8, deposit: Amount, liquid: Amount) -> (Keys, Registry, Accounts) {
        let k = keys(tag);
        let mut registry = Registry::default();
        let mut accounts = Accounts::default();
        accounts.credit(k.address, deposit + liquid);
        apply_stake(&mut registry, &mut accounts, &stake_tx(&k, deposit)).unwrap();
        (k, registry, accounts)
    }

    #[test]
    fn restake_updates_only_non_blank_fields() {
        let (k, mut registry, mut accounts) = staked_setup(5, 50, 50);
        let before = registry.get(&k.address).unwrap().clone();

        // Blank everything: a no-op.
        let noop = RestakeTx {
            main_address: k.address,
            new_amount: None,
            new_hot_key: None,
            new_reward_address: None,
            fee: 0,
            nonce: 1,
            signature: dummy_sig(&k.warm),
        };
        apply_restake(&mut registry, &mut accounts, &noop).unwrap();
        assert_eq!(registry.get(&k.address).unwrap(), &before);

        // Only the reward address changes.
        let reward_only = RestakeTx {
            new_reward_address: Some(Address([7; 20])),
            nonce: 2,
            ..noop.clone()
        };
        apply_restake(&mut registry, &mut accounts, &reward_only).unwrap();
        let after = registry.get(&k.address).unwrap();
        assert_eq!(after.reward_address, Some(Address([7; 20])));
        assert_eq!(after.deposit, before.deposit);
        assert_eq!(after.hot_key, before.hot_key);
    }

    #[test]
    fn restake_adjusts_locked_funds_by_the_delta() {
        let (k, mut registry, mut accounts) = staked_setup(6, 50, 50);
        let total = accounts.total() + registry.total_locked();

        let raise = RestakeTx {
            main_address: k.address,
            new_amount: Some(80),
            new_hot_key: None,
            new_reward_address: None,
            fee: 0,
            nonce: 1,
            signature: dummy_sig(&k.warm),
        };
        apply_restake(&mut registry, &mut accounts, &raise).unwrap();
        assert_eq!(registry.get(&k.address).unwrap().deposit, 80);
        assert_eq!(accounts.balance(&k.address), 20);
        assert_eq!(accounts.total() + registry.total_locked(), total);

        let lower = RestakeTx {
            new_amount: Some(30),
            nonce: 2,
            ..raise
        };
        apply_restake(&mut registry, &mut accounts, &lower).unwrap();
        assert_eq!(registry.get(&k.address).unwrap().deposit, 30);
        assert_eq!(accounts.balance(&k.address), 70);
        assert_eq!(accounts.total() + registry.total_locked(), total);
    }

    fn unstake_tx(k: &Keys) -> UnstakeTx {
        UnstakeTx {
            main_address: k.address,
            fee: 0,
            nonce: 3,
            cold_key: k.cold.public(),
            signature: dummy_sig(&k.cold),
        }
    }

    #[test]
    fn unstake_release_waits_one_full_epoch() {
        let (k, mut registry, mut accounts) = staked_setup(7, 50, 0);
        apply_unstake(&mut registry, &unstake_tx(&k), 3).unwrap();
        assert!(matches!(
            registry.get(&k.address).unwrap().status,
            ValidatorStatus::PendingUnstake { exit_epoch: 3 }
        ));
        // Second unstake is rejected.
        assert_eq!(
            apply_unstake(&mut registry, &unstake_tx(&k), 3),
            Err(StakingError::AlreadyPendingUnstake)
        );
        // Still eligible? No: a pending entry is excluded from sampling.
        assert_eq!(registry.sampling_stakes().count(), 0);

        // Settlement at the macro closing epoch 3 does not release yet...
        let mut ledger = EpochLedger::default();
        let list = ValidatorList {
            slots: vec![k.address],
        };
        settle_epoch(&mut ledger, &mut registry, &mut accounts, 3, Some(&list)).unwrap();
        assert!(registry.get(&k.address).is_some());
        // ...the one closing epoch 4 does.
        let outcome =
            settle_epoch(&mut ledger, &mut registry, &mut accounts, 4, Some(&list)).unwrap();
        assert_eq!(outcome.refunded, vec![(k.address, 50)]);
        assert!(registry.get(&k.address).is_none());
        assert_eq!(accounts.balance(&k.address), 50);
    }

    #[test]
    fn settlement_divides_equally_and_burns_slashed_shares() {
        let k0 = keys(8);
        let k1 = keys(9);
        let mut registry = Registry::default();
        let mut accounts = Accounts::default();
        for k in [&k0, &k1] {
            accounts.credit(k.address, 100);
            apply_stake(&mut registry, &mut accounts, &stake_tx(k, 100)).unwrap();
        }
        let list = ValidatorList {
            slots: vec![k0.address, k1.address, k0.address, k1.address],
        };
        let mut ledger = EpochLedger::default();
        ledger.accrue(1, 103);
        ledger.slash_slot(1, 2);

        let before = accounts.total() + registry.total_locked() + ledger.pending_pots();
        let outcome =
            settle_epoch(&mut ledger, &mut registry, &mut accounts, 2, Some(&list)).unwrap();
        // 103 / 4 = 25 with remainder 3 burned; slot 2's share burned too.
        assert_eq!(outcome.burned, 3 + 25);
        assert_eq!(outcome.distributions.len(), 3);
        // Rewards without a reward address fold into the deposit.
        assert_eq!(registry.get(&k0.address).unwrap().deposit, 125);
        assert_eq!(registry.get(&k1.address).unwrap().deposit, 150);
        let after = accounts.total() + registry.total_locked() + ledger.pending_pots();
        assert_eq!(before, after + outcome.burned);

        // Settling the same macro twice must fail.
        assert_eq!(
            settle_epoch(&mut ledger, &mut registry, &mut accounts, 2, Some(&list)),
            Err(StakingError::DoubleSettlement)
        );
    }

    #[test]
    fn delayed_validator_is_expelled_unless_reactivated() {
        let (k, mut registry, mut accounts) = staked_setup(10, 40, 10);
        let mut ledger = EpochLedger::default();

        // Skipped a slot in epoch 1: deadline is the macro closing epoch 2.
        ledger.mark_delayed(k.address, 2);
        registry.entries.get_mut(&k.address).unwrap().status =
            ValidatorStatus::MarkedForExpulsion { deadline_epoch: 2 };

        // Reactivation before the deadline clears the mark.
        let tx = ReactivateTx {
            main_address: k.address,
            hot_key: k.hot.public(),
            possession: sign_proof_of_possession(&k.hot),
            fee: 0,
            nonce: 9,
            signature: dummy_sig(&k.warm),
        };
        apply_reactivate(&mut registry, &tx).unwrap();
        ledger.clear_delayed(&k.address);

        let list = ValidatorList {
            slots: vec![k.address],
        };
        let outcome =
            settle_epoch(&mut ledger, &mut registry, &mut accounts, 2, Some(&list)).unwrap();
        assert!(outcome.expelled.is_empty());
        assert!(registry.get(&k.address).is_some());

        // Reactivating while not marked is rejected.
        assert_eq!(
            apply_reactivate(&mut registry, &tx),
            Err(StakingError::NotMarked)
        );

        // A marked validator that never reactivates is expelled with the
        // deposit returned.
        ledger.mark_delayed(k.address, 3);
        let outcome =
            settle_epoch(&mut ledger, &mut registry, &mut accounts, 3, Some(&list)).unwrap();
        assert_eq!(outcome.expelled, vec![k.address]);
        assert!(registry.get(&k.address).is_none());
        assert_eq!(accounts.balance(&k.address), 50);
    }

    #[test]
    fn registry_text_format_round_trips() {
        let (_, registry, _) = staked_setup(12, 30, 0);
        let text = format_registry(&registry);
        let parsed = parse_registry(&text).unwrap();
        assert_eq!(parsed, registry);
        assert!(parse_registry("not a registry").is_none());
    }
}
