//! Full chain state: balances, registry, reward ledger and the epoch
//! context, with transaction execution and a Merkle commitment over all of
//! it. Blocks commit to the root; light clients query single entries with
//! inclusion proofs.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

use crate::chain::export::GenesisRecord;
use crate::chain::{
    Address, Amount, BlockNumber, EpochNumber, SlotIndex, Transaction, ViewNumber,
};
use crate::chain::export::Params;
use crate::crypto::{self, PublicKey, Seed};
use crate::encoding::{encode_bytes, CodecError, Decode, Encode, Reader};
use crate::hash::{sha256, Hash32};
use crate::merkle::{self, MerkleProof};
use crate::selection::{self, SelectionError, ValidatorList};
use crate::staking::{
    self, Accounts, EpochLedger, Registry, RegistryEntry, SettlementOutcome, StakingError,
    ValidatorStatus,
};

/// Why a transaction was refused during execution.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TxError {
    /// Already included on this chain.
    Replay,
    BadSignature,
    /// The carried public key does not hash to the claimed address.
    AddressKeyMismatch,
    /// Internal transactions are producer-inserted, never gossiped.
    Internal,
    Staking(StakingError),
}

impl fmt::Display for TxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TxError::Replay => write!(f, "transaction replay"),
            TxError::BadSignature => write!(f, "bad transaction signature"),
            TxError::AddressKeyMismatch => write!(f, "address does not match key"),
            TxError::Internal => write!(f, "internal transaction not accepted"),
            TxError::Staking(e) => write!(f, "{e}"),
        }
    }
}

impl From<StakingError> for TxError {
    fn from(e: StakingError) -> Self {
        TxError::Staking(e)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StateError {
    Selection(SelectionError),
    Staking(StakingError),
    /// A genesis validator entry failed validation.
    BadGenesis(&'static str),
    /// A slot points at a validator missing from the registry.
    MissingRegistryEntry,
}

impl fmt::Display for StateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateError::Selection(e) => write!(f, "{e}"),
            StateError::Staking(e) => write!(f, "{e}"),
            StateError::BadGenesis(what) => write!(f, "bad genesis: {what}"),
            StateError::MissingRegistryEntry => write!(f, "slot owner missing from registry"),
        }
    }
}

impl From<SelectionError> for StateError {
    fn from(e: SelectionError) -> Self {
        StateError::Selection(e)
    }
}

impl From<StakingError> for StateError {
    fn from(e: StakingError) -> Self {
        StateError::Staking(e)
    }
}

/// The active epoch: its validator list, the hot keys snapshotted when the
/// list was sampled, and the slots barred from producing for its remainder.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EpochContext {
    pub epoch: EpochNumber,
    pub list: ValidatorList,
    pub slot_keys: Vec<PublicKey>,
    pub barred: BTreeSet<SlotIndex>,
}

impl EpochContext {
    pub fn slot_owner(&self, slot: SlotIndex) -> Address {
        self.list.slots[slot as usize]
    }

    pub fn slot_key(&self, slot: SlotIndex) -> &PublicKey {
        &self.slot_keys[slot as usize]
    }

    pub fn is_barred(&self, slot: SlotIndex) -> bool {
        self.barred.contains(&slot)
    }
}

impl Encode for EpochContext {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.epoch.encode_into(out);
        (self.list.slots.len() as u32).encode_into(out);
        for addr in &self.list.slots {
            addr.encode_into(out);
        }
        self.slot_keys.encode_into(out);
        (self.barred.len() as u32).encode_into(out);
        for slot in &self.barred {
            slot.encode_into(out);
        }
    }
}

impl Decode for EpochContext {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let epoch = u64::decode_from(r)?;
        let n = r.list_len()?;
        let mut slots = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            slots.push(Address::decode_from(r)?);
        }
        let slot_keys = Vec::decode_from(r)?;
        let mut barred = BTreeSet::new();
        for _ in 0..r.list_len()? {
            barred.insert(u32::decode_from(r)?);
        }
        Ok(EpochContext {
            epoch,
            list: ValidatorList { slots },
            slot_keys,
            barred,
        })
    }
}

/// An equivocation established by a verified fork proof, resolved to the
/// offending slot and its validator by the chain layer.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ForkFact {
    pub offense_epoch: EpochNumber,
    pub slot: SlotIndex,
    pub validator: Address,
}

/// Everything a micro block does to the state, with chain-derived facts
/// (skipped slots, resolved fork proofs) already extracted.
pub struct MicroEffects<'a> {
    pub height: BlockNumber,
    pub transactions: &'a [Transaction],
    /// Slots skipped by embedded view-change quorums at this height.
    pub skipped_slots: &'a [SlotIndex],
    pub fork_facts: &'a [ForkFact],
}

/// Result of applying a macro block: the settlement moves and the next
/// epoch's sampled list.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MacroOutcome {
    pub settlement: SettlementOutcome,
    pub next_list: ValidatorList,
    pub next_slot_keys: Vec<PublicKey>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ChainState {
    pub params: Params,
    /// Height of the last applied block.
    pub height: BlockNumber,
    pub accounts: Accounts,
    pub registry: Registry,
    pub ledger: EpochLedger,
    pub ctx: EpochContext,
    /// Validator list of the previous epoch, kept for delayed settlement
    /// and for resolving last-epoch fork proofs.
    pub prev_list: Option<ValidatorList>,
    /// Hot keys snapshotted for the previous epoch's slots.
    pub prev_slot_keys: Option<Vec<PublicKey>>,
    pub included_txs: BTreeSet<Hash32>,
    pub minted: Amount,
    pub burned: Amount,
    pub initial_supply: Amount,
}

impl ChainState {
    /// Build the state implied by a genesis record, including the first
    /// epoch's validator list sampled from the genesis seed.
    pub fn genesis(record: &GenesisRecord) -> Result<ChainState, StateError> {
        record
            .params
            .validate()
            .map_err(StateError::BadGenesis)?;
        let mut accounts = Accounts::default();
        for (addr, balance) in &record.accounts {
            accounts.credit(*addr, *balance);
        }
        let mut registry = Registry::default();
        for v in &record.validators {
            if v.deposit == 0 {
                return Err(StateError::BadGenesis("zero genesis deposit"));
            }
            if !crypto::verify_proof_of_possession(&v.hot_key, &v.possession) {
                return Err(StateError::BadGenesis("rogue genesis hot key"));
            }
            if registry.get(&v.address).is_some() {
                return Err(StateError::BadGenesis("duplicate genesis validator"));
            }
            registry.insert(RegistryEntry {
                main_address: v.address,
                deposit: v.deposit,
                warm_key: v.warm_key,
                hot_key: v.hot_key,
                reward_address: v.reward_address,
                status: ValidatorStatus::Active,
            });
        }
        let initial_supply = accounts.total() + registry.total_locked();
        let (list, slot_keys) =
            sample_next_epoch(&registry, &record.genesis_seed(), record.params.slots)?;
        Ok(ChainState {
            params: record.params,
            height: 0,
            accounts,
            registry,
            ledger: EpochLedger::default(),
            ctx: EpochContext {
                epoch: 1,
                list,
                slot_keys,
                barred: BTreeSet::new(),
            },
            prev_list: None,
            prev_slot_keys: None,
            included_txs: BTreeSet::new(),
            minted: 0,
            burned: 0,
            initial_supply,
        })
    }

    /// Slot hot keys for an epoch this state still remembers: the running
    /// epoch or the one before it.
    pub fn keys_for_epoch(&self, epoch: EpochNumber) -> Option<&[PublicKey]> {
        if epoch == self.ctx.epoch {
            Some(&self.ctx.slot_keys)
        } else if epoch + 1 == self.ctx.epoch {
            self.prev_slot_keys.as_deref()
        } else {
            None
        }
    }

    /// Slot-to-validator mapping for a remembered epoch.
    pub fn list_for_epoch(&self, epoch: EpochNumber) -> Option<&ValidatorList> {
        if epoch == self.ctx.epoch {
            Some(&self.ctx.list)
        } else if epoch + 1 == self.ctx.epoch {
            self.prev_list.as_ref()
        } else {
            None
        }
    }

    /// Execute one external transaction, charging its fee into the current
    /// epoch's pot. Call order within a block matters and is the block's
    /// transaction order.
    pub fn execute_transaction(&mut self, tx: &Transaction) -> Result<(), TxError> {
        let hash = tx.hash();
        if !tx.is_external() {
            return Err(TxError::Internal);
        }
        if self.included_txs.contains(&hash) {
            return Err(TxError::Replay);
        }
        let signing = tx.signing_bytes();
        match tx {
            Transaction::Transfer(t) => {
                if Address::from_public_key(&t.sender_key) != t.from {
                    return Err(TxError::AddressKeyMismatch);
                }
                if !crypto::verify(&t.sender_key, &signing, &t.signature) {
                    return Err(TxError::BadSignature);
                }
                self.accounts
                    .debit(&t.from, t.amount + t.fee)
                    .map_err(TxError::Staking)?;
                self.accounts.credit(t.to, t.amount);
                self.take_fee(t.fee);
            }
            Transaction::Stake(t) => {
                if Address::from_public_key(&t.cold_key) != t.main_address {
                    return Err(TxError::AddressKeyMismatch);
                }
                if !crypto::verify(&t.cold_key, &signing, &t.signature) {
                    return Err(TxError::BadSignature);
                }
                self.accounts
                    .debit(&t.main_address, t.fee)
                    .map_err(TxError::Staking)?;
                if let Err(e) = staking::apply_stake(&mut self.registry, &mut self.accounts, t) {
                    // Refund the fee taken above; the transaction failed whole.
                    self.accounts.credit(t.main_address, t.fee);
                    return Err(e.into());
                }
                self.take_fee(t.fee);
            }
            Transaction::Restake(t) => {
                let warm_key = self
                    .registry
                    .get(&t.main_address)
                    .ok_or(TxError::Staking(StakingError::UnknownValidator))?
                    .warm_key;
                if !crypto::verify(&warm_key, &signing, &t.signature) {
                    return Err(TxError::BadSignature);
                }
                self.accounts
                    .debit(&t.main_address, t.fee)
                    .map_err(TxError::Staking)?;
                if let Err(e) = staking::apply_restake(&mut self.registry, &mut self.accounts, t) {
                    self.accounts.credit(t.main_address, t.fee);
                    return Err(e.into());
                }
                self.take_fee(t.fee);
            }
            Transaction::Unstake(t) => {
                if Address::from_public_key(&t.cold_key) != t.main_address {
                    return Err(TxError::AddressKeyMismatch);
                }
                if !crypto::verify(&t.cold_key, &signing, &t.signature) {
                    return Err(TxError::BadSignature);
                }
                self.accounts
                    .debit(&t.main_address, t.fee)
                    .map_err(TxError::Staking)?;
                if let Err(e) = staking::apply_unstake(&mut self.registry, t, self.ctx.epoch) {
                    self.accounts.credit(t.main_address, t.fee);
                    return Err(e.into());
                }
                self.take_fee(t.fee);
            }
            Transaction::Reactivate(t) => {
                let warm_key = self
                    .registry
                    .get(&t.main_address)
                    .ok_or(TxError::Staking(StakingError::UnknownValidator))?
                    .warm_key;
                if !crypto::verify(&warm_key, &signing, &t.signature) {
                    return Err(TxError::BadSignature);
                }
                self.accounts
                    .debit(&t.main_address, t.fee)
                    .map_err(TxError::Staking)?;
                if let Err(e) = staking::apply_reactivate(&mut self.registry, t) {
                    self.accounts.credit(t.main_address, t.fee);
                    return Err(e.into());
                }
                self.ledger.clear_delayed(&t.main_address);
                self.take_fee(t.fee);
            }
            Transaction::Timestamp(_) => unreachable!("internal handled above"),
        }
        self.included_txs.insert(hash);
        Ok(())
    }

    fn take_fee(&mut self, fee: Amount) {
        self.ledger.accrue(self.ctx.epoch, fee);
    }

    /// Record an equivocation: the slot forfeits its epoch reward, its
    /// validator is queued for expulsion, and if the offense is in the
    /// running epoch the slot is barred from producing for its remainder.
    pub fn record_fork_fact(&mut self, fact: &ForkFact) {
        self.ledger.slash_slot(fact.offense_epoch, fact.slot);
        self.ledger.record_forker(fact.offense_epoch, fact.validator);
        if fact.offense_epoch == self.ctx.epoch {
            self.ctx.barred.insert(fact.slot);
        }
    }

    /// Record a completed view change skipping `slot` at the current
    /// height: reward slashed, barred for the epoch, marked for expulsion
    /// unless the validator proves availability by the end of next epoch.
    pub fn record_skipped_slot(&mut self, slot: SlotIndex) {
        self.ledger.slash_slot(self.ctx.epoch, slot);
        self.ctx.barred.insert(slot);
        let owner = self.ctx.slot_owner(slot);
        self.ledger.mark_delayed(owner, self.ctx.epoch + 1);
        if let Some(entry) = self.registry.get(&owner) {
            // Do not downgrade an exit in progress.
            if matches!(entry.status, ValidatorStatus::Active) {
                let mut updated = entry.clone();
                updated.status = ValidatorStatus::MarkedForExpulsion {
                    deadline_epoch: self.ctx.epoch + 1,
                };
                self.registry.insert(updated);
            }
        }
    }

    /// Apply a micro block's effects. The caller has already validated the
    /// block; failures here void the whole block.
    pub fn apply_micro(&mut self, fx: &MicroEffects<'_>) -> Result<(), TxError> {
        for fact in fx.fork_facts {
            self.record_fork_fact(fact);
        }
        for &slot in fx.skipped_slots {
            self.record_skipped_slot(slot);
        }
        for tx in fx.transactions {
            self.execute_transaction(tx)?;
        }
        self.mint_coinbase();
        self.height = fx.height;
        debug_assert!(self.conservation_holds());
        Ok(())
    }

    /// Apply a macro block at `height` with the given seed: settle the
    /// previous epoch, rotate the epoch context, and sample the next list.
    pub fn apply_macro(
        &mut self,
        height: BlockNumber,
        seed: &Seed,
        skipped_slots: &[SlotIndex],
    ) -> Result<MacroOutcome, StateError> {
        for &slot in skipped_slots {
            self.record_skipped_slot(slot);
        }
        self.mint_coinbase();
        let closing_epoch = self.ctx.epoch;
        let settlement = staking::settle_epoch(
            &mut self.ledger,
            &mut self.registry,
            &mut self.accounts,
            closing_epoch,
            self.prev_list.as_ref(),
        )?;
        self.burned += settlement.burned;
        let (next_list, next_slot_keys) =
            sample_next_epoch(&self.registry, seed, self.params.slots)?;
        self.prev_list = Some(core::mem::replace(
            &mut self.ctx.list,
            next_list.clone(),
        ));
        self.prev_slot_keys = Some(core::mem::replace(
            &mut self.ctx.slot_keys,
            next_slot_keys.clone(),
        ));
        self.ctx.epoch = closing_epoch + 1;
        self.ctx.barred.clear();
        self.height = height;
        debug_assert!(self.conservation_holds());
        Ok(MacroOutcome {
            settlement,
            next_list,
            next_slot_keys,
        })
    }

    fn mint_coinbase(&mut self) {
        self.minted += self.params.coinbase;
        self.ledger.accrue(self.ctx.epoch, self.params.coinbase);
    }

    /// Token conservation: everything tracked plus everything burned equals
    /// the initial supply plus everything minted.
    pub fn conservation_holds(&self) -> bool {
        self.accounts.total() + self.registry.total_locked() + self.ledger.pending_pots()
            + self.burned
            == self.initial_supply + self.minted
    }

    fn leaves(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        let mut leaves: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
        for (addr, balance) in self.accounts.iter() {
            let mut key = b"acct/".to_vec();
            key.extend_from_slice(addr.to_hex().as_bytes());
            leaves.push((key, balance.encoded()));
        }
        for entry in self.registry.iter() {
            let mut key = b"reg/".to_vec();
            key.extend_from_slice(entry.main_address.to_hex().as_bytes());
            leaves.push((key, entry.encoded()));
        }
        leaves.push((b"ctx".to_vec(), self.ctx.encoded()));
        let mut prev = Vec::new();
        encode_prev(&self.prev_list, &self.prev_slot_keys, &mut prev);
        leaves.push((b"prev".to_vec(), prev));
        leaves.push((b"ledger".to_vec(), self.ledger.encoded()));
        let mut meta = Vec::new();
        self.height.encode_into(&mut meta);
        self.minted.encode_into(&mut meta);
        self.burned.encode_into(&mut meta);
        self.initial_supply.encode_into(&mut meta);
        leaves.push((b"meta".to_vec(), meta));
        let mut txs = Vec::new();
        for tx in &self.included_txs {
            tx.encode_into(&mut txs);
        }
        leaves.push((b"txs".to_vec(), sha256(&txs).encoded()));
        leaves.sort_by(|a, b| a.0.cmp(&b.0));
        leaves
    }

    fn leaf_items(leaves: &[(Vec<u8>, Vec<u8>)]) -> Vec<Vec<u8>> {
        leaves
            .iter()
            .map(|(k, v)| {
                let mut item = Vec::with_capacity(k.len() + v.len() + 8);
                encode_bytes(k, &mut item);
                encode_bytes(v, &mut item);
                item
            })
            .collect()
    }

    /// Merkle commitment over the whole state.
    pub fn root(&self) -> Hash32 {
        merkle::merkle_root(&Self::leaf_items(&self.leaves()))
    }

    /// Value and inclusion proof for a state key, if present.
    pub fn prove(&self, key: &[u8]) -> Option<(Vec<u8>, MerkleProof)> {
        let leaves = self.leaves();
        let index = leaves.iter().position(|(k, _)| k.as_slice() == key)?;
        let value = leaves[index].1.clone();
        let items = Self::leaf_items(&leaves);
        let proof = merkle::merkle_prove(&items, index)?;
        Some((value, proof))
    }

    /// The state key holding an account balance.
    pub fn account_key(addr: &Address) -> Vec<u8> {
        let mut key = b"acct/".to_vec();
        key.extend_from_slice(addr.to_hex().as_bytes());
        key
    }
}

/// Check a single state entry against a state root.
pub fn verify_state_entry(
    root: &Hash32,
    key: &[u8],
    value: &[u8],
    proof: &MerkleProof,
) -> bool {
    let mut item = Vec::with_capacity(key.len() + value.len() + 8);
    encode_bytes(key, &mut item);
    encode_bytes(value, &mut item);
    merkle::merkle_verify(root, &item, proof)
}

/// Sample the next epoch's list from the registry and snapshot the hot key
/// of every slot.
pub fn sample_next_epoch(
    registry: &Registry,
    seed: &Seed,
    slots: u32,
) -> Result<(ValidatorList, Vec<PublicKey>), StateError> {
    let table = selection::build_range_table(registry.sampling_stakes())?;
    let list = selection::select_validator_list(seed, &table, slots);
    let mut keys = Vec::with_capacity(list.len());
    for addr in &list.slots {
        let entry = registry
            .get(addr)
            .ok_or(StateError::MissingRegistryEntry)?;
        keys.push(entry.hot_key);
    }
    Ok((list, keys))
}

/// Resolve the slot owning `(block_number, view)` from the seed of the
/// parent block. Views past the list length wrap around.
pub fn resolve_slot_owner(parent_seed: &Seed, slots: u32, view: ViewNumber) -> SlotIndex {
    selection::select_slot_owners(parent_seed, slots).owner_at(view)
}

fn encode_prev(
    prev_list: &Option<ValidatorList>,
    prev_slot_keys: &Option<Vec<PublicKey>>,
    out: &mut Vec<u8>,
) {
    match prev_list {
        None => out.push(0),
        Some(list) => {
            out.push(1);
            (list.slots.len() as u32).encode_into(out);
            for addr in &list.slots {
                addr.encode_into(out);
            }
        }
    }
    match prev_slot_keys {
        None => out.push(0),
        Some(keys) => {
            out.push(1);
            keys.encode_into(out);
        }
    }
}

fn decode_prev(
    r: &mut Reader<'_>,
) -> Result<(Option<ValidatorList>, Option<Vec<PublicKey>>), CodecError> {
    let prev_list = match r.u8()? {
        0 => None,
        1 => {
            let n = r.list_len()?;
            let mut slots = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                slots.push(Address::decode_from(r)?);
            }
            Some(ValidatorList { slots })
        }
        t => return Err(CodecError::BadTag(t)),
    };
    let prev_slot_keys = match r.u8()? {
        0 => None,
        1 => Some(Vec::decode_from(r)?),
        t => return Err(CodecError::BadTag(t)),
    };
    Ok((prev_list, prev_slot_keys))
}

impl Encode for ChainState {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.params.encode_into(out);
        self.height.encode_into(out);
        self.accounts.encode_into(out);
        self.registry.encode_into(out);
        self.ledger.encode_into(out);
        self.ctx.encode_into(out);
        encode_prev(&self.prev_list, &self.prev_slot_keys, out);
        (self.included_txs.len() as u32).encode_into(out);
        for tx in &self.included_txs {
            tx.encode_into(out);
        }
        self.minted.encode_into(out);
        self.burned.encode_into(out);
        self.initial_supply.encode_into(out);
    }
}

impl Decode for ChainState {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let params = Params::decode_from(r)?;
        let height = u64::decode_from(r)?;
        let accounts = Accounts::decode_from(r)?;
        let registry = Registry::decode_from(r)?;
        let ledger = EpochLedger::decode_from(r)?;
        let ctx = EpochContext::decode_from(r)?;
        let (prev_list, prev_slot_keys) = decode_prev(r)?;
        let mut included_txs = BTreeSet::new();
        for _ in 0..r.list_len()? {
            included_txs.insert(Hash32::decode_from(r)?);
        }
        Ok(ChainState {
            params,
            height,
            accounts,
            registry,
            ledger,
            ctx,
            prev_list,
            prev_slot_keys,
            included_txs,
            minted: u64::decode_from(r)?,
            burned: u64::decode_from(r)?,
            initial_supply: u64::decode_from(r)?,
        })
    }
}

/// Shared fixtures for in-crate tests.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::chain::export::{GenesisValidator, Params};
    use crate::crypto::{keygen, sign_proof_of_possession, Backend, SecretKey};

    pub(crate) struct TestValidator {
        pub cold: SecretKey,
        pub warm: SecretKey,
        pub hot: SecretKey,
        pub address: Address,
    }

    pub(crate) fn test_validator(tag: u8) -> TestValidator {
        let (cold, cold_pk) = keygen(Backend::Mock, &[tag; 32]);
        let (warm, _) = keygen(Backend::Mock, &[tag | 0x40; 32]);
        let (hot, _) = keygen(Backend::Mock, &[tag | 0x80; 32]);
        TestValidator {
            address: Address::from_public_key(&cold_pk),
            cold,
            warm,
            hot,
        }
    }

    pub(crate) fn test_genesis(
        n_validators: u8,
        liquid: Amount,
    ) -> (GenesisRecord, Vec<TestValidator>) {
        let validators: Vec<TestValidator> = (0..n_validators).map(test_validator).collect();
        let record = GenesisRecord {
            params: Params {
                backend: Backend::Mock,
                slots: 4,
                epoch_length: 3,
                timeout_ms: 1000,
                coinbase: 10,
            },
            seed_tag: [42; 32],
            validators: validators
                .iter()
                .map(|v| GenesisValidator {
                    address: v.address,
                    deposit: 100,
                    cold_key: v.cold.public(),
                    warm_key: v.warm.public(),
                    hot_key: v.hot.public(),
                    possession: sign_proof_of_possession(&v.hot),
                    reward_address: None,
                })
                .collect(),
            accounts: validators.iter().map(|v| (v.address, liquid)).collect(),
        };
        (record, validators)
    }

    pub(crate) fn small_genesis() -> (GenesisRecord, Vec<TestValidator>) {
        test_genesis(4, 50)
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::{test_genesis, TestValidator};
    use super::*;
    use crate::crypto::{sign, Backend};
    use crate::chain::TransferTx;
    use alloc::vec;

    fn transfer(from: &TestValidator, to: Address, amount: Amount, nonce: u64) -> Transaction {
        let mut tx = Transaction::Transfer(TransferTx {
            from: from.address,
            to,
            amount,
            fee: 1,
            nonce,
            sender_key: from.cold.public(),
            signature: sign(&from.cold, b""),
        });
        let signing = tx.signing_bytes();
        if let Transaction::Transfer(t) = &mut tx {
            t.signature = sign(&from.cold, &signing);
        }
        tx
    }

    #[test]
    fn genesis_state_has_first_epoch_list() {
        let (record, _) = test_genesis(4, 50);
        let state = ChainState::genesis(&record).unwrap();
        assert_eq!(state.ctx.epoch, 1);
        assert_eq!(state.ctx.list.len(), 4);
        assert_eq!(state.initial_supply, 4 * 150);
        assert!(state.conservation_holds());
        // Same record, same root.
        assert_eq!(state.root(), ChainState::genesis(&record).unwrap().root());
    }

    #[test]
    fn transfer_moves_funds_and_charges_fee() {
        let (record, vs) = test_genesis(4, 50);
        let mut state = ChainState::genesis(&record).unwrap();
        let tx = transfer(&vs[0], vs[1].address, 20, 0);
        state.execute_transaction(&tx).unwrap();
        assert_eq!(state.accounts.balance(&vs[0].address), 29);
        assert_eq!(state.accounts.balance(&vs[1].address), 70);
        assert_eq!(state.ledger.pot(1), 1);
        assert!(state.conservation_holds());

        // Replays are rejected.
        assert_eq!(state.execute_transaction(&tx), Err(TxError::Replay));

        // Tampered signature is rejected.
        let mut bad = transfer(&vs[0], vs[1].address, 5, 1);
        let bad_signing = bad.signing_bytes();
        if let Transaction::Transfer(t) = &mut bad {
            t.signature = sign(&vs[2].cold, &bad_signing);
        }
        assert_eq!(state.execute_transaction(&bad), Err(TxError::BadSignature));
    }

    #[test]
    fn micro_and_macro_application_conserve_tokens() {
        let (record, vs) = test_genesis(4, 50);
        let mut state = ChainState::genesis(&record).unwrap();
        let txs = vec![transfer(&vs[0], vs[1].address, 5, 0)];
        state
            .apply_micro(&MicroEffects {
                height: 1,
                transactions: &txs,
                skipped_slots: &[],
                fork_facts: &[],
            })
            .unwrap();
        assert_eq!(state.minted, 10);
        assert_eq!(state.ledger.pot(1), 11);

        for h in 2..=3 {
            state
                .apply_micro(&MicroEffects {
                    height: h,
                    transactions: &[],
                    skipped_slots: &[],
                    fork_facts: &[],
                })
                .unwrap();
        }
        let outcome = state
            .apply_macro(4, &crate::crypto::Seed::genesis(Backend::Mock, &[1; 32]), &[])
            .unwrap();
        assert_eq!(state.ctx.epoch, 2);
        assert_eq!(outcome.next_list.len(), 4);
        // Epoch 0 had no list; nothing distributed yet.
        assert!(outcome.settlement.distributions.is_empty());
        assert!(state.conservation_holds());
        // Epoch 1's pot (4 blocks of coinbase + 1 fee) waits for the next macro.
        assert_eq!(state.ledger.pot(1), 41);
    }

    #[test]
    fn skipped_slot_is_barred_slashed_and_marked() {
        let (record, _) = test_genesis(4, 50);
        let mut state = ChainState::genesis(&record).unwrap();
        state
            .apply_micro(&MicroEffects {
                height: 1,
                transactions: &[],
                skipped_slots: &[2],
                fork_facts: &[],
            })
            .unwrap();
        assert!(state.ctx.is_barred(2));
        assert!(state.ledger.is_slot_slashed(1, 2));
        let owner = state.ctx.slot_owner(2);
        assert!(state.ledger.is_delayed(&owner));
        assert!(matches!(
            state.registry.get(&owner).unwrap().status,
            ValidatorStatus::MarkedForExpulsion { deadline_epoch: 2 }
        ));
    }

    #[test]
    fn fork_fact_bars_only_in_running_epoch() {
        let (record, _) = test_genesis(4, 50);
        let mut state = ChainState::genesis(&record).unwrap();
        let owner = state.ctx.slot_owner(1);
        state.record_fork_fact(&ForkFact {
            offense_epoch: 1,
            slot: 1,
            validator: owner,
        });
        assert!(state.ctx.is_barred(1));

        // An offense from a previous epoch slashes but does not bar.
        let mut other = ChainState::genesis(&record).unwrap();
        other.ctx.epoch = 2;
        other.record_fork_fact(&ForkFact {
            offense_epoch: 1,
            slot: 3,
            validator: owner,
        });
        assert!(!other.ctx.is_barred(3));
        assert!(other.ledger.is_slot_slashed(1, 3));
    }

    #[test]
    fn state_root_changes_with_content_and_proofs_verify() {
        let (record, vs) = test_genesis(4, 50);
        let mut state = ChainState::genesis(&record).unwrap();
        let root_before = state.root();
        state
            .execute_transaction(&transfer(&vs[0], vs[1].address, 7, 0))
            .unwrap();
        let root_after = state.root();
        assert_ne!(root_before, root_after);

        let key = ChainState::account_key(&vs[1].address);
        let (value, proof) = state.prove(&key).unwrap();
        assert_eq!(Amount::decode_all(&value).unwrap(), 57);
        assert!(verify_state_entry(&root_after, &key, &value, &proof));
        assert!(!verify_state_entry(&root_before, &key, &value, &proof));
        let mut tampered = value.clone();
        tampered[7] ^= 1;
        assert!(!verify_state_entry(&root_after, &key, &tampered, &proof));
    }

    #[test]
    fn state_encoding_round_trips() {
        let (record, vs) = test_genesis(4, 50);
        let mut state = ChainState::genesis(&record).unwrap();
        state
            .execute_transaction(&transfer(&vs[0], vs[1].address, 7, 0))
            .unwrap();
        state.record_skipped_slot(0);
        let decoded = ChainState::decode_all(&state.encoded()).unwrap();
        assert_eq!(decoded, state);
        assert_eq!(decoded.root(), state.root());
    }
}
