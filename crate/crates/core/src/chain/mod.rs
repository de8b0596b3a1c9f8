//! Block structures, transactions, misbehavior evidence and their validation.
//!
//! Two block kinds alternate on the chain: micro blocks carry user
//! transactions and are signed by a single slot owner; macro blocks close an
//! epoch, rotate the validator list and carry a two-round PBFT justification.
//! Every hashed or signed structure uses the canonical encoding from
//! [`crate::encoding`].

pub mod export;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::crypto::{
    self, AggregateSignature, CryptoError, ProofOfPossession, PublicKey, Seed, Signature,
};
use crate::encoding::{CodecError, Decode, Encode, Reader};
use crate::hash::{sha256, sha256_parts, Hash32};
use crate::merkle;

pub type BlockNumber = u64;
pub type ViewNumber = u32;
pub type SlotIndex = u32;
pub type EpochNumber = u64;
pub type Timestamp = u64;
pub type Amount = u64;

/// 20-byte account identifier derived from the account (cold) public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub [u8; 20]);

impl Address {
    pub fn from_public_key(pk: &PublicKey) -> Address {
        let digest = sha256_parts(&[b"address/", &pk.encoded()]);
        let mut bytes = [0u8; 20];
        bytes.copy_from_slice(&digest.0[..20]);
        Address(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Address> {
        let bytes = hex::decode(s).ok()?;
        Some(Address(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(&self.0[..5]))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_hex())
    }
}

impl Encode for Address {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0);
    }
}

impl Decode for Address {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Address(r.array()?))
    }
}

/// Common header for micro and macro blocks. The block kind is implied by
/// the height: every `m + 1`-th block is a macro block.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BlockHeader {
    pub parent_hash: Hash32,
    pub block_number: BlockNumber,
    pub view_number: ViewNumber,
    pub digest_root: Hash32,
    pub transactions_root: Hash32,
    pub state_root: Hash32,
}

impl Encode for BlockHeader {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.parent_hash.encode_into(out);
        self.block_number.encode_into(out);
        self.view_number.encode_into(out);
        self.digest_root.encode_into(out);
        self.transactions_root.encode_into(out);
        self.state_root.encode_into(out);
    }
}

impl Decode for BlockHeader {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(BlockHeader {
            parent_hash: Hash32::decode_from(r)?,
            block_number: u64::decode_from(r)?,
            view_number: u32::decode_from(r)?,
            digest_root: Hash32::decode_from(r)?,
            transactions_root: Hash32::decode_from(r)?,
            state_root: Hash32::decode_from(r)?,
        })
    }
}

/// Hash of the canonical header encoding; the chain's block identifier.
pub fn hash_header(header: &BlockHeader) -> Hash32 {
    sha256(&header.encoded())
}

/// Message bytes a producer signs to vouch for a block.
pub fn block_signing_bytes(header_hash: &Hash32) -> Vec<u8> {
    let mut msg = Vec::with_capacity(38);
    msg.extend_from_slice(b"block/");
    msg.extend_from_slice(&header_hash.0);
    msg
}

/// Message bytes for a PBFT prepare vote on a proposal hash.
pub fn prepare_signing_bytes(header_hash: &Hash32) -> Vec<u8> {
    let mut msg = Vec::with_capacity(40);
    msg.extend_from_slice(b"prepare/");
    msg.extend_from_slice(&header_hash.0);
    msg
}

/// Message bytes for a PBFT commit vote on a proposal hash.
pub fn commit_signing_bytes(header_hash: &Hash32) -> Vec<u8> {
    let mut msg = Vec::with_capacity(39);
    msg.extend_from_slice(b"commit/");
    msg.extend_from_slice(&header_hash.0);
    msg
}

/// A vote to replace the owner of `block_number` and move to `view`.
/// Quorums of `2f + 1` distinct signer slots advance the view; the block
/// produced at the new view must embed one quorum per view it skipped.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ViewChangeMessage {
    /// The view this message votes to move *into* (1-based).
    pub view: ViewNumber,
    pub block_number: BlockNumber,
    pub signer_slot: SlotIndex,
    pub signature: Signature,
}

impl ViewChangeMessage {
    pub fn signing_bytes(view: ViewNumber, block_number: BlockNumber) -> Vec<u8> {
        let mut msg = Vec::with_capacity(25);
        msg.extend_from_slice(b"view-change/");
        view.encode_into(&mut msg);
        block_number.encode_into(&mut msg);
        msg
    }

    pub fn verify(&self, signer_key: &PublicKey) -> bool {
        crypto::verify(
            signer_key,
            &Self::signing_bytes(self.view, self.block_number),
            &self.signature,
        )
    }
}

impl Encode for ViewChangeMessage {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.view.encode_into(out);
        self.block_number.encode_into(out);
        self.signer_slot.encode_into(out);
        self.signature.encode_into(out);
    }
}

impl Decode for ViewChangeMessage {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ViewChangeMessage {
            view: u32::decode_from(r)?,
            block_number: u64::decode_from(r)?,
            signer_slot: u32::decode_from(r)?,
            signature: Signature::decode_from(r)?,
        })
    }
}

/// Producer identity and signature on a micro block. The producer is named
/// by its slot position in the epoch's validator list.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MicroJustification {
    pub producer_slot: SlotIndex,
    pub signature: Signature,
}

impl Encode for MicroJustification {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.producer_slot.encode_into(out);
        self.signature.encode_into(out);
    }
}

impl Decode for MicroJustification {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(MicroJustification {
            producer_slot: u32::decode_from(r)?,
            signature: Signature::decode_from(r)?,
        })
    }
}

/// Evidence that one slot owner signed two different headers for the same
/// block and view. Sufficient on its own; neither block needs to be valid.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ForkProof {
    pub header_a: BlockHeader,
    pub header_b: BlockHeader,
    pub justification_a: MicroJustification,
    pub justification_b: MicroJustification,
}

impl ForkProof {
    pub fn block_number(&self) -> BlockNumber {
        self.header_a.block_number
    }

    pub fn view_number(&self) -> ViewNumber {
        self.header_a.view_number
    }

    pub fn slot(&self) -> SlotIndex {
        self.justification_a.producer_slot
    }

    /// Order the two headers by hash so the same equivocation always
    /// encodes identically.
    pub fn canonicalize(&mut self) {
        if hash_header(&self.header_a) > hash_header(&self.header_b) {
            core::mem::swap(&mut self.header_a, &mut self.header_b);
            core::mem::swap(&mut self.justification_a, &mut self.justification_b);
        }
    }
}

impl Encode for ForkProof {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.header_a.encode_into(out);
        self.header_b.encode_into(out);
        self.justification_a.encode_into(out);
        self.justification_b.encode_into(out);
    }
}

impl Decode for ForkProof {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ForkProof {
            header_a: BlockHeader::decode_from(r)?,
            header_b: BlockHeader::decode_from(r)?,
            justification_a: MicroJustification::decode_from(r)?,
            justification_b: MicroJustification::decode_from(r)?,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ForkProofError {
    /// The proof's block number is not covered by the supplied epoch list.
    ForeignEpoch,
}

impl fmt::Display for ForkProofError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForkProofError::ForeignEpoch => write!(f, "foreign epoch proof"),
        }
    }
}

/// Validate a fork proof against an epoch's slot keys. `resolve` maps
/// `(block_number, view_number)` to the owning slot and returns `None` when
/// the height falls outside the epoch it knows about.
pub fn verify_fork_proof(
    proof: &ForkProof,
    slot_keys: &[PublicKey],
    resolve: impl Fn(BlockNumber, ViewNumber) -> Option<SlotIndex>,
) -> Result<bool, ForkProofError> {
    if proof.header_a == proof.header_b {
        return Ok(false);
    }
    if proof.header_a.block_number != proof.header_b.block_number
        || proof.header_a.view_number != proof.header_b.view_number
    {
        return Ok(false);
    }
    let slot = resolve(proof.header_a.block_number, proof.header_a.view_number)
        .ok_or(ForkProofError::ForeignEpoch)?;
    if proof.justification_a.producer_slot != slot || proof.justification_b.producer_slot != slot {
        return Ok(false);
    }
    let key = match slot_keys.get(slot as usize) {
        Some(k) => k,
        None => return Ok(false),
    };
    let ok_a = crypto::verify(
        key,
        &block_signing_bytes(&hash_header(&proof.header_a)),
        &proof.justification_a.signature,
    );
    let ok_b = crypto::verify(
        key,
        &block_signing_bytes(&hash_header(&proof.header_b)),
        &proof.justification_b.signature,
    );
    Ok(ok_a && ok_b)
}

/// Auxiliary data of a micro block: internal timestamp, the next VRF seed,
/// and any evidence the producer is putting on chain.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MicroDigest {
    pub timestamp: Timestamp,
    pub seed: Seed,
    pub view_changes: Vec<ViewChangeMessage>,
    pub fork_proofs: Vec<ForkProof>,
}

impl MicroDigest {
    pub fn root(&self) -> Hash32 {
        let leaves = [
            self.timestamp.encoded(),
            self.seed.encoded(),
            self.view_changes.encoded(),
            self.fork_proofs.encoded(),
        ];
        merkle::merkle_root_iter(leaves.iter().map(|l| l.as_slice()))
    }
}

impl Encode for MicroDigest {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.timestamp.encode_into(out);
        self.seed.encode_into(out);
        self.view_changes.encode_into(out);
        self.fork_proofs.encode_into(out);
    }
}

impl Decode for MicroDigest {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(MicroDigest {
            timestamp: u64::decode_from(r)?,
            seed: Seed::decode_from(r)?,
            view_changes: Vec::decode_from(r)?,
            fork_proofs: Vec::decode_from(r)?,
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MicroBlock {
    pub header: BlockHeader,
    pub digest: MicroDigest,
    pub transactions: Vec<Transaction>,
    pub justification: MicroJustification,
}

impl Encode for MicroBlock {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.header.encode_into(out);
        self.digest.encode_into(out);
        self.transactions.encode_into(out);
        self.justification.encode_into(out);
    }
}

impl Decode for MicroBlock {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(MicroBlock {
            header: BlockHeader::decode_from(r)?,
            digest: MicroDigest::decode_from(r)?,
            transactions: Vec::decode_from(r)?,
            justification: MicroJustification::decode_from(r)?,
        })
    }
}

/// Merkle root over the canonical encodings of the transaction list.
pub fn transactions_root(txs: &[Transaction]) -> Hash32 {
    let encoded: Vec<Vec<u8>> = txs.iter().map(|t| t.encoded()).collect();
    merkle::merkle_root(&encoded)
}

/// Auxiliary data of a macro block: timestamp and seed as in micro digests,
/// plus the next epoch's validator list and the link to the previous macro.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MacroDigest {
    pub timestamp: Timestamp,
    pub seed: Seed,
    pub validator_list_keys: Vec<PublicKey>,
    pub prev_macro_hash: Hash32,
}

impl MacroDigest {
    pub fn root(&self) -> Hash32 {
        let leaves = [
            self.timestamp.encoded(),
            self.seed.encoded(),
            self.validator_list_keys.encoded(),
            self.prev_macro_hash.encoded(),
        ];
        merkle::merkle_root_iter(leaves.iter().map(|l| l.as_slice()))
    }
}

impl Encode for MacroDigest {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.timestamp.encode_into(out);
        self.seed.encode_into(out);
        self.validator_list_keys.encode_into(out);
        self.prev_macro_hash.encode_into(out);
    }
}

impl Decode for MacroDigest {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(MacroDigest {
            timestamp: u64::decode_from(r)?,
            seed: Seed::decode_from(r)?,
            validator_list_keys: Vec::decode_from(r)?,
            prev_macro_hash: Hash32::decode_from(r)?,
        })
    }
}

/// The two aggregated PBFT voting rounds plus their signer bitmaps.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PbftJustification {
    pub prepare: AggregateSignature,
    pub commit: AggregateSignature,
}

impl Encode for PbftJustification {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.prepare.encode_into(out);
        self.commit.encode_into(out);
    }
}

impl Decode for PbftJustification {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(PbftJustification {
            prepare: AggregateSignature::decode_from(r)?,
            commit: AggregateSignature::decode_from(r)?,
        })
    }
}

/// Epoch-closing block. Carries no external transactions. The justification
/// is absent only on the synthesized genesis block.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MacroBlock {
    pub header: BlockHeader,
    pub digest: MacroDigest,
    pub justification: Option<PbftJustification>,
}

impl Encode for MacroBlock {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.header.encode_into(out);
        self.digest.encode_into(out);
        self.justification.encode_into(out);
    }
}

impl Decode for MacroBlock {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(MacroBlock {
            header: BlockHeader::decode_from(r)?,
            digest: MacroDigest::decode_from(r)?,
            justification: Option::decode_from(r)?,
        })
    }
}

/// Check the two PBFT rounds of a macro block: both aggregates must verify
/// over the header hash, each must carry at least `2f + 1` signers, and the
/// signer sets must overlap in at least `2f + 1` slots.
pub fn verify_macro_justification(
    block: &MacroBlock,
    slot_keys: &[PublicKey],
    f: u32,
) -> Result<bool, CryptoError> {
    let justification = match &block.justification {
        Some(j) => j,
        None => return Ok(false),
    };
    let quorum = 2 * f as usize + 1;
    let h = hash_header(&block.header);
    let prepare_ok = crypto::aggregate_verify(
        slot_keys,
        &prepare_signing_bytes(&h),
        &justification.prepare,
    )?;
    let commit_ok =
        crypto::aggregate_verify(slot_keys, &commit_signing_bytes(&h), &justification.commit)?;
    Ok(prepare_ok
        && commit_ok
        && justification.prepare.signers.count_ones() >= quorum
        && justification.commit.signers.count_ones() >= quorum
        && justification
            .prepare
            .signers
            .intersection_count(&justification.commit.signers)
            >= quorum)
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Block {
    Micro(MicroBlock),
    Macro(MacroBlock),
}

impl Block {
    pub fn header(&self) -> &BlockHeader {
        match self {
            Block::Micro(b) => &b.header,
            Block::Macro(b) => &b.header,
        }
    }

    pub fn hash(&self) -> Hash32 {
        hash_header(self.header())
    }

    pub fn number(&self) -> BlockNumber {
        self.header().block_number
    }

    pub fn view(&self) -> ViewNumber {
        self.header().view_number
    }

    pub fn seed(&self) -> &Seed {
        match self {
            Block::Micro(b) => &b.digest.seed,
            Block::Macro(b) => &b.digest.seed,
        }
    }

    pub fn timestamp(&self) -> Timestamp {
        match self {
            Block::Micro(b) => b.digest.timestamp,
            Block::Macro(b) => b.digest.timestamp,
        }
    }

    pub fn is_macro(&self) -> bool {
        matches!(self, Block::Macro(_))
    }

    pub fn as_micro(&self) -> Option<&MicroBlock> {
        match self {
            Block::Micro(b) => Some(b),
            Block::Macro(_) => None,
        }
    }

    pub fn as_macro(&self) -> Option<&MacroBlock> {
        match self {
            Block::Macro(b) => Some(b),
            Block::Micro(_) => None,
        }
    }
}

impl Encode for Block {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Block::Micro(b) => {
                out.push(0);
                b.encode_into(out);
            }
            Block::Macro(b) => {
                out.push(1);
                b.encode_into(out);
            }
        }
    }
}

impl Decode for Block {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            0 => Ok(Block::Micro(MicroBlock::decode_from(r)?)),
            1 => Ok(Block::Macro(MacroBlock::decode_from(r)?)),
            t => Err(CodecError::BadTag(t)),
        }
    }
}

// ---------------------------------------------------------------------------
// Transactions
// ---------------------------------------------------------------------------

/// Plain value move between accounts, signed by the sender's account key.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TransferTx {
    pub from: Address,
    pub to: Address,
    pub amount: Amount,
    pub fee: Amount,
    pub nonce: u64,
    pub sender_key: PublicKey,
    pub signature: Signature,
}

/// Registration of a new potential validator: locks the deposit and records
/// the three-key set. Signed with the cold (account) key.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct StakeTx {
    pub main_address: Address,
    pub amount: Amount,
    pub warm_key: PublicKey,
    pub hot_key: PublicKey,
    pub possession: ProofOfPossession,
    pub reward_address: Option<Address>,
    pub fee: Amount,
    pub nonce: u64,
    pub cold_key: PublicKey,
    pub signature: Signature,
}

/// Update of registry fields; blank (`None`) fields stay untouched.
/// Signed with the warm key held in the registry.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RestakeTx {
    pub main_address: Address,
    pub new_amount: Option<Amount>,
    pub new_hot_key: Option<(PublicKey, ProofOfPossession)>,
    pub new_reward_address: Option<Address>,
    pub fee: Amount,
    pub nonce: u64,
    pub signature: Signature,
}

/// Exit request; the deposit is only released one full epoch later.
/// Signed with the cold key.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct UnstakeTx {
    pub main_address: Address,
    pub fee: Amount,
    pub nonce: u64,
    pub cold_key: PublicKey,
    pub signature: Signature,
}

/// Availability proof from a validator marked for expulsion after a missed
/// slot: carries the hot key and a fresh proof of possession, signed with
/// the warm key.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ReactivateTx {
    pub main_address: Address,
    pub hot_key: PublicKey,
    pub possession: ProofOfPossession,
    pub fee: Amount,
    pub nonce: u64,
    pub signature: Signature,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Transaction {
    Transfer(TransferTx),
    Stake(StakeTx),
    Restake(RestakeTx),
    Unstake(UnstakeTx),
    Reactivate(ReactivateTx),
    /// Internal transaction: unsigned, inserted by a block producer rather
    /// than gossiped. A standalone timestamp record is the one kind used.
    Timestamp(Timestamp),
}

impl Transaction {
    pub fn is_external(&self) -> bool {
        !matches!(self, Transaction::Timestamp(_))
    }

    pub fn fee(&self) -> Amount {
        match self {
            Transaction::Transfer(t) => t.fee,
            Transaction::Stake(t) => t.fee,
            Transaction::Restake(t) => t.fee,
            Transaction::Unstake(t) => t.fee,
            Transaction::Reactivate(t) => t.fee,
            Transaction::Timestamp(_) => 0,
        }
    }

    pub fn hash(&self) -> Hash32 {
        sha256_parts(&[b"tx/", &self.encoded()])
    }

    /// The bytes covered by the transaction signature: the canonical
    /// encoding with the signature field left out.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"tx-sig/");
        self.encode_content(&mut out);
        out
    }

    fn encode_content(&self, out: &mut Vec<u8>) {
        match self {
            Transaction::Transfer(t) => {
                out.push(0);
                t.from.encode_into(out);
                t.to.encode_into(out);
                t.amount.encode_into(out);
                t.fee.encode_into(out);
                t.nonce.encode_into(out);
                t.sender_key.encode_into(out);
            }
            Transaction::Stake(t) => {
                out.push(1);
                t.main_address.encode_into(out);
                t.amount.encode_into(out);
                t.warm_key.encode_into(out);
                t.hot_key.encode_into(out);
                t.possession.encode_into(out);
                t.reward_address.encode_into(out);
                t.fee.encode_into(out);
                t.nonce.encode_into(out);
                t.cold_key.encode_into(out);
            }
            Transaction::Restake(t) => {
                out.push(2);
                t.main_address.encode_into(out);
                t.new_amount.encode_into(out);
                match &t.new_hot_key {
                    None => out.push(0),
                    Some((pk, pop)) => {
                        out.push(1);
                        pk.encode_into(out);
                        pop.encode_into(out);
                    }
                }
                t.new_reward_address.encode_into(out);
                t.fee.encode_into(out);
                t.nonce.encode_into(out);
            }
            Transaction::Unstake(t) => {
                out.push(3);
                t.main_address.encode_into(out);
                t.fee.encode_into(out);
                t.nonce.encode_into(out);
                t.cold_key.encode_into(out);
            }
            Transaction::Reactivate(t) => {
                out.push(4);
                t.main_address.encode_into(out);
                t.hot_key.encode_into(out);
                t.possession.encode_into(out);
                t.fee.encode_into(out);
                t.nonce.encode_into(out);
            }
            Transaction::Timestamp(ms) => {
                out.push(5);
                ms.encode_into(out);
            }
        }
    }

    /// Signature attached to an external transaction.
    pub fn signature(&self) -> Option<&Signature> {
        match self {
            Transaction::Transfer(t) => Some(&t.signature),
            Transaction::Stake(t) => Some(&t.signature),
            Transaction::Restake(t) => Some(&t.signature),
            Transaction::Unstake(t) => Some(&t.signature),
            Transaction::Reactivate(t) => Some(&t.signature),
            Transaction::Timestamp(_) => None,
        }
    }
}

impl Encode for Transaction {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.encode_content(out);
        if let Some(sig) = self.signature() {
            sig.encode_into(out);
        }
    }
}

impl Decode for Transaction {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            0 => Ok(Transaction::Transfer(TransferTx {
                from: Address::decode_from(r)?,
                to: Address::decode_from(r)?,
                amount: u64::decode_from(r)?,
                fee: u64::decode_from(r)?,
                nonce: u64::decode_from(r)?,
                sender_key: PublicKey::decode_from(r)?,
                signature: Signature::decode_from(r)?,
            })),
            1 => Ok(Transaction::Stake(StakeTx {
                main_address: Address::decode_from(r)?,
                amount: u64::decode_from(r)?,
                warm_key: PublicKey::decode_from(r)?,
                hot_key: PublicKey::decode_from(r)?,
                possession: ProofOfPossession::decode_from(r)?,
                reward_address: Option::decode_from(r)?,
                fee: u64::decode_from(r)?,
                nonce: u64::decode_from(r)?,
                cold_key: PublicKey::decode_from(r)?,
                signature: Signature::decode_from(r)?,
            })),
            2 => Ok(Transaction::Restake(RestakeTx {
                main_address: Address::decode_from(r)?,
                new_amount: Option::decode_from(r)?,
                new_hot_key: match r.u8()? {
                    0 => None,
                    1 => Some((
                        PublicKey::decode_from(r)?,
                        ProofOfPossession::decode_from(r)?,
                    )),
                    t => return Err(CodecError::BadTag(t)),
                },
                new_reward_address: Option::decode_from(r)?,
                fee: u64::decode_from(r)?,
                nonce: u64::decode_from(r)?,
                signature: Signature::decode_from(r)?,
            })),
            3 => Ok(Transaction::Unstake(UnstakeTx {
                main_address: Address::decode_from(r)?,
                fee: u64::decode_from(r)?,
                nonce: u64::decode_from(r)?,
                cold_key: PublicKey::decode_from(r)?,
                signature: Signature::decode_from(r)?,
            })),
            4 => Ok(Transaction::Reactivate(ReactivateTx {
                main_address: Address::decode_from(r)?,
                hot_key: PublicKey::decode_from(r)?,
                possession: ProofOfPossession::decode_from(r)?,
                fee: u64::decode_from(r)?,
                nonce: u64::decode_from(r)?,
                signature: Signature::decode_from(r)?,
            })),
            5 => Ok(Transaction::Timestamp(u64::decode_from(r)?)),
            t => Err(CodecError::BadTag(t)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, sign, Backend};
    use alloc::vec;

    fn header(view: ViewNumber) -> BlockHeader {
        BlockHeader {
            parent_hash: sha256(b"parent"),
            block_number: 7,
            view_number: view,
            digest_root: sha256(b"digest"),
            transactions_root: sha256(b"txs"),
            state_root: sha256(b"state"),
        }
    }

    #[test]
    fn header_hash_is_stable_and_view_sensitive() {
        assert_eq!(hash_header(&header(0)), hash_header(&header(0)));
        assert_ne!(hash_header(&header(0)), hash_header(&header(1)));
    }

    #[test]
    fn view_change_message_round_trip() {
        let (sk, pk) = keygen(Backend::Mock, &[1; 32]);
        let msg = ViewChangeMessage {
            view: 2,
            block_number: 9,
            signer_slot: 3,
            signature: sign(&sk, &ViewChangeMessage::signing_bytes(2, 9)),
        };
        assert!(msg.verify(&pk));
        let decoded = ViewChangeMessage::decode_all(&msg.encoded()).unwrap();
        assert_eq!(decoded, msg);
        let (_, other) = keygen(Backend::Mock, &[2; 32]);
        assert!(!msg.verify(&other));
    }

    fn signed_fork_proof(sk: &crate::crypto::SecretKey, slot: SlotIndex) -> ForkProof {
        let a = header(0);
        let mut b = header(0);
        b.state_root = sha256(b"other-state");
        let just = |h: &BlockHeader| MicroJustification {
            producer_slot: slot,
            signature: sign(sk, &block_signing_bytes(&hash_header(h))),
        };
        let mut proof = ForkProof {
            justification_a: just(&a),
            justification_b: just(&b),
            header_a: a,
            header_b: b,
        };
        proof.canonicalize();
        proof
    }

    #[test]
    fn fork_proof_checks() {
        let (sk, pk) = keygen(Backend::Mock, &[3; 32]);
        let keys = vec![pk];
        let proof = signed_fork_proof(&sk, 0);
        let resolve = |_: BlockNumber, _: ViewNumber| Some(0);
        assert_eq!(verify_fork_proof(&proof, &keys, resolve), Ok(true));

        // Symmetry in the two headers.
        let mut swapped = proof.clone();
        core::mem::swap(&mut swapped.header_a, &mut swapped.header_b);
        core::mem::swap(&mut swapped.justification_a, &mut swapped.justification_b);
        assert_eq!(verify_fork_proof(&swapped, &keys, resolve), Ok(true));

        // Identical headers are not a fork.
        let mut same = proof.clone();
        same.header_b = same.header_a;
        same.justification_b = same.justification_a.clone();
        assert_eq!(verify_fork_proof(&same, &keys, resolve), Ok(false));

        // Different view numbers are not a fork.
        let mut cross_view = proof.clone();
        cross_view.header_b.view_number = 1;
        cross_view.justification_b.signature = sign(
            &sk,
            &block_signing_bytes(&hash_header(&cross_view.header_b)),
        );
        assert_eq!(verify_fork_proof(&cross_view, &keys, resolve), Ok(false));

        // Outside the epoch the resolver knows about.
        assert_eq!(
            verify_fork_proof(&proof, &keys, |_, _| None),
            Err(ForkProofError::ForeignEpoch)
        );
    }

    #[test]
    fn macro_justification_quorum_rules() {
        let f = 1u32;
        let n = 3 * f as usize + 1;
        let keys: Vec<_> = (0..n as u8).map(|i| keygen(Backend::Mock, &[i; 32])).collect();
        let pks: Vec<_> = keys.iter().map(|(_, pk)| *pk).collect();
        let block = MacroBlock {
            header: header(0),
            digest: MacroDigest {
                timestamp: 1,
                seed: Seed::genesis(Backend::Mock, &[0; 32]),
                validator_list_keys: pks.clone(),
                prev_macro_hash: Hash32::ZERO,
            },
            justification: None,
        };
        let h = hash_header(&block.header);
        let make_agg = |msg: &[u8], slots: &[u32]| {
            let sigs: Vec<_> = slots
                .iter()
                .map(|&s| sign(&keys[s as usize].0, msg))
                .collect();
            crypto::aggregate(&sigs, slots, n).unwrap()
        };

        // Exactly 2f+1 identical prepare/commit signers pass.
        let mut ok = block.clone();
        ok.justification = Some(PbftJustification {
            prepare: make_agg(&prepare_signing_bytes(&h), &[0, 1, 2]),
            commit: make_agg(&commit_signing_bytes(&h), &[0, 1, 2]),
        });
        assert_eq!(verify_macro_justification(&ok, &pks, f), Ok(true));

        // 2f prepare signers are below quorum.
        let mut low = block.clone();
        low.justification = Some(PbftJustification {
            prepare: make_agg(&prepare_signing_bytes(&h), &[0, 1]),
            commit: make_agg(&commit_signing_bytes(&h), &[0, 1, 2]),
        });
        assert_eq!(verify_macro_justification(&low, &pks, f), Ok(false));

        // Quorums on both rounds but intersection of only 2f.
        let mut disjoint = block.clone();
        disjoint.justification = Some(PbftJustification {
            prepare: make_agg(&prepare_signing_bytes(&h), &[0, 1, 2]),
            commit: make_agg(&commit_signing_bytes(&h), &[1, 2, 3]),
        });
        assert_eq!(verify_macro_justification(&disjoint, &pks, f), Ok(false));

        // Monotonicity: widening both signer sets keeps it valid.
        let mut wide = block.clone();
        wide.justification = Some(PbftJustification {
            prepare: make_agg(&prepare_signing_bytes(&h), &[0, 1, 2, 3]),
            commit: make_agg(&commit_signing_bytes(&h), &[0, 1, 2, 3]),
        });
        assert_eq!(verify_macro_justification(&wide, &pks, f), Ok(true));
    }

    #[test]
    fn view_change_signatures_aggregate() {
        // All messages for one (view, height) share signing bytes, so they
        // can be folded into a single aggregate.
        let n = 4;
        let keys: Vec<_> = (0..n as u8).map(|i| keygen(Backend::Bls, &[i; 32])).collect();
        let msg = ViewChangeMessage::signing_bytes(1, 42);
        let sigs: Vec<_> = keys.iter().take(3).map(|(sk, _)| sign(sk, &msg)).collect();
        let agg = crypto::aggregate(&sigs, &[0, 1, 2], n).unwrap();
        let pks: Vec<_> = keys.iter().map(|(_, pk)| *pk).collect();
        assert!(crypto::aggregate_verify(&pks, &msg, &agg).unwrap());
    }
}
