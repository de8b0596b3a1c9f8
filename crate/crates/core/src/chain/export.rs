//! Chain export format and protocol parameters.
//!
//! An export is a self-contained byte stream: a magic tag, the genesis
//! record (parameters, seed tag, initial registry, funded accounts), a
//! sequence of length-prefixed block records, an optional state snapshot
//! taken at the last macro block, and an end marker. Records carry their
//! height and kind in the frame so readers can skip payloads they do not
//! verify without decoding them.

use alloc::vec::Vec;

use crate::crypto::{Backend, ProofOfPossession, PublicKey, Seed};
use crate::encoding::{encode_bytes, CodecError, Decode, Encode, Reader};

use super::{Address, Amount, Block, BlockNumber, EpochNumber};

pub const EXPORT_MAGIC: &[u8; 8] = b"SBFTCHN1";

/// Protocol constants fixed at genesis.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Params {
    pub backend: Backend,
    /// Validator list length `n = 3f + 1`.
    pub slots: u32,
    /// Number of micro blocks between macro blocks (`m`).
    pub epoch_length: u32,
    /// Base view-change timeout in simulated milliseconds.
    pub timeout_ms: u64,
    /// Newly minted tokens added to the epoch reward pot per block.
    pub coinbase: Amount,
}

impl Params {
    pub fn f(&self) -> u32 {
        (self.slots - 1) / 3
    }

    pub fn quorum(&self) -> usize {
        2 * self.f() as usize + 1
    }

    /// Heights advance macro, m micros, macro, ... so the period is `m + 1`.
    pub fn epoch_period(&self) -> u64 {
        self.epoch_length as u64 + 1
    }

    pub fn is_macro_height(&self, height: BlockNumber) -> bool {
        height % self.epoch_period() == 0
    }

    /// The epoch a block belongs to. An epoch ends with its macro block;
    /// genesis is the lone block of epoch 0.
    pub fn epoch_of(&self, height: BlockNumber) -> EpochNumber {
        height.div_ceil(self.epoch_period())
    }

    pub fn macro_height(&self, epoch: EpochNumber) -> BlockNumber {
        epoch * self.epoch_period()
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if self.slots < 4 || (self.slots - 1) % 3 != 0 {
            return Err("slot count must be 3f+1 with f >= 1");
        }
        if self.epoch_length == 0 {
            return Err("epoch length must be positive");
        }
        if self.timeout_ms == 0 {
            return Err("timeout must be positive");
        }
        Ok(())
    }
}

impl Encode for Params {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.backend.encode_into(out);
        self.slots.encode_into(out);
        self.epoch_length.encode_into(out);
        self.timeout_ms.encode_into(out);
        self.coinbase.encode_into(out);
    }
}

impl Decode for Params {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let params = Params {
            backend: Backend::decode_from(r)?,
            slots: u32::decode_from(r)?,
            epoch_length: u32::decode_from(r)?,
            timeout_ms: u64::decode_from(r)?,
            coinbase: u64::decode_from(r)?,
        };
        params.validate().map_err(CodecError::Invalid)?;
        Ok(params)
    }
}

/// A validator registered at genesis.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GenesisValidator {
    pub address: Address,
    pub deposit: Amount,
    pub cold_key: PublicKey,
    pub warm_key: PublicKey,
    pub hot_key: PublicKey,
    pub possession: ProofOfPossession,
    pub reward_address: Option<Address>,
}

impl Encode for GenesisValidator {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.address.encode_into(out);
        self.deposit.encode_into(out);
        self.cold_key.encode_into(out);
        self.warm_key.encode_into(out);
        self.hot_key.encode_into(out);
        self.possession.encode_into(out);
        self.reward_address.encode_into(out);
    }
}

impl Decode for GenesisValidator {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(GenesisValidator {
            address: Address::decode_from(r)?,
            deposit: u64::decode_from(r)?,
            cold_key: PublicKey::decode_from(r)?,
            warm_key: PublicKey::decode_from(r)?,
            hot_key: PublicKey::decode_from(r)?,
            possession: ProofOfPossession::decode_from(r)?,
            reward_address: Option::decode_from(r)?,
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GenesisRecord {
    pub params: Params,
    /// Externally sourced entropy hashed into the initial seed.
    pub seed_tag: [u8; 32],
    pub validators: Vec<GenesisValidator>,
    /// Additional liquid balances beyond locked deposits.
    pub accounts: Vec<(Address, Amount)>,
}

impl GenesisRecord {
    pub fn genesis_seed(&self) -> Seed {
        Seed::genesis(self.params.backend, &self.seed_tag)
    }
}

impl Encode for GenesisRecord {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.params.encode_into(out);
        out.extend_from_slice(&self.seed_tag);
        self.validators.encode_into(out);
        (self.accounts.len() as u32).encode_into(out);
        for (addr, balance) in &self.accounts {
            addr.encode_into(out);
            balance.encode_into(out);
        }
    }
}

impl Decode for GenesisRecord {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let params = Params::decode_from(r)?;
        let seed_tag = r.array()?;
        let validators = Vec::decode_from(r)?;
        let n = r.list_len()?;
        let mut accounts = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            accounts.push((Address::decode_from(r)?, u64::decode_from(r)?));
        }
        Ok(GenesisRecord {
            params,
            seed_tag,
            validators,
            accounts,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RecordKind {
    Micro,
    Macro,
    /// Canonical state snapshot, taken at the height in the frame.
    State,
}

const KIND_MICRO: u8 = 0;
const KIND_MACRO: u8 = 1;
const KIND_STATE: u8 = 2;
const KIND_END: u8 = 3;

/// Incrementally writes an export stream.
pub struct ExportBuilder {
    buf: Vec<u8>,
}

impl ExportBuilder {
    pub fn new(genesis: &GenesisRecord) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(EXPORT_MAGIC);
        genesis.encode_into(&mut buf);
        ExportBuilder { buf }
    }

    fn frame(&mut self, kind: u8, number: u64, payload: &[u8]) {
        self.buf.push(kind);
        number.encode_into(&mut self.buf);
        encode_bytes(payload, &mut self.buf);
    }

    pub fn push_block(&mut self, block: &Block) {
        let kind = if block.is_macro() { KIND_MACRO } else { KIND_MICRO };
        self.frame(kind, block.number(), &block.encoded());
    }

    pub fn push_state(&mut self, height: BlockNumber, state_bytes: &[u8]) {
        self.frame(KIND_STATE, height, state_bytes);
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.buf.push(KIND_END);
        self.buf
    }
}

/// A frame from the export stream. The payload stays undecoded so readers
/// can skip sections they do not verify.
#[derive(Clone, Copy, Debug)]
pub struct RawRecord<'a> {
    pub kind: RecordKind,
    pub number: BlockNumber,
    pub payload: &'a [u8],
}

impl RawRecord<'_> {
    pub fn decode_block(&self) -> Result<Block, CodecError> {
        Block::decode_all(self.payload)
    }
}

/// Parsed export header plus a lazy record cursor.
pub struct ExportReader<'a> {
    pub genesis: GenesisRecord,
    records: &'a [u8],
}

impl<'a> ExportReader<'a> {
    pub fn open(bytes: &'a [u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let magic = r.take(EXPORT_MAGIC.len())?;
        if magic != EXPORT_MAGIC {
            return Err(CodecError::Invalid("bad export magic"));
        }
        let genesis = GenesisRecord::decode_from(&mut r)?;
        let records = r.take(r.remaining())?;
        Ok(ExportReader { genesis, records })
    }

    pub fn records(&self) -> RecordIter<'a> {
        RecordIter {
            reader: Reader::new(self.records),
            done: false,
        }
    }
}

pub struct RecordIter<'a> {
    reader: Reader<'a>,
    done: bool,
}

impl<'a> Iterator for RecordIter<'a> {
    type Item = Result<RawRecord<'a>, CodecError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let kind = match self.reader.u8() {
            Ok(k) => k,
            Err(e) => {
                self.done = true;
                return Some(Err(e));
            }
        };
        if kind == KIND_END {
            self.done = true;
            return match self.reader.remaining() {
                0 => None,
                _ => Some(Err(CodecError::TrailingBytes)),
            };
        }
        let kind = match kind {
            KIND_MICRO => RecordKind::Micro,
            KIND_MACRO => RecordKind::Macro,
            KIND_STATE => RecordKind::State,
            t => {
                self.done = true;
                return Some(Err(CodecError::BadTag(t)));
            }
        };
        let result = (|| {
            let number = self.reader.u64()?;
            let len = self.reader.list_len()?;
            let payload = self.reader.take(len)?;
            Ok(RawRecord {
                kind,
                number,
                payload,
            })
        })();
        if result.is_err() {
            self.done = true;
        }
        Some(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{BlockHeader, MacroBlock, MacroDigest};
    use crate::crypto::keygen;
    use crate::hash::Hash32;
    use alloc::vec;

    fn params() -> Params {
        Params {
            backend: Backend::Mock,
            slots: 4,
            epoch_length: 10,
            timeout_ms: 1000,
            coinbase: 5,
        }
    }

    #[test]
    fn epoch_arithmetic() {
        let p = params();
        assert!(p.is_macro_height(0));
        assert!(p.is_macro_height(11));
        assert!(p.is_macro_height(22));
        assert!(!p.is_macro_height(10));
        assert_eq!(p.epoch_of(0), 0);
        assert_eq!(p.epoch_of(1), 1);
        assert_eq!(p.epoch_of(11), 1);
        assert_eq!(p.epoch_of(12), 2);
        assert_eq!(p.macro_height(3), 33);
        assert_eq!(p.f(), 1);
        assert_eq!(p.quorum(), 3);
    }

    #[test]
    fn round_trip_with_skippable_records() {
        let (sk, pk) = keygen(Backend::Mock, &[1; 32]);
        let genesis = GenesisRecord {
            params: params(),
            seed_tag: [7; 32],
            validators: vec![GenesisValidator {
                address: Address::from_public_key(&pk),
                deposit: 100,
                cold_key: pk,
                warm_key: pk,
                hot_key: pk,
                possession: crate::crypto::sign_proof_of_possession(&sk),
                reward_address: None,
            }],
            accounts: vec![(Address([9; 20]), 55)],
        };
        let block = Block::Macro(MacroBlock {
            header: BlockHeader {
                parent_hash: Hash32::ZERO,
                block_number: 11,
                view_number: 0,
                digest_root: Hash32::ZERO,
                transactions_root: Hash32::ZERO,
                state_root: Hash32::ZERO,
            },
            digest: MacroDigest {
                timestamp: 3,
                seed: genesis.genesis_seed(),
                validator_list_keys: vec![pk],
                prev_macro_hash: Hash32::ZERO,
            },
            justification: None,
        });

        let mut builder = ExportBuilder::new(&genesis);
        builder.push_block(&block);
        builder.push_state(11, b"state-bytes");
        let bytes = builder.finish();

        let reader = ExportReader::open(&bytes).unwrap();
        assert_eq!(reader.genesis, genesis);
        let records: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].kind, RecordKind::Macro);
        assert_eq!(records[0].number, 11);
        assert_eq!(records[0].decode_block().unwrap(), block);
        assert_eq!(records[1].kind, RecordKind::State);
        assert_eq!(records[1].payload, b"state-bytes");
    }

    #[test]
    fn truncation_is_detected() {
        let genesis = GenesisRecord {
            params: params(),
            seed_tag: [0; 32],
            validators: vec![],
            accounts: vec![],
        };
        let bytes = ExportBuilder::new(&genesis).finish();
        // Drop the end marker.
        let truncated = &bytes[..bytes.len() - 1];
        let reader = ExportReader::open(truncated).unwrap();
        assert!(reader.records().next().unwrap().is_err());
    }
}
