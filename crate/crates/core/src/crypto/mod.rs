//! Signature scheme with aggregation, proof of possession and the seed chain.
//!
//! Two interchangeable backends implement the same contract: a pairing-based
//! scheme over BLS12-381 ([`bls`]) and a deterministic keyed-hash mock
//! ([`mock`]) for fast simulation. Values carry their backend, and mixed-
//! backend operations fail verification rather than panic. Signing is
//! deterministic in both backends, which is what lets a signature double as
//! a verifiable random function output: the seed chain is nothing more than
//! each producer signing the previous seed.

pub mod bls;
pub mod mock;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use bls12_381::{G1Affine, G2Affine, Scalar};

use crate::bitmap::Bitmap;
use crate::encoding::{CodecError, Decode, Encode, Reader};
use crate::hash::{sha256_parts, Hash32};

/// Which signature backend a key or signature belongs to.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Backend {
    Mock,
    Bls,
}

impl Backend {
    fn tag(self) -> u8 {
        match self {
            Backend::Mock => 1,
            Backend::Bls => 2,
        }
    }
}

impl Encode for Backend {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.tag());
    }
}

impl Decode for Backend {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            1 => Ok(Backend::Mock),
            2 => Ok(Backend::Bls),
            t => Err(CodecError::BadTag(t)),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CryptoError {
    /// `aggregate` was called with no signatures.
    NothingToAggregate,
    /// The same signer position appeared twice.
    DuplicateSigner,
    /// A signer position is outside the key list.
    PositionOutOfRange,
    /// Signatures from different backends cannot be combined.
    MixedBackends,
    /// Bitmap length does not match the key list.
    BitmapKeyListMismatch,
}

impl fmt::Display for CryptoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CryptoError::NothingToAggregate => write!(f, "nothing to aggregate"),
            CryptoError::DuplicateSigner => write!(f, "duplicate signer"),
            CryptoError::PositionOutOfRange => write!(f, "signer position out of range"),
            CryptoError::MixedBackends => write!(f, "mixed signature backends"),
            CryptoError::BitmapKeyListMismatch => write!(f, "bitmap/key-list mismatch"),
        }
    }
}

/// Secret signing key. Never serialized on-chain; the hex fixture format in
/// key files is the only external representation.
#[derive(Clone, PartialEq, Eq)]
pub enum SecretKey {
    Mock([u8; 32]),
    Bls(Scalar),
}

impl SecretKey {
    pub fn backend(&self) -> Backend {
        match self {
            SecretKey::Mock(_) => Backend::Mock,
            SecretKey::Bls(_) => Backend::Bls,
        }
    }

    pub fn public(&self) -> PublicKey {
        match self {
            SecretKey::Mock(sk) => PublicKey::Mock(mock::public_from_secret(sk)),
            SecretKey::Bls(sk) => PublicKey::Bls(bls::public_from_secret(sk)),
        }
    }

    pub fn to_hex(&self) -> String {
        match self {
            SecretKey::Mock(sk) => hex::encode(sk),
            SecretKey::Bls(sk) => hex::encode(sk.to_bytes()),
        }
    }

    pub fn from_hex(backend: Backend, s: &str) -> Option<SecretKey> {
        let bytes: [u8; 32] = hex::decode(s).ok()?.try_into().ok()?;
        match backend {
            Backend::Mock => Some(SecretKey::Mock(bytes)),
            Backend::Bls => Option::from(Scalar::from_bytes(&bytes)).map(SecretKey::Bls),
        }
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey(<{:?}>)", self.backend())
    }
}

/// Public verification key.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum PublicKey {
    Mock([u8; 32]),
    Bls(G2Affine),
}

impl PublicKey {
    pub fn backend(&self) -> Backend {
        match self {
            PublicKey::Mock(_) => Backend::Mock,
            PublicKey::Bls(_) => Backend::Bls,
        }
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.encoded())
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let enc = self.encoded();
        write!(f, "PublicKey({})", hex::encode(&enc[..7.min(enc.len())]))
    }
}

impl Encode for PublicKey {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            PublicKey::Mock(pk) => {
                out.push(Backend::Mock.tag());
                out.extend_from_slice(pk);
            }
            PublicKey::Bls(pk) => {
                out.push(Backend::Bls.tag());
                out.extend_from_slice(&pk.to_compressed());
            }
        }
    }
}

impl Decode for PublicKey {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match Backend::decode_from(r)? {
            Backend::Mock => Ok(PublicKey::Mock(r.array()?)),
            Backend::Bls => {
                let bytes: [u8; 96] = r.array()?;
                Option::from(G2Affine::from_compressed(&bytes))
                    .map(PublicKey::Bls)
                    .ok_or(CodecError::Invalid("malformed G2 point"))
            }
        }
    }
}

/// A signature; with the deterministic schemes used here it also serves as
/// the VRF output inside [`Seed`].
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Signature {
    Mock(Hash32),
    Bls(G1Affine),
}

impl Signature {
    pub fn backend(&self) -> Backend {
        match self {
            Signature::Mock(_) => Backend::Mock,
            Signature::Bls(_) => Backend::Bls,
        }
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let enc = self.encoded();
        write!(f, "Signature({})", hex::encode(&enc[..7.min(enc.len())]))
    }
}

impl Encode for Signature {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Signature::Mock(h) => {
                out.push(Backend::Mock.tag());
                out.extend_from_slice(&h.0);
            }
            Signature::Bls(sig) => {
                out.push(Backend::Bls.tag());
                out.extend_from_slice(&sig.to_compressed());
            }
        }
    }
}

impl Decode for Signature {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match Backend::decode_from(r)? {
            Backend::Mock => Ok(Signature::Mock(Hash32(r.array()?))),
            Backend::Bls => {
                let bytes: [u8; 48] = r.array()?;
                Option::from(G1Affine::from_compressed(&bytes))
                    .map(Signature::Bls)
                    .ok_or(CodecError::Invalid("malformed G1 point"))
            }
        }
    }
}

/// Sum of individual signatures on one message, plus the bitmap naming the
/// signers within an ordered key list.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AggregateSignature {
    pub point: Signature,
    pub signers: Bitmap,
}

impl Encode for AggregateSignature {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.point.encode_into(out);
        self.signers.encode_into(out);
    }
}

impl Decode for AggregateSignature {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let point = Signature::decode_from(r)?;
        let signers = Bitmap::decode_from(r)?;
        if signers.count_ones() == 0 {
            return Err(CodecError::Invalid("aggregate with empty signer set"));
        }
        Ok(AggregateSignature { point, signers })
    }
}

/// Signature over the encoding of a public key by its own secret key.
/// Guards aggregation against rogue-key registrations.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ProofOfPossession(pub Signature);

impl Encode for ProofOfPossession {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.0.encode_into(out);
    }
}

impl Decode for ProofOfPossession {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ProofOfPossession(Signature::decode_from(r)?))
    }
}

/// VRF output chaining block to block. The signature is its own proof.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Seed(pub Signature);

impl Seed {
    /// The chain's initial seed: a fixed tag hashed into the signature space.
    pub fn genesis(backend: Backend, tag: &[u8; 32]) -> Seed {
        match backend {
            Backend::Mock => Seed(Signature::Mock(sha256_parts(&[b"genesis-seed", tag]))),
            Backend::Bls => {
                let mut msg = Vec::with_capacity(44);
                msg.extend_from_slice(b"genesis-seed");
                msg.extend_from_slice(tag);
                Seed(Signature::Bls(G1Affine::from(bls::hash_to_g1(&msg))))
            }
        }
    }
}

impl Encode for Seed {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.0.encode_into(out);
    }
}

impl Decode for Seed {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Seed(Signature::decode_from(r)?))
    }
}

/// 256-bit unsigned value drawn from the seed chain, reduced by the
/// consumers (range tables, slot permutations) with an explicit modulus.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Entropy(pub [u8; 32]);

impl Entropy {
    /// Big-endian reduction modulo `m`. The bias is on the order of
    /// `m / 2^256` and is deliberately kept: the sampling algorithms are
    /// specified over this exact reduction.
    pub fn mod_u64(&self, m: u64) -> u64 {
        assert!(m > 0, "modulus must be positive");
        let mut acc: u128 = 0;
        for byte in self.0 {
            acc = ((acc << 8) | byte as u128) % m as u128;
        }
        acc as u64
    }

    pub fn low_u16(&self) -> u16 {
        u16::from_be_bytes([self.0[30], self.0[31]])
    }
}

/// Deterministically derive a keypair from caller-supplied entropy.
pub fn keygen(backend: Backend, entropy: &[u8; 32]) -> (SecretKey, PublicKey) {
    let sk = match backend {
        Backend::Mock => SecretKey::Mock(mock::secret_from_entropy(entropy)),
        Backend::Bls => SecretKey::Bls(bls::secret_from_entropy(entropy)),
    };
    let pk = sk.public();
    (sk, pk)
}

/// Deterministic signature on `message`.
pub fn sign(sk: &SecretKey, message: &[u8]) -> Signature {
    match sk {
        SecretKey::Mock(raw) => {
            let pk = mock::public_from_secret(raw);
            Signature::Mock(mock::sign(&pk, message))
        }
        SecretKey::Bls(scalar) => Signature::Bls(bls::sign(scalar, message)),
    }
}

/// True iff `sig` is the signature of `message` under the key matching `pk`.
/// Backend mismatches are plain failures, not errors.
pub fn verify(pk: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    match (pk, sig) {
        (PublicKey::Mock(pk), Signature::Mock(sig)) => mock::sign(pk, message) == *sig,
        (PublicKey::Bls(pk), Signature::Bls(sig)) => bls::verify(pk, message, sig),
        _ => false,
    }
}

/// Combine signatures into one aggregate, recording each signer's position
/// in a bitmap over a key list of `key_count` entries.
pub fn aggregate(
    sigs: &[Signature],
    positions: &[u32],
    key_count: usize,
) -> Result<AggregateSignature, CryptoError> {
    if sigs.is_empty() || sigs.len() != positions.len() {
        return Err(CryptoError::NothingToAggregate);
    }
    let mut signers = Bitmap::new(key_count);
    for &pos in positions {
        if pos as usize >= key_count {
            return Err(CryptoError::PositionOutOfRange);
        }
        if signers.get(pos as usize) {
            return Err(CryptoError::DuplicateSigner);
        }
        signers.set(pos as usize);
    }
    let backend = sigs[0].backend();
    if sigs.iter().any(|s| s.backend() != backend) {
        return Err(CryptoError::MixedBackends);
    }
    let point = match backend {
        Backend::Mock => {
            let values = sigs
                .iter()
                .map(|s| match s {
                    Signature::Mock(h) => *h,
                    Signature::Bls(_) => unreachable!(),
                })
                .collect();
            Signature::Mock(mock::combine(values))
        }
        Backend::Bls => Signature::Bls(bls::add_signatures(sigs.iter().map(|s| match s {
            Signature::Bls(p) => *p,
            Signature::Mock(_) => unreachable!(),
        }))),
    };
    Ok(AggregateSignature { point, signers })
}

/// Check an aggregate against the bitmap-selected subset of `keys`, all
/// having signed the same `message`.
pub fn aggregate_verify(
    keys: &[PublicKey],
    message: &[u8],
    agg: &AggregateSignature,
) -> Result<bool, CryptoError> {
    if agg.signers.len() != keys.len() {
        return Err(CryptoError::BitmapKeyListMismatch);
    }
    if agg.signers.count_ones() == 0 {
        return Ok(false);
    }
    match &agg.point {
        Signature::Mock(point) => {
            let mut values = Vec::with_capacity(agg.signers.count_ones());
            for i in agg.signers.iter_ones() {
                match &keys[i] {
                    PublicKey::Mock(pk) => values.push(mock::sign(pk, message)),
                    PublicKey::Bls(_) => return Ok(false),
                }
            }
            Ok(mock::combine(values) == *point)
        }
        Signature::Bls(point) => {
            let mut selected = Vec::with_capacity(agg.signers.count_ones());
            for i in agg.signers.iter_ones() {
                match &keys[i] {
                    PublicKey::Bls(pk) => selected.push(*pk),
                    PublicKey::Mock(_) => return Ok(false),
                }
            }
            let agg_key = bls::add_public_keys(selected.into_iter());
            Ok(bls::verify(&agg_key, message, point))
        }
    }
}

fn possession_message(pk: &PublicKey) -> Vec<u8> {
    let mut msg = Vec::new();
    msg.extend_from_slice(b"proof-of-possession/");
    pk.encode_into(&mut msg);
    msg
}

pub fn sign_proof_of_possession(sk: &SecretKey) -> ProofOfPossession {
    let pk = sk.public();
    ProofOfPossession(sign(sk, &possession_message(&pk)))
}

pub fn verify_proof_of_possession(pk: &PublicKey, pop: &ProofOfPossession) -> bool {
    verify(pk, &possession_message(pk), &pop.0)
}

/// Produce the next seed: the producer's signature over the previous one.
pub fn next_seed(sk: &SecretKey, prev: &Seed) -> Seed {
    Seed(sign(sk, &prev.encoded()))
}

pub fn verify_seed(pk: &PublicKey, prev: &Seed, claimed: &Seed) -> bool {
    verify(pk, &prev.encoded(), &claimed.0)
}

/// Draw 256 bits from a seed and counter: `hash(S || i)` with the counter
/// appended as 8 big-endian bytes.
pub fn seed_entropy(seed: &Seed, counter: u64) -> Entropy {
    let enc = seed.encoded();
    Entropy(sha256_parts(&[&enc, &counter.to_be_bytes()]).0)
}

/// Parse the key fixture format: one `secret_hex public_hex` pair per line.
/// Blank lines and `#` comments are skipped.
pub fn parse_key_file(backend: Backend, text: &str) -> Option<Vec<(SecretKey, PublicKey)>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let sk = SecretKey::from_hex(backend, fields.next()?)?;
        let pk_bytes = hex::decode(fields.next()?).ok()?;
        let pk = PublicKey::decode_all(&pk_bytes).ok()?;
        out.push((sk, pk));
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn both() -> [Backend; 2] {
        [Backend::Mock, Backend::Bls]
    }

    #[test]
    fn keygen_is_deterministic_and_distinct() {
        for backend in both() {
            let (ska, pka) = keygen(backend, &[7u8; 32]);
            let (skb, pkb) = keygen(backend, &[7u8; 32]);
            assert!(ska == skb && pka == pkb);
            let (_, pkc) = keygen(backend, &[8u8; 32]);
            assert_ne!(pka, pkc);
        }
    }

    #[test]
    fn sign_verify_round_trip_and_tamper() {
        for backend in both() {
            let (sk, pk) = keygen(backend, &[1u8; 32]);
            let sig = sign(&sk, b"hello");
            assert_eq!(sig, sign(&sk, b"hello"));
            assert!(verify(&pk, b"hello", &sig));
            assert!(!verify(&pk, b"hellp", &sig));
            let (_, other_pk) = keygen(backend, &[2u8; 32]);
            assert!(!verify(&other_pk, b"hello", &sig));
        }
    }

    #[test]
    fn mixed_backends_fail_closed() {
        let (sk_m, pk_m) = keygen(Backend::Mock, &[1u8; 32]);
        let (sk_b, pk_b) = keygen(Backend::Bls, &[1u8; 32]);
        assert!(!verify(&pk_b, b"m", &sign(&sk_m, b"m")));
        assert!(!verify(&pk_m, b"m", &sign(&sk_b, b"m")));
        assert_eq!(
            aggregate(&[sign(&sk_m, b"m"), sign(&sk_b, b"m")], &[0, 1], 2),
            Err(CryptoError::MixedBackends)
        );
    }

    #[test]
    fn single_signature_aggregate_is_identity_for_bls() {
        let (sk, pk) = keygen(Backend::Bls, &[3u8; 32]);
        let sig = sign(&sk, b"msg");
        let agg = aggregate(&[sig], &[0], 1).unwrap();
        assert_eq!(agg.point, sig);
        assert!(aggregate_verify(&[pk], b"msg", &agg).unwrap());
    }

    #[test]
    fn aggregate_argument_errors() {
        let (sk, _) = keygen(Backend::Mock, &[3u8; 32]);
        let sig = sign(&sk, b"m");
        assert_eq!(aggregate(&[], &[], 4), Err(CryptoError::NothingToAggregate));
        assert_eq!(
            aggregate(&[sig, sig], &[1, 1], 4),
            Err(CryptoError::DuplicateSigner)
        );
        assert_eq!(
            aggregate(&[sig], &[4], 4),
            Err(CryptoError::PositionOutOfRange)
        );
    }

    #[test]
    fn bitmap_mismatch_is_an_error() {
        let (sk, pk) = keygen(Backend::Mock, &[3u8; 32]);
        let agg = aggregate(&[sign(&sk, b"m")], &[0], 2).unwrap();
        assert_eq!(
            aggregate_verify(&[pk], b"m", &agg),
            Err(CryptoError::BitmapKeyListMismatch)
        );
    }

    #[test]
    fn false_signer_claim_fails() {
        for backend in both() {
            let keys: Vec<_> = (0u8..3).map(|i| keygen(backend, &[i; 32])).collect();
            let sigs = vec![sign(&keys[0].0, b"m"), sign(&keys[1].0, b"m")];
            let mut agg = aggregate(&sigs, &[0, 1], 3).unwrap();
            // Claim signer 2 as well, without folding in its signature.
            agg.signers.set(2);
            let pks: Vec<_> = keys.iter().map(|(_, pk)| *pk).collect();
            assert!(!aggregate_verify(&pks, b"m", &agg).unwrap());
        }
    }

    #[test]
    fn seed_chain_round_trip() {
        for backend in both() {
            let (sk, pk) = keygen(backend, &[9u8; 32]);
            let genesis = Seed::genesis(backend, &[0u8; 32]);
            let next = next_seed(&sk, &genesis);
            assert_eq!(next, next_seed(&sk, &genesis));
            assert!(verify_seed(&pk, &genesis, &next));
            let other = Seed::genesis(backend, &[1u8; 32]);
            assert!(!verify_seed(&pk, &other, &next));
            let (sk2, _) = keygen(backend, &[10u8; 32]);
            assert_ne!(next, next_seed(&sk2, &genesis));
        }
    }

    #[test]
    fn proof_of_possession_round_trip() {
        for backend in both() {
            let (sk, pk) = keygen(backend, &[4u8; 32]);
            let pop = sign_proof_of_possession(&sk);
            assert!(verify_proof_of_possession(&pk, &pop));
            let (_, other) = keygen(backend, &[5u8; 32]);
            assert!(!verify_proof_of_possession(&other, &pop));
        }
    }

    #[test]
    fn entropy_reduction_matches_wide_arithmetic() {
        let e = Entropy([0xFF; 32]);
        // 2^256 - 1 mod m, cross-checked by Fermat-style reduction of powers.
        let m = 1_000_003u64;
        let mut acc: u128 = 0;
        for _ in 0..32 {
            acc = ((acc << 8) | 0xFF) % m as u128;
        }
        assert_eq!(e.mod_u64(m), acc as u64);
        assert_eq!(Entropy([0; 32]).mod_u64(7), 0);
    }

    #[test]
    fn seed_entropy_counters_differ() {
        let seed = Seed::genesis(Backend::Mock, &[2u8; 32]);
        assert_eq!(seed_entropy(&seed, 0), seed_entropy(&seed, 0));
        assert_ne!(seed_entropy(&seed, 0), seed_entropy(&seed, 1));
    }

    #[test]
    fn key_encoding_round_trips() {
        for backend in both() {
            let (sk, pk) = keygen(backend, &[6u8; 32]);
            let sig = sign(&sk, b"enc");
            assert_eq!(PublicKey::decode_all(&pk.encoded()).unwrap(), pk);
            assert_eq!(Signature::decode_all(&sig.encoded()).unwrap(), sig);
            let sk2 = SecretKey::from_hex(backend, &sk.to_hex()).unwrap();
            assert_eq!(sk2.public(), pk);
        }
    }
}
