//! Deterministic keyed-hash backend.
//!
//! Signatures are `H(tag || key-tag || message)` where the key tag is the
//! public key, itself derived from the secret key by hashing. Verification
//! recomputes the same value from public data, which gives the scheme all the
//! observable properties the protocol relies on (determinism, round trips,
//! cross-key rejection, order-independent aggregation) without any group
//! arithmetic. It is not unforgeable against an outside attacker and exists
//! purely to make large simulations cheap.

use alloc::vec::Vec;

use crate::hash::{sha256_parts, Hash32};

const SK_TAG: &[u8] = b"mock/sk";
const PK_TAG: &[u8] = b"mock/pk";
const SIG_TAG: &[u8] = b"mock/sig";
const AGG_TAG: &[u8] = b"mock/agg";

pub fn secret_from_entropy(entropy: &[u8; 32]) -> [u8; 32] {
    sha256_parts(&[SK_TAG, entropy]).0
}

pub fn public_from_secret(sk: &[u8; 32]) -> [u8; 32] {
    sha256_parts(&[PK_TAG, sk]).0
}

pub fn sign(pk: &[u8; 32], message: &[u8]) -> Hash32 {
    sha256_parts(&[SIG_TAG, pk, message])
}

/// Order-independent combination: hash over the sorted signature values.
pub fn combine(mut sigs: Vec<Hash32>) -> Hash32 {
    sigs.sort_unstable();
    let mut parts: Vec<&[u8]> = Vec::with_capacity(sigs.len() + 1);
    parts.push(AGG_TAG);
    for s in &sigs {
        parts.push(&s.0);
    }
    sha256_parts(&parts)
}
