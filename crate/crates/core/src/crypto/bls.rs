//! Pairing-based backend over BLS12-381.
//!
//! Signatures live in G1 (48-byte compressed), public keys in G2 (96-byte
//! compressed). Message hashing uses the standard simplified-SWU
//! hash-to-curve with SHA-256 expansion under the domain separation tag
//! below. A signature sigma on message m verifies iff
//! `e(sigma, G2) == e(H(m), pk)`, and aggregation is plain point addition.

use bls12_381::hash_to_curve::{ExpandMsgXmd, HashToCurve};
use bls12_381::{pairing, G1Affine, G1Projective, G2Affine, G2Projective, Scalar};

use crate::hash::sha256_parts;

pub const DST: &[u8] = b"SPECBFT-V01-CS01-with-BLS12381G1_XMD:SHA-256_SSWU_RO_";

pub fn hash_to_g1(message: &[u8]) -> G1Projective {
    <G1Projective as HashToCurve<ExpandMsgXmd<sha2::Sha256>>>::hash_to_curve(message, DST)
}

/// Map 32 bytes of entropy onto a nonzero scalar.
pub fn secret_from_entropy(entropy: &[u8; 32]) -> Scalar {
    let lo = sha256_parts(&[b"bls/sk/0", entropy]).0;
    let hi = sha256_parts(&[b"bls/sk/1", entropy]).0;
    let mut wide = [0u8; 64];
    wide[..32].copy_from_slice(&lo);
    wide[32..].copy_from_slice(&hi);
    let scalar = Scalar::from_bytes_wide(&wide);
    if scalar == Scalar::zero() {
        Scalar::one()
    } else {
        scalar
    }
}

pub fn public_from_secret(sk: &Scalar) -> G2Affine {
    G2Affine::from(G2Projective::generator() * sk)
}

pub fn sign(sk: &Scalar, message: &[u8]) -> G1Affine {
    G1Affine::from(hash_to_g1(message) * sk)
}

pub fn verify(pk: &G2Affine, message: &[u8], sig: &G1Affine) -> bool {
    // Identity points never verify; they would pass the pairing equation
    // trivially for an identity public key.
    if bool::from(sig.is_identity()) || bool::from(pk.is_identity()) {
        return false;
    }
    let h = G1Affine::from(hash_to_g1(message));
    pairing(sig, &G2Affine::generator()) == pairing(&h, pk)
}

pub fn add_signatures(sigs: impl Iterator<Item = G1Affine>) -> G1Affine {
    let mut acc = G1Projective::identity();
    for s in sigs {
        acc += G1Projective::from(s);
    }
    G1Affine::from(acc)
}

pub fn add_public_keys(keys: impl Iterator<Item = G2Affine>) -> G2Affine {
    let mut acc = G2Projective::identity();
    for k in keys {
        acc += G2Projective::from(k);
    }
    G2Affine::from(acc)
}
