//! Binary Merkle tree over byte-string leaves.
//!
//! Leaves hash as `H(0x00 || item)`, inner nodes as `H(0x01 || left || right)`,
//! and an odd node at any level is paired with a copy of itself. The root of
//! an empty list is defined as `H("")`.

use alloc::vec::Vec;

use crate::encoding::{CodecError, Decode, Encode, Reader};
use crate::hash::{sha256, sha256_parts, Hash32};

const LEAF_PREFIX: &[u8] = &[0x00];
const NODE_PREFIX: &[u8] = &[0x01];

pub fn leaf_hash(item: &[u8]) -> Hash32 {
    sha256_parts(&[LEAF_PREFIX, item])
}

pub fn node_hash(left: &Hash32, right: &Hash32) -> Hash32 {
    sha256_parts(&[NODE_PREFIX, &left.0, &right.0])
}

pub fn empty_root() -> Hash32 {
    sha256(b"")
}

pub fn merkle_root(items: &[Vec<u8>]) -> Hash32 {
    merkle_root_iter(items.iter().map(|i| i.as_slice()))
}

pub fn merkle_root_iter<'a>(items: impl Iterator<Item = &'a [u8]>) -> Hash32 {
    let mut level: Vec<Hash32> = items.map(leaf_hash).collect();
    if level.is_empty() {
        return empty_root();
    }
    while level.len() > 1 {
        level = reduce(&level);
    }
    level[0]
}

fn reduce(level: &[Hash32]) -> Vec<Hash32> {
    let mut next = Vec::with_capacity(level.len().div_ceil(2));
    for pair in level.chunks(2) {
        let right = pair.get(1).unwrap_or(&pair[0]);
        next.push(node_hash(&pair[0], right));
    }
    next
}

/// Inclusion proof: the sibling path from a leaf to the root.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MerkleProof {
    pub leaf_index: u64,
    pub leaf_count: u64,
    pub path: Vec<Hash32>,
}

impl Encode for MerkleProof {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.leaf_index.encode_into(out);
        self.leaf_count.encode_into(out);
        self.path.encode_into(out);
    }
}

impl Decode for MerkleProof {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(MerkleProof {
            leaf_index: u64::decode_from(r)?,
            leaf_count: u64::decode_from(r)?,
            path: Vec::decode_from(r)?,
        })
    }
}

/// Build the inclusion proof for `items[index]`.
pub fn merkle_prove(items: &[Vec<u8>], index: usize) -> Option<MerkleProof> {
    if index >= items.len() {
        return None;
    }
    let mut level: Vec<Hash32> = items.iter().map(|i| leaf_hash(i)).collect();
    let mut path = Vec::new();
    let mut pos = index;
    while level.len() > 1 {
        let sibling = if pos % 2 == 0 {
            *level.get(pos + 1).unwrap_or(&level[pos])
        } else {
            level[pos - 1]
        };
        path.push(sibling);
        level = reduce(&level);
        pos /= 2;
    }
    Some(MerkleProof {
        leaf_index: index as u64,
        leaf_count: items.len() as u64,
        path,
    })
}

/// Check that `item` sits at the proof's position under `root`.
pub fn merkle_verify(root: &Hash32, item: &[u8], proof: &MerkleProof) -> bool {
    if proof.leaf_count == 0 || proof.leaf_index >= proof.leaf_count {
        return false;
    }
    let mut width = proof.leaf_count;
    let mut pos = proof.leaf_index;
    let mut acc = leaf_hash(item);
    for sibling in &proof.path {
        if width <= 1 {
            return false;
        }
        // An odd node at the end of a level pairs with itself, so the
        // recorded sibling must equal the running hash there.
        if pos % 2 == 0 && pos == width - 1 && *sibling != acc {
            return false;
        }
        acc = if pos % 2 == 0 {
            node_hash(&acc, sibling)
        } else {
            node_hash(sibling, &acc)
        };
        pos /= 2;
        width = width.div_ceil(2);
    }
    width == 1 && acc == *root
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn empty_root_is_hash_of_empty_string() {
        assert_eq!(merkle_root(&[]), sha256(b""));
    }

    #[test]
    fn single_leaf_root_is_leaf_hash() {
        let item = b"only".to_vec();
        assert_eq!(merkle_root(&[item.clone()]), leaf_hash(&item));
    }

    #[test]
    fn four_leaves_match_manual_two_level_build() {
        let items: Vec<Vec<u8>> = (0u8..4).map(|i| vec![i]).collect();
        let l: Vec<Hash32> = items.iter().map(|i| leaf_hash(i)).collect();
        let manual = node_hash(&node_hash(&l[0], &l[1]), &node_hash(&l[2], &l[3]));
        assert_eq!(merkle_root(&items), manual);
    }

    #[test]
    fn odd_level_duplicates_last() {
        let items: Vec<Vec<u8>> = (0u8..3).map(|i| vec![i]).collect();
        let l: Vec<Hash32> = items.iter().map(|i| leaf_hash(i)).collect();
        let manual = node_hash(&node_hash(&l[0], &l[1]), &node_hash(&l[2], &l[2]));
        assert_eq!(merkle_root(&items), manual);
    }

    #[test]
    fn proofs_verify_and_reject_tampering() {
        for count in 1usize..=9 {
            let items: Vec<Vec<u8>> = (0..count).map(|i| vec![i as u8, 42]).collect();
            let root = merkle_root(&items);
            for (i, item) in items.iter().enumerate() {
                let proof = merkle_prove(&items, i).unwrap();
                assert!(merkle_verify(&root, item, &proof), "count={count} i={i}");
                assert!(!merkle_verify(&root, b"other", &proof));
                let mut wrong = proof.clone();
                wrong.leaf_index = (wrong.leaf_index + 1) % count as u64;
                if count > 1 {
                    assert!(!merkle_verify(&root, item, &wrong));
                }
            }
        }
    }
}
