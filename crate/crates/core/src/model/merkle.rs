//! Binary Merkle tree with domain-separated leaf and interior hashing.
//! A layer with an odd number of nodes pairs its last node with itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{tagged_hash, Domain, Hash256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    /// The sibling sits to the left of the running hash.
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_index: usize,
    pub siblings: Vec<(Hash256, Side)>,
}

pub fn leaf_hash(leaf: &[u8]) -> Hash256 {
    tagged_hash(Domain::Leaf, &[leaf])
}

pub fn interior_hash(left: &Hash256, right: &Hash256) -> Hash256 {
    tagged_hash(Domain::Interior, &[&left.0, &right.0])
}

/// All layers of a tree, leaves first. Built once, then queried for the
/// root and for any number of proofs.
#[derive(Debug, Clone)]
pub struct MerkleTree {
    layers: Vec<Vec<Hash256>>,
}

impl MerkleTree {
    pub fn build<L: AsRef<[u8]>>(leaves: &[L]) -> Result<Self> {
        if leaves.is_empty() {
            return Err(Error::domain("merkle tree needs at least one leaf"));
        }
        Ok(Self::from_leaf_hashes(
            leaves.iter().map(|l| leaf_hash(l.as_ref())).collect(),
        ))
    }

    fn from_leaf_hashes(first: Vec<Hash256>) -> Self {
        let mut layers = vec![first];
        while layers.last().map_or(0, Vec::len) > 1 {
            let prev = layers.last().expect("non-empty");
            let next = prev
                .chunks(2)
                .map(|pair| match pair {
                    [l, r] => interior_hash(l, r),
                    [l] => interior_hash(l, l),
                    _ => unreachable!("chunks(2)"),
                })
                .collect();
            layers.push(next);
        }
        MerkleTree { layers }
    }

    pub fn root(&self) -> Hash256 {
        self.layers.last().expect("non-empty")[0]
    }

    pub fn leaf_count(&self) -> usize {
        self.layers[0].len()
    }

    pub fn prove(&self, index: usize) -> Result<MerkleProof> {
        if index >= self.leaf_count() {
            return Err(Error::domain(format!(
                "leaf index {index} out of bounds for {} leaves",
                self.leaf_count()
            )));
        }
        let mut siblings = Vec::with_capacity(self.layers.len() - 1);
        let mut idx = index;
        for layer in &self.layers[..self.layers.len() - 1] {
            let entry = if idx % 2 == 1 {
                (layer[idx - 1], Side::Left)
            } else {
                let sib = layer.get(idx + 1).unwrap_or(&layer[idx]);
                (*sib, Side::Right)
            };
            siblings.push(entry);
            idx /= 2;
        }
        Ok(MerkleProof {
            leaf_index: index,
            siblings,
        })
    }
}

pub fn merkle_root<L: AsRef<[u8]>>(leaves: &[L]) -> Result<Hash256> {
    Ok(MerkleTree::build(leaves)?.root())
}

pub fn merkle_prove<L: AsRef<[u8]>>(leaves: &[L], index: usize) -> Result<MerkleProof> {
    if index >= leaves.len() {
        return Err(Error::domain(format!(
            "leaf index {index} out of bounds for {} leaves",
            leaves.len()
        )));
    }
    MerkleTree::build(leaves)?.prove(index)
}

/// Folds `leaf` up through the proof. Side flags must agree with the bits of
/// `leaf_index`; any disagreement is treated as a malformed proof.
pub fn merkle_verify(proof: &MerkleProof, leaf: &[u8], root: &Hash256) -> bool {
    let mut acc = leaf_hash(leaf);
    let mut idx = proof.leaf_index;
    for (sibling, side) in &proof.siblings {
        let expected = if idx % 2 == 1 { Side::Left } else { Side::Right };
        if *side != expected {
            return false;
        }
        acc = match side {
            Side::Left => interior_hash(sibling, &acc),
            Side::Right => interior_hash(&acc, sibling),
        };
        idx /= 2;
    }
    idx == 0 && acc == *root
}
