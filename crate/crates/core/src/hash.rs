//! The single hash primitive used across the engine.
//!
//! Every digest is SHA-256 over a one-byte domain tag followed by the
//! canonical encoding of the hashed value. Tags keep Merkle leaves, interior
//! nodes, key derivation and commitments in disjoint preimage spaces.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Domain-separation tags. The first four values are part of the
/// wire/golden-file contract and must never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    Leaf = 0x00,
    Interior = 0x01,
    Key = 0x02,
    Commitment = 0x03,
    Block = 0x04,
    Prf = 0x05,
    Trace = 0x06,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Hash256(pub [u8; 32]);

impl Hash256 {
    pub const ZERO: Hash256 = Hash256([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First eight bytes as a big-endian integer; handy for seeding and
    /// short digests.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().expect("32-byte hash"))
    }

    /// Returns the hash with bit `bit` (0 = most significant) flipped.
    pub fn with_bit_flipped(&self, bit: usize) -> Hash256 {
        let mut out = self.0;
        out[bit / 8] ^= 0x80 >> (bit % 8);
        Hash256(out)
    }
}

impl fmt::Debug for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash256({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Plain SHA-256 with no domain tag. Only used to pin the primitive against
/// its published test vectors.
pub fn sha256(data: &[u8]) -> Hash256 {
    Hash256(Sha256::digest(data).into())
}

/// SHA-256 of `tag || parts[0] || parts[1] || ...`.
pub fn tagged_hash(domain: Domain, parts: &[&[u8]]) -> Hash256 {
    let mut hasher = Sha256::new();
    hasher.update([domain as u8]);
    for part in parts {
        hasher.update(part);
    }
    Hash256(hasher.finalize().into())
}

/// Canonical byte encoding: integers are fixed-width big-endian, byte
/// strings are prefixed by their length as a `u32`.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(mut self, v: u8) -> Self {
        self.buf.push(v);
        self
    }

    pub fn u32(mut self, v: u32) -> Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u128(mut self, v: u128) -> Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bytes(mut self, v: &[u8]) -> Self {
        let len = u32::try_from(v.len()).expect("field longer than u32::MAX");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(v);
        self
    }

    pub fn hash(mut self, h: &Hash256) -> Self {
        self.buf.extend_from_slice(&h.0);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}
