use std::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{tagged_hash, Domain};

/// Point of the 256-bit key space, stored big-endian so the derived byte
/// ordering equals integer ordering.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Key256(pub [u8; 32]);

impl Key256 {
    pub const ZERO: Key256 = Key256([0u8; 32]);
    pub const MAX: Key256 = Key256([0xff; 32]);

    pub fn from_u64(v: u64) -> Self {
        let mut out = [0u8; 32];
        out[24..].copy_from_slice(&v.to_be_bytes());
        Key256(out)
    }

    pub fn from_u128(v: u128) -> Self {
        let mut out = [0u8; 32];
        out[16..].copy_from_slice(&v.to_be_bytes());
        Key256(out)
    }

    /// Low 64 bits; exact when the key came from a test-scale space.
    pub fn low_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[24..].try_into().expect("8 bytes"))
    }

    pub fn to_biguint(&self) -> BigUint {
        BigUint::from_bytes_be(&self.0)
    }

    /// Fails when the value does not fit in 256 bits.
    pub fn from_biguint(v: &BigUint) -> Result<Self> {
        let bytes = v.to_bytes_be();
        if bytes.len() > 32 {
            return Err(Error::domain("value exceeds 256 bits"));
        }
        let mut out = [0u8; 32];
        out[32 - bytes.len()..].copy_from_slice(&bytes);
        Ok(Key256(out))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Projects a full-width key onto a test-scale space of `bits` bits by
    /// keeping the top `bits` bits.
    pub fn truncate_to(&self, bits: u32) -> Key256 {
        if bits >= 256 {
            return *self;
        }
        let v = self.to_biguint() >> (256 - bits as usize);
        Key256::from_biguint(&v).expect("shifted value fits")
    }
}

impl fmt::Debug for Key256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0[..24].iter().all(|b| *b == 0) {
            write!(f, "Key256({})", self.low_u64())
        } else {
            write!(f, "Key256(0x{}..)", &self.to_hex()[..16])
        }
    }
}

/// Maps an identifier to its position in the key space.
pub fn hash_key(input: &[u8]) -> Result<Key256> {
    if input.is_empty() {
        return Err(Error::domain("hash_key input must be non-empty"));
    }
    Ok(Key256(tagged_hash(Domain::Key, &[input]).0))
}

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
        pub struct $name(pub $inner);

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_newtype!(AccountId, u64, "acct");
id_newtype!(NodeId, u32, "node");
id_newtype!(ShardId, u32, "shard");
id_newtype!(TxId, u64, "tx");

/// Abstract simulation time.
pub type Tick = u64;

impl AccountId {
    pub fn key(&self) -> Key256 {
        hash_key(&self.0.to_be_bytes()).expect("8-byte input")
    }
}

impl NodeId {
    pub fn key(&self) -> Key256 {
        hash_key(&self.0.to_be_bytes()).expect("4-byte input")
    }
}
