//! Ledger types: keys, accounts, transactions, blocks, per-shard state and
//! the Merkle tree used for cross-shard proofs.

mod block;
mod key;
mod merkle;
mod state;
mod tx;

pub use block::{form_block, Block, BlockBuilder, BlockSizing, Entry, FormedBlock, PushError, SYSTEM_PROPOSER};
pub use key::{hash_key, AccountId, Key256, NodeId, ShardId, Tick, TxId};
pub use merkle::{interior_hash, leaf_hash, merkle_prove, merkle_root, merkle_verify, MerkleProof, MerkleTree, Side};
pub use state::{
    check_proof, ApplyError, Effect, InvalidBlock, LeafData, Ledger, LedgerParams, LockMode, LockRecord, LockRole,
    ProofOfLock, ShardState, StagedCredit,
};
pub use tx::{Transaction, TxKind, TxQueue};
