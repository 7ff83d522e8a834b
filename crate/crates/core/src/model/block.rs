use serde::{Deserialize, Serialize};

use super::key::{NodeId, ShardId, Tick};
use super::state::{ApplyError, Effect, Ledger, LedgerParams, ProofOfLock, ShardState};
use super::tx::{Transaction, TxKind, TxQueue};
use crate::hash::{tagged_hash, Domain, Encoder, Hash256};

/// Proposer id recorded on genesis and reconfiguration blocks.
pub const SYSTEM_PROPOSER: NodeId = NodeId(u32::MAX);

/// Byte accounting for block size limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSizing {
    pub header_bytes: u64,
    pub entry_bytes: u64,
}

impl Default for BlockSizing {
    fn default() -> Self {
        BlockSizing {
            header_bytes: 128,
            entry_bytes: 256,
        }
    }
}

impl BlockSizing {
    pub fn size_of(&self, entries: usize) -> u64 {
        self.header_bytes + self.entry_bytes * entries as u64
    }

    /// Number of entries that fit under `limit`.
    pub fn capacity(&self, limit: u64) -> usize {
        if limit < self.header_bytes || self.entry_bytes == 0 {
            return 0;
        }
        ((limit - self.header_bytes) / self.entry_bytes) as usize
    }
}

/// One state transition carried by a block. Every variant references the
/// transaction it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Entry {
    /// Intra-shard transfer.
    Transfer(Transaction),
    /// Cross-shard phase 1 on the source shard.
    Lock(Transaction),
    /// Cross-shard phase 2 on the destination: verified proof-of-lock and a
    /// tentative credit.
    Stage { tx: Transaction, proof: Box<ProofOfLock> },
    /// Phase 3 commit on either shard.
    Commit(Transaction),
    /// Phase 3 rollback on either shard.
    Abort(Transaction),
}

impl Entry {
    pub fn tx(&self) -> &Transaction {
        match self {
            Entry::Transfer(tx) | Entry::Lock(tx) | Entry::Commit(tx) | Entry::Abort(tx) | Entry::Stage { tx, .. } => {
                tx
            }
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Entry::Transfer(_) => "transfer",
            Entry::Lock(_) => "lock",
            Entry::Stage { .. } => "stage",
            Entry::Commit(_) => "commit",
            Entry::Abort(_) => "abort",
        }
    }

    fn encode(&self) -> Vec<u8> {
        let enc = Encoder::new().bytes(self.tag().as_bytes()).bytes(&self.tx().encode());
        match self {
            Entry::Stage { proof, .. } => enc.hash(&proof.root).u64(proof.source_height).finish(),
            _ => enc.finish(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    shard: ShardId,
    height: u64,
    parent_hash: Hash256,
    timestamp: Tick,
    entries: Vec<Entry>,
    state_root: Hash256,
    proposer: NodeId,
    size_bytes: u64,
    digest: Hash256,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        shard: ShardId,
        height: u64,
        parent_hash: Hash256,
        timestamp: Tick,
        entries: Vec<Entry>,
        state_root: Hash256,
        proposer: NodeId,
        sizing: &BlockSizing,
    ) -> Self {
        let size_bytes = sizing.size_of(entries.len());
        let mut block = Block {
            shard,
            height,
            parent_hash,
            timestamp,
            entries,
            state_root,
            proposer,
            size_bytes,
            digest: Hash256::ZERO,
        };
        block.digest = block.compute_digest();
        block
    }

    pub fn genesis(shard: ShardId, state_root: Hash256, timestamp: Tick) -> Self {
        Self::system(shard, 0, Hash256::ZERO, timestamp, state_root)
    }

    pub(crate) fn system(
        shard: ShardId,
        height: u64,
        parent_hash: Hash256,
        timestamp: Tick,
        state_root: Hash256,
    ) -> Self {
        Block::new(
            shard,
            height,
            parent_hash,
            timestamp,
            Vec::new(),
            state_root,
            SYSTEM_PROPOSER,
            &BlockSizing::default(),
        )
    }

    fn compute_digest(&self) -> Hash256 {
        let mut enc = Encoder::new()
            .u32(self.shard.0)
            .u64(self.height)
            .hash(&self.parent_hash)
            .u64(self.timestamp)
            .hash(&self.state_root)
            .u32(self.proposer.0)
            .u64(self.size_bytes)
            .u32(self.entries.len() as u32);
        for e in &self.entries {
            enc = enc.bytes(&e.encode());
        }
        tagged_hash(Domain::Block, &[&enc.finish()])
    }

    pub fn hash(&self) -> Hash256 {
        self.digest
    }

    pub fn shard(&self) -> ShardId {
        self.shard
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn parent_hash(&self) -> Hash256 {
        self.parent_hash
    }

    pub fn timestamp(&self) -> Tick {
        self.timestamp
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn txs(&self) -> impl Iterator<Item = &Transaction> {
        self.entries.iter().map(Entry::tx)
    }

    pub fn state_root(&self) -> Hash256 {
        self.state_root
    }

    pub fn proposer(&self) -> NodeId {
        self.proposer
    }

    pub fn size_bytes(&self) -> u64 {
        self.size_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PushError {
    Full,
    Rejected(ApplyError),
}

/// Packs entries on top of a tentative copy of the parent ledger so that
/// every accepted entry is known to apply cleanly.
#[derive(Debug, Clone)]
pub struct BlockBuilder {
    shard: ShardId,
    height: u64,
    parent_hash: Hash256,
    timestamp: Tick,
    proposer: NodeId,
    capacity: usize,
    sizing: BlockSizing,
    params: LedgerParams,
    ledger: Ledger,
    entries: Vec<Entry>,
    effects: Vec<Effect>,
}

impl BlockBuilder {
    /// Starts a child of `state`'s head. Lock expiry for `timestamp` is
    /// applied before any entry, exactly as validators will.
    pub fn new(
        state: &ShardState,
        timestamp: Tick,
        proposer: NodeId,
        limit_bytes: u64,
        sizing: BlockSizing,
        params: LedgerParams,
    ) -> Self {
        let head = state.head();
        let mut ledger = state.ledger.clone();
        let timestamp = timestamp.max(head.timestamp());
        let effects = ledger.expire_locks(timestamp);
        BlockBuilder {
            shard: state.shard(),
            height: head.height() + 1,
            parent_hash: head.hash(),
            timestamp,
            proposer,
            capacity: sizing.capacity(limit_bytes),
            sizing,
            params,
            ledger,
            entries: Vec::new(),
            effects,
        }
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn remaining(&self) -> usize {
        self.capacity.saturating_sub(self.entries.len())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamp(&self) -> Tick {
        self.timestamp
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Effects of lock expiry at this block's timestamp.
    pub fn expiry_effects(&self) -> &[Effect] {
        &self.effects
    }

    pub fn try_push(&mut self, entry: Entry) -> Result<Effect, PushError> {
        if self.is_full() {
            return Err(PushError::Full);
        }
        if self.entries.iter().any(|e| e.tx().id == entry.tx().id) {
            return Err(PushError::Rejected(ApplyError::Duplicate(entry.tx().id)));
        }
        let fx = self
            .ledger
            .apply_entry(&entry, self.timestamp, &self.params)
            .map_err(PushError::Rejected)?;
        self.entries.push(entry);
        Ok(fx)
    }

    pub fn finish(self) -> Block {
        Block::new(
            self.shard,
            self.height,
            self.parent_hash,
            self.timestamp,
            self.entries,
            self.ledger.state_root(),
            self.proposer,
            &self.sizing,
        )
    }
}

/// Result of greedy block formation.
#[derive(Debug, Clone)]
pub struct FormedBlock {
    pub block: Block,
    /// Transactions that can never apply (insufficient balance, bad routing).
    pub rejected: Vec<(Transaction, ApplyError)>,
    /// Transactions blocked by a lock; they were pushed back onto the queue.
    pub deferred: Vec<Transaction>,
}

/// Greedily packs `pending` in (fee desc, id asc) order until the next
/// transaction would exceed `limit_bytes`. Intra-shard transactions become
/// transfers, cross-shard ones become phase-1 locks.
#[allow(clippy::too_many_arguments)]
pub fn form_block(
    pending: &mut TxQueue,
    limit_bytes: u64,
    sizing: BlockSizing,
    parent: &ShardState,
    proposer: NodeId,
    now: Tick,
    params: LedgerParams,
) -> FormedBlock {
    let mut builder = BlockBuilder::new(parent, now, proposer, limit_bytes, sizing, params);
    let mut rejected = Vec::new();
    let mut deferred = Vec::new();
    while !builder.is_full() {
        let Some(tx) = pending.pop() else { break };
        let entry = match tx.kind {
            TxKind::IntraShard => Entry::Transfer(tx.clone()),
            TxKind::CrossShard => Entry::Lock(tx.clone()),
        };
        match builder.try_push(entry) {
            Ok(_) => {}
            Err(PushError::Full) => {
                pending.push(tx);
                break;
            }
            Err(PushError::Rejected(ApplyError::Locked { .. })) => deferred.push(tx),
            Err(PushError::Rejected(err)) => rejected.push((tx, err)),
        }
    }
    for tx in &deferred {
        pending.push(tx.clone());
    }
    FormedBlock {
        block: builder.finish(),
        rejected,
        deferred,
    }
}
