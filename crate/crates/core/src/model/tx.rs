use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::key::{AccountId, Key256, ShardId, Tick, TxId};
use crate::error::{Error, Result};
use crate::hash::{tagged_hash, Domain, Encoder, Hash256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxKind {
    IntraShard,
    CrossShard,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxId,
    pub sender: AccountId,
    pub receiver: AccountId,
    pub amount: u64,
    /// Priority weight; burned at finalization.
    pub fee: u64,
    pub kind: TxKind,
    pub source_shard: ShardId,
    pub dest_shard: ShardId,
    pub submitted_at: Tick,
}

impl Transaction {
    /// Builds a transaction, deriving `kind` from the shard pair.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: TxId,
        sender: AccountId,
        receiver: AccountId,
        amount: u64,
        fee: u64,
        source_shard: ShardId,
        dest_shard: ShardId,
        submitted_at: Tick,
    ) -> Self {
        let kind = if source_shard == dest_shard {
            TxKind::IntraShard
        } else {
            TxKind::CrossShard
        };
        Transaction {
            id,
            sender,
            receiver,
            amount,
            fee,
            kind,
            source_shard,
            dest_shard,
            submitted_at,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let intra = self.source_shard == self.dest_shard;
        match (self.kind, intra) {
            (TxKind::IntraShard, true) | (TxKind::CrossShard, false) => Ok(()),
            _ => Err(Error::domain(format!(
                "{}: kind {:?} inconsistent with shards {} -> {}",
                self.id, self.kind, self.source_shard, self.dest_shard
            ))),
        }
    }

    /// Updates routing after the range table changed.
    pub fn reroute(&mut self, source: ShardId, dest: ShardId) {
        self.source_shard = source;
        self.dest_shard = dest;
        self.kind = if source == dest {
            TxKind::IntraShard
        } else {
            TxKind::CrossShard
        };
    }

    pub fn is_cross(&self) -> bool {
        self.kind == TxKind::CrossShard
    }

    /// Debit applied to the sender when the transaction finalizes.
    pub fn total_debit(&self) -> u64 {
        self.amount.saturating_add(self.fee)
    }

    /// Key used to route the transaction (and its paired data item) to a
    /// shard: the sender's account key.
    pub fn routing_key(&self) -> Key256 {
        self.sender.key()
    }

    pub fn encode(&self) -> Vec<u8> {
        Encoder::new()
            .u64(self.id.0)
            .u64(self.sender.0)
            .u64(self.receiver.0)
            .u64(self.amount)
            .u64(self.fee)
            .u8(match self.kind {
                TxKind::IntraShard => 0,
                TxKind::CrossShard => 1,
            })
            .u32(self.source_shard.0)
            .u32(self.dest_shard.0)
            .u64(self.submitted_at)
            .finish()
    }

    /// h(T): digest over the full canonical encoding.
    pub fn digest(&self) -> Hash256 {
        tagged_hash(Domain::Block, &[b"tx", &self.encode()])
    }
}

/// Heap entry ordered by (fee desc, id asc).
#[derive(Debug, Clone, PartialEq, Eq)]
struct Prioritized(Transaction);

impl Ord for Prioritized {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.fee.cmp(&other.0.fee).then_with(|| other.0.id.cmp(&self.0.id))
    }
}

impl PartialOrd for Prioritized {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Pending-transaction pool popped in (fee desc, id asc) order.
#[derive(Debug, Clone, Default)]
pub struct TxQueue {
    heap: BinaryHeap<Prioritized>,
}

impl TxQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tx: Transaction) {
        self.heap.push(Prioritized(tx));
    }

    pub fn pop(&mut self) -> Option<Transaction> {
        self.heap.pop().map(|p| p.0)
    }

    pub fn peek(&self) -> Option<&Transaction> {
        self.heap.peek().map(|p| &p.0)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn drain(&mut self) -> impl Iterator<Item = Transaction> + '_ {
        self.heap.drain().map(|p| p.0)
    }
}

impl FromIterator<Transaction> for TxQueue {
    fn from_iter<I: IntoIterator<Item = Transaction>>(iter: I) -> Self {
        TxQueue {
            heap: iter.into_iter().map(Prioritized).collect(),
        }
    }
}
