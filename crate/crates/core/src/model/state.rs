//! Per-shard ledger: balances, lock table, staged cross-shard credits and
//! the finalized chain. All mutation goes through [`Ledger::apply_entry`],
//! which is the single state-transition function shared by block proposers,
//! validators and the canonical chain.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::block::{Block, Entry};
use super::key::{AccountId, Key256, ShardId, Tick, TxId};
use super::merkle::{merkle_verify, MerkleProof, MerkleTree};
use super::tx::{Transaction, TxKind};
use crate::error::{Error, Result};
use crate::hash::{Encoder, Hash256};
use crate::partition::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum LockMode {
    #[default]
    FineGrained,
    FullShard,
}

/// Which leg of a cross-shard transaction holds the lock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LockRole {
    Source,
    Dest,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LockRecord {
    pub account: AccountId,
    pub holder: TxId,
    pub acquired_at: Tick,
    pub expires_at: Tick,
    pub mode: LockMode,
    pub role: LockRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedCredit {
    pub tx: TxId,
    pub receiver: AccountId,
    pub amount: u64,
    pub source: ShardId,
}

/// One Merkle leaf: `(account id, balance, lock flag)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeafData {
    pub account: AccountId,
    pub balance: u64,
    pub locked: bool,
}

impl LeafData {
    pub fn encode(&self) -> Vec<u8> {
        Encoder::new()
            .u64(self.account.0)
            .u64(self.balance)
            .u8(self.locked as u8)
            .finish()
    }
}

/// Proof that the sender's leaf, with its lock flag set, is included under a
/// finalized state root of the source shard.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProofOfLock {
    pub source: ShardId,
    pub leaf: LeafData,
    pub proof: MerkleProof,
    pub root: Hash256,
    pub source_height: u64,
    pub expires_at: Tick,
}

impl ProofOfLock {
    pub fn verify(&self) -> bool {
        merkle_verify(&self.proof, &self.leaf.encode(), &self.root)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerParams {
    pub lock_ttl: Tick,
    pub mode: LockMode,
}

impl Default for LedgerParams {
    fn default() -> Self {
        LedgerParams {
            lock_ttl: 200,
            mode: LockMode::FineGrained,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApplyError {
    NotOwned(AccountId),
    WrongShard,
    WrongKind,
    Locked {
        account: AccountId,
        holder: TxId,
    },
    Insufficient,
    NoLock,
    NoStaged,
    BadProof,
    StaleProof,
    Duplicate(TxId),
    /// The coordinator already aborted this transaction.
    AlreadyAborted(TxId),
}

/// Observable outcome of applying an entry or a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Transferred {
        tx: TxId,
        fee: u64,
    },
    Locked {
        tx: TxId,
        expires_at: Tick,
    },
    Staged {
        tx: TxId,
    },
    SourceCommitted {
        tx: TxId,
        debit: u64,
        fee: u64,
    },
    DestCommitted {
        tx: TxId,
        credit: u64,
    },
    SourceAborted {
        tx: TxId,
    },
    DestAborted {
        tx: TxId,
    },
    SourceExpired(LockRecord),
    /// The destination lock lapsed; the staged credit stays until the
    /// coordinator's decision arrives.
    DestLockExpired(LockRecord),
}

/// Mutable state of a shard, without its chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub shard: ShardId,
    pub range: Range,
    balances: BTreeMap<AccountId, u64>,
    order: BTreeMap<Key256, AccountId>,
    keys: HashMap<AccountId, Key256>,
    locks: BTreeMap<AccountId, LockRecord>,
    shard_lock: Option<LockRecord>,
    staged: BTreeMap<TxId, StagedCredit>,
    seen_roots: BTreeMap<(ShardId, AccountId), u64>,
    // Aborts that arrived before the matching stage.
    tombstones: BTreeSet<TxId>,
    burned: u64,
}

impl Ledger {
    pub fn new(shard: ShardId, range: Range) -> Self {
        Ledger {
            shard,
            range,
            balances: BTreeMap::new(),
            order: BTreeMap::new(),
            keys: HashMap::new(),
            locks: BTreeMap::new(),
            shard_lock: None,
            staged: BTreeMap::new(),
            seen_roots: BTreeMap::new(),
            tombstones: BTreeSet::new(),
            burned: 0,
        }
    }

    fn key_of(&self, account: AccountId) -> Key256 {
        self.keys.get(&account).copied().unwrap_or_else(|| account.key())
    }

    pub fn range(&self) -> Range {
        self.range
    }

    pub fn owns(&self, account: AccountId) -> bool {
        self.range.contains(&self.key_of(account))
    }

    /// Adds (or overwrites) an account at genesis or during migration.
    pub fn insert_account(&mut self, account: AccountId, balance: u64) -> Result<()> {
        let key = self.key_of(account);
        self.insert_keyed(account, key, balance)
    }

    /// Like [`Ledger::insert_account`] with an explicit key; used by narrow
    /// test key spaces.
    pub fn insert_keyed(&mut self, account: AccountId, key: Key256, balance: u64) -> Result<()> {
        if !self.range.contains(&key) {
            return Err(Error::Routing {
                account,
                shard: self.shard,
            });
        }
        self.keys.insert(account, key);
        self.order.insert(key, account);
        self.balances.insert(account, balance);
        Ok(())
    }

    pub fn remove_account(&mut self, account: AccountId) -> Option<u64> {
        let bal = self.balances.remove(&account)?;
        if let Some(key) = self.keys.remove(&account) {
            self.order.remove(&key);
        }
        Some(bal)
    }

    pub fn key(&self, account: AccountId) -> Key256 {
        self.key_of(account)
    }

    pub fn balance(&self, account: AccountId) -> u64 {
        self.balances.get(&account).copied().unwrap_or(0)
    }

    pub fn balances(&self) -> &BTreeMap<AccountId, u64> {
        &self.balances
    }

    pub fn accounts_by_key(&self) -> impl Iterator<Item = (Key256, AccountId)> + '_ {
        self.order.iter().map(|(k, a)| (*k, *a))
    }

    pub fn total_balance(&self) -> u128 {
        self.balances.values().map(|b| *b as u128).sum()
    }

    pub fn staged_total(&self) -> u128 {
        self.staged.values().map(|s| s.amount as u128).sum()
    }

    pub fn staged(&self) -> &BTreeMap<TxId, StagedCredit> {
        &self.staged
    }

    pub fn burned(&self) -> u64 {
        self.burned
    }

    /// Carries burned fees over from a ledger retired by a merge.
    pub fn absorb_burned(&mut self, amount: u64) {
        self.burned += amount;
    }

    /// No live lock and no staged credit.
    pub fn is_quiescent(&self) -> bool {
        self.live_lock_count() == 0 && self.staged.is_empty()
    }

    pub fn locks(&self) -> impl Iterator<Item = &LockRecord> {
        self.locks.values().chain(self.shard_lock.iter())
    }

    pub fn live_lock_count(&self) -> usize {
        self.locks.len() + self.shard_lock.is_some() as usize
    }

    pub fn lock_of(&self, account: AccountId) -> Option<&LockRecord> {
        self.locks
            .get(&account)
            .or(self.shard_lock.as_ref().filter(|l| l.account == account))
    }

    pub fn is_locked(&self, account: AccountId) -> bool {
        self.lock_of(account).is_some()
    }

    /// Holder of the lock that would block `account` under `mode`.
    pub fn blocking_holder(&self, account: AccountId, mode: LockMode) -> Option<TxId> {
        match mode {
            LockMode::FineGrained => self.locks.get(&account).map(|l| l.holder),
            LockMode::FullShard => self
                .shard_lock
                .as_ref()
                .map(|l| l.holder)
                .or_else(|| self.locks.get(&account).map(|l| l.holder)),
        }
    }

    fn holds(&self, account: AccountId, tx: TxId) -> bool {
        self.locks.get(&account).is_some_and(|l| l.holder == tx)
            || self
                .shard_lock
                .as_ref()
                .is_some_and(|l| l.holder == tx && l.account == account)
    }

    fn release(&mut self, account: AccountId, tx: TxId) {
        if self.locks.get(&account).is_some_and(|l| l.holder == tx) {
            self.locks.remove(&account);
        }
        if self.shard_lock.as_ref().is_some_and(|l| l.holder == tx) {
            self.shard_lock = None;
        }
    }

    fn set_lock(&mut self, record: LockRecord) {
        match record.mode {
            LockMode::FineGrained => {
                self.locks.insert(record.account, record);
            }
            LockMode::FullShard => self.shard_lock = Some(record),
        }
    }

    fn check_free(&self, account: AccountId, mode: LockMode) -> Result<(), ApplyError> {
        match self.blocking_holder(account, mode) {
            Some(holder) => Err(ApplyError::Locked { account, holder }),
            None => Ok(()),
        }
    }

    fn check_owned(&self, account: AccountId) -> Result<(), ApplyError> {
        if self.owns(account) {
            Ok(())
        } else {
            Err(ApplyError::NotOwned(account))
        }
    }

    /// Removes every lock with `expires_at <= now`.
    pub fn expire_locks(&mut self, now: Tick) -> Vec<Effect> {
        let mut expired: Vec<LockRecord> = self.locks.values().filter(|l| l.expires_at <= now).cloned().collect();
        for l in &expired {
            self.locks.remove(&l.account);
        }
        if self.shard_lock.as_ref().is_some_and(|l| l.expires_at <= now) {
            expired.push(self.shard_lock.take().expect("checked"));
        }
        expired.sort_by_key(|l| (l.expires_at, l.holder));
        expired
            .into_iter()
            .map(|l| match l.role {
                LockRole::Source => Effect::SourceExpired(l),
                LockRole::Dest => Effect::DestLockExpired(l),
            })
            .collect()
    }

    /// Acquires locks on every account in `accounts` for `tx`, or none.
    pub fn acquire_locks(
        &mut self,
        accounts: &[AccountId],
        tx: TxId,
        now: Tick,
        params: &LedgerParams,
        role: LockRole,
    ) -> Result<Result<(), TxId>> {
        for a in accounts {
            if !self.owns(*a) {
                return Err(Error::Routing {
                    account: *a,
                    shard: self.shard,
                });
            }
        }
        for a in accounts {
            if let Some(holder) = self.blocking_holder(*a, params.mode) {
                return Ok(Err(holder));
            }
        }
        // Full-shard mode keeps a single shard-wide record, nominally owned
        // by the first account.
        let count = match params.mode {
            LockMode::FineGrained => accounts.len(),
            LockMode::FullShard => 1,
        };
        for a in &accounts[..count.min(accounts.len())] {
            self.set_lock(LockRecord {
                account: *a,
                holder: tx,
                acquired_at: now,
                expires_at: now + params.lock_ttl.max(1),
                mode: params.mode,
                role,
            });
        }
        Ok(Ok(()))
    }

    fn debit(&mut self, account: AccountId, amount: u64) -> Result<(), ApplyError> {
        let bal = self.balances.get_mut(&account).ok_or(ApplyError::Insufficient)?;
        if *bal < amount {
            return Err(ApplyError::Insufficient);
        }
        *bal -= amount;
        Ok(())
    }

    fn credit(&mut self, account: AccountId, amount: u64) {
        if !self.balances.contains_key(&account) {
            let key = self.key_of(account);
            self.keys.insert(account, key);
            self.order.insert(key, account);
        }
        *self.balances.entry(account).or_insert(0) += amount;
    }

    /// Applies one block entry at block time `ts`. On error the ledger is
    /// left untouched.
    pub fn apply_entry(&mut self, entry: &Entry, ts: Tick, params: &LedgerParams) -> Result<Effect, ApplyError> {
        match entry {
            Entry::Transfer(tx) => {
                if tx.kind != TxKind::IntraShard {
                    return Err(ApplyError::WrongKind);
                }
                if tx.source_shard != self.shard {
                    return Err(ApplyError::WrongShard);
                }
                self.check_owned(tx.sender)?;
                self.check_owned(tx.receiver)?;
                self.check_free(tx.sender, params.mode)?;
                self.check_free(tx.receiver, params.mode)?;
                if self.balance(tx.sender) < tx.total_debit() {
                    return Err(ApplyError::Insufficient);
                }
                self.debit(tx.sender, tx.total_debit())?;
                self.credit(tx.receiver, tx.amount);
                self.burned += tx.fee;
                Ok(Effect::Transferred { tx: tx.id, fee: tx.fee })
            }
            Entry::Lock(tx) => {
                if tx.kind != TxKind::CrossShard {
                    return Err(ApplyError::WrongKind);
                }
                if tx.source_shard != self.shard {
                    return Err(ApplyError::WrongShard);
                }
                self.check_owned(tx.sender)?;
                self.check_free(tx.sender, params.mode)?;
                if self.balance(tx.sender) < tx.total_debit() {
                    return Err(ApplyError::Insufficient);
                }
                let expires_at = ts + params.lock_ttl.max(1);
                self.set_lock(LockRecord {
                    account: tx.sender,
                    holder: tx.id,
                    acquired_at: ts,
                    expires_at,
                    mode: params.mode,
                    role: LockRole::Source,
                });
                Ok(Effect::Locked { tx: tx.id, expires_at })
            }
            Entry::Stage { tx, proof } => {
                if tx.kind != TxKind::CrossShard {
                    return Err(ApplyError::WrongKind);
                }
                if tx.dest_shard != self.shard {
                    return Err(ApplyError::WrongShard);
                }
                self.check_owned(tx.receiver)?;
                if self.staged.contains_key(&tx.id) {
                    return Err(ApplyError::Duplicate(tx.id));
                }
                if self.tombstones.contains(&tx.id) {
                    return Err(ApplyError::AlreadyAborted(tx.id));
                }
                check_proof(tx, proof)?;
                let seen_key = (proof.source, tx.sender);
                if self.seen_roots.get(&seen_key).is_some_and(|h| *h > proof.source_height) {
                    return Err(ApplyError::StaleProof);
                }
                self.check_free(tx.receiver, params.mode)?;
                self.seen_roots.insert(seen_key, proof.source_height);
                self.set_lock(LockRecord {
                    account: tx.receiver,
                    holder: tx.id,
                    acquired_at: ts,
                    expires_at: ts + params.lock_ttl.max(1),
                    mode: params.mode,
                    role: LockRole::Dest,
                });
                self.staged.insert(
                    tx.id,
                    StagedCredit {
                        tx: tx.id,
                        receiver: tx.receiver,
                        amount: tx.amount,
                        source: tx.source_shard,
                    },
                );
                Ok(Effect::Staged { tx: tx.id })
            }
            Entry::Commit(tx) => {
                if tx.source_shard == self.shard {
                    if !self.holds(tx.sender, tx.id) {
                        return Err(ApplyError::NoLock);
                    }
                    self.debit(tx.sender, tx.total_debit())?;
                    self.burned += tx.fee;
                    self.release(tx.sender, tx.id);
                    Ok(Effect::SourceCommitted {
                        tx: tx.id,
                        debit: tx.total_debit(),
                        fee: tx.fee,
                    })
                } else if tx.dest_shard == self.shard {
                    let staged = self.staged.remove(&tx.id).ok_or(ApplyError::NoStaged)?;
                    self.credit(staged.receiver, staged.amount);
                    self.release(tx.receiver, tx.id);
                    Ok(Effect::DestCommitted {
                        tx: tx.id,
                        credit: staged.amount,
                    })
                } else {
                    Err(ApplyError::WrongShard)
                }
            }
            Entry::Abort(tx) => {
                if tx.source_shard == self.shard {
                    if !self.holds(tx.sender, tx.id) {
                        return Err(ApplyError::NoLock);
                    }
                    self.release(tx.sender, tx.id);
                    Ok(Effect::SourceAborted { tx: tx.id })
                } else if tx.dest_shard == self.shard {
                    if self.staged.remove(&tx.id).is_some() {
                        self.release(tx.receiver, tx.id);
                    } else if !self.tombstones.insert(tx.id) {
                        return Err(ApplyError::Duplicate(tx.id));
                    }
                    Ok(Effect::DestAborted { tx: tx.id })
                } else {
                    Err(ApplyError::WrongShard)
                }
            }
        }
    }

    /// Merkle leaves sorted by account key.
    pub fn merkle_leaves(&self) -> Vec<LeafData> {
        self.order
            .values()
            .map(|a| LeafData {
                account: *a,
                balance: self.balance(*a),
                locked: self.is_locked(*a),
            })
            .collect()
    }

    pub fn merkle_tree(&self) -> Option<MerkleTree> {
        let leaves: Vec<Vec<u8>> = self.merkle_leaves().iter().map(LeafData::encode).collect();
        if leaves.is_empty() {
            None
        } else {
            Some(MerkleTree::build(&leaves).expect("non-empty"))
        }
    }

    /// Merkle root of the leaves; the zero hash for a shard with no accounts.
    pub fn state_root(&self) -> Hash256 {
        self.merkle_tree().map_or(Hash256::ZERO, |t| t.root())
    }

    pub fn leaf_index(&self, account: AccountId) -> Option<usize> {
        let key = self.keys.get(&account)?;
        Some(self.order.range(..*key).count())
    }

    /// Builds a proof for `account`'s current leaf against `tree` (which
    /// must have been built from this ledger).
    pub fn proof_for(
        &self,
        tree: &MerkleTree,
        account: AccountId,
        source_height: u64,
        expires_at: Tick,
    ) -> Option<ProofOfLock> {
        let idx = self.leaf_index(account)?;
        Some(ProofOfLock {
            source: self.shard,
            leaf: LeafData {
                account,
                balance: self.balance(account),
                locked: self.is_locked(account),
            },
            proof: tree.prove(idx).ok()?,
            root: tree.root(),
            source_height,
            expires_at,
        })
    }
}

/// Checks that `proof` attests `tx`'s sender is locked with enough funds.
pub fn check_proof(tx: &Transaction, proof: &ProofOfLock) -> Result<(), ApplyError> {
    if proof.leaf.account != tx.sender
        || proof.source != tx.source_shard
        || !proof.leaf.locked
        || proof.leaf.balance < tx.total_debit()
        || !proof.verify()
    {
        return Err(ApplyError::BadProof);
    }
    Ok(())
}

/// A shard's ledger together with its finalized chain.
#[derive(Debug, Clone)]
pub struct ShardState {
    pub ledger: Ledger,
    chain: Vec<Arc<Block>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvalidBlock {
    WrongShard,
    WrongHeight { expected: u64, got: u64 },
    BadParent,
    Oversize { size: u64, limit: u64 },
    DuplicateTx(TxId),
    Entry { index: usize, error: ApplyError },
    StateRoot,
}

impl ShardState {
    /// Creates the shard with a genesis block over `ledger`.
    pub fn genesis(ledger: Ledger, timestamp: Tick) -> Self {
        let root = ledger.state_root();
        let block = Block::genesis(ledger.shard, root, timestamp);
        ShardState {
            ledger,
            chain: vec![Arc::new(block)],
        }
    }

    pub fn shard(&self) -> ShardId {
        self.ledger.shard
    }

    pub fn head(&self) -> &Arc<Block> {
        self.chain.last().expect("chain has genesis")
    }

    pub fn height(&self) -> u64 {
        self.head().height()
    }

    pub fn chain(&self) -> &[Arc<Block>] {
        &self.chain
    }

    /// Re-executes `block` on a copy of the ledger and returns the post-state
    /// and effects when the block is a valid child of the head.
    pub fn validate(
        &self,
        block: &Block,
        limit_bytes: u64,
        params: &LedgerParams,
    ) -> Result<(Ledger, Vec<Effect>), InvalidBlock> {
        if block.shard() != self.shard() {
            return Err(InvalidBlock::WrongShard);
        }
        if block.height() != self.height() + 1 {
            return Err(InvalidBlock::WrongHeight {
                expected: self.height() + 1,
                got: block.height(),
            });
        }
        if block.parent_hash() != self.head().hash() || block.timestamp() < self.head().timestamp() {
            return Err(InvalidBlock::BadParent);
        }
        if block.size_bytes() > limit_bytes {
            return Err(InvalidBlock::Oversize {
                size: block.size_bytes(),
                limit: limit_bytes,
            });
        }
        let mut ids = std::collections::HashSet::new();
        for e in block.entries() {
            if !ids.insert(e.tx().id) {
                return Err(InvalidBlock::DuplicateTx(e.tx().id));
            }
        }
        let mut post = self.ledger.clone();
        let mut effects = post.expire_locks(block.timestamp());
        for (index, e) in block.entries().iter().enumerate() {
            match post.apply_entry(e, block.timestamp(), params) {
                Ok(fx) => effects.push(fx),
                Err(error) => return Err(InvalidBlock::Entry { index, error }),
            }
        }
        if post.state_root() != block.state_root() {
            return Err(InvalidBlock::StateRoot);
        }
        Ok((post, effects))
    }

    /// Appends a block previously accepted by [`ShardState::validate`].
    pub fn append(&mut self, block: Arc<Block>, post: Ledger) {
        debug_assert_eq!(block.parent_hash(), self.head().hash());
        self.ledger = post;
        self.chain.push(block);
    }

    /// Validates and appends in one step.
    pub fn apply_block(
        &mut self,
        block: Arc<Block>,
        limit_bytes: u64,
        params: &LedgerParams,
    ) -> Result<Vec<Effect>, InvalidBlock> {
        let (post, effects) = self.validate(&block, limit_bytes, params)?;
        self.append(block, post);
        Ok(effects)
    }

    /// Appends a system block recording an out-of-band state change
    /// (epoch migration). The ledger must already hold the new state.
    pub fn seal_reconfiguration(&mut self, timestamp: Tick) {
        let head = self.head().clone();
        let block = Block::system(
            self.shard(),
            head.height() + 1,
            head.hash(),
            timestamp.max(head.timestamp()),
            self.ledger.state_root(),
        );
        self.chain.push(Arc::new(block));
    }

    /// Checks parent links, heights and that the head's root matches the
    /// ledger.
    pub fn verify_chain(&self) -> Result<()> {
        for pair in self.chain.windows(2) {
            if pair[1].parent_hash() != pair[0].hash() || pair[1].height() != pair[0].height() + 1 {
                return Err(Error::invariant(format!(
                    "{}: broken link at height {}",
                    self.shard(),
                    pair[1].height()
                )));
            }
        }
        if self.head().state_root() != self.ledger.state_root() {
            return Err(Error::invariant(format!(
                "{}: head state root does not match ledger",
                self.shard()
            )));
        }
        Ok(())
    }
}
