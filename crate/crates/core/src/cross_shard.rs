//! Three-phase cross-shard transfers: lock on the source with a Merkle
//! proof-of-lock, stage a tentative credit on the destination, then commit
//! or roll back both legs.
//!
//! Each helper here seals one finalized block on the shard(s) it touches,
//! standing in for a consensus instance. The simulator drives the same
//! ledger entries through real committees.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Hash256;
use crate::model::{
    AccountId, ApplyError, Block, BlockBuilder, BlockSizing, Effect, Entry, LedgerParams, LockRecord, LockRole, NodeId,
    ProofOfLock, PushError, ShardId, ShardState, Tick, Transaction, TxId,
};

/// Block parameters used when a helper seals a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEnv {
    pub limit_bytes: u64,
    pub sizing: BlockSizing,
    pub params: LedgerParams,
    pub proposer: NodeId,
}

impl Default for BlockEnv {
    fn default() -> Self {
        BlockEnv {
            limit_bytes: 1 << 20,
            sizing: BlockSizing::default(),
            params: LedgerParams::default(),
            proposer: NodeId(0),
        }
    }
}

/// Outcome of sealing a list of entries.
#[derive(Debug, Clone)]
pub struct Sealed {
    pub block: Arc<Block>,
    pub effects: Vec<Effect>,
    pub rejected: Vec<(Entry, ApplyError)>,
}

/// Packs `entries` (skipping those that do not apply) into one block at
/// `now` and appends it to `state`.
pub fn seal_entries(state: &mut ShardState, entries: Vec<Entry>, now: Tick, env: &BlockEnv) -> Result<Sealed> {
    let mut builder = BlockBuilder::new(state, now, env.proposer, env.limit_bytes, env.sizing, env.params);
    let mut effects = builder.expiry_effects().to_vec();
    let mut rejected = Vec::new();
    for e in entries {
        match builder.try_push(e.clone()) {
            Ok(fx) => effects.push(fx),
            Err(PushError::Full) => return Err(Error::domain("entries exceed the block size limit")),
            Err(PushError::Rejected(err)) => rejected.push((e, err)),
        }
    }
    let block = Arc::new(builder.finish());
    let applied = state
        .apply_block(block.clone(), env.limit_bytes, &env.params)
        .map_err(|e| Error::invariant(format!("sealed block failed re-validation: {e:?}")))?;
    debug_assert_eq!(applied, effects);
    Ok(Sealed {
        block,
        effects,
        rejected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockOutcome {
    Acquired,
    Conflict(TxId),
}

/// All-or-nothing lock acquisition on `accounts` for `tx`.
pub fn acquire_locks(
    state: &mut ShardState,
    accounts: &[AccountId],
    tx: TxId,
    now: Tick,
    params: &LedgerParams,
) -> Result<LockOutcome> {
    Ok(
        match state
            .ledger
            .acquire_locks(accounts, tx, now, params, LockRole::Source)?
        {
            Ok(()) => LockOutcome::Acquired,
            Err(holder) => LockOutcome::Conflict(holder),
        },
    )
}

/// `(T, P_T, M_root)` sent from the source to the destination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockMessage {
    pub tx: Transaction,
    pub proof: ProofOfLock,
}

impl LockMessage {
    pub fn root(&self) -> Hash256 {
        self.proof.root
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    BadProof,
    StaleProof,
    LockConflict,
    NotOwned,
    AlreadyAborted,
    Insufficient,
    /// Acknowledgements missing when the source lock expired.
    Timeout,
    /// Fault injected by the scenario.
    Injected,
    Other,
}

impl RejectReason {
    /// Whether the source may retry after this rejection.
    pub fn retryable(self) -> bool {
        matches!(self, RejectReason::LockConflict)
    }

    pub fn from_apply(err: &ApplyError) -> Self {
        match err {
            ApplyError::BadProof => RejectReason::BadProof,
            ApplyError::StaleProof => RejectReason::StaleProof,
            ApplyError::Locked { .. } => RejectReason::LockConflict,
            ApplyError::NotOwned(_) | ApplyError::WrongShard => RejectReason::NotOwned,
            ApplyError::AlreadyAborted(_) => RejectReason::AlreadyAborted,
            ApplyError::Insufficient => RejectReason::Insufficient,
            _ => RejectReason::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ack {
    Validated,
    Rejected(RejectReason),
}

impl Ack {
    pub fn is_validated(self) -> bool {
        self == Ack::Validated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum XPhase {
    Locking,
    Validating,
    Committing,
    Finalized,
    Aborted,
}

/// Phase timestamps for latency analysis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifecycle {
    pub submitted: Tick,
    pub locked: Option<Tick>,
    pub acked: Option<Tick>,
    pub source_decided: Option<Tick>,
    pub done: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossShardTx {
    pub tx: Transaction,
    pub phase: XPhase,
    pub proof: Option<ProofOfLock>,
    pub acks: BTreeMap<ShardId, Ack>,
    pub attempt: u32,
    pub batch: Option<u64>,
    pub times: Lifecycle,
    pub abort_reason: Option<RejectReason>,
}

impl CrossShardTx {
    pub fn new(tx: Transaction) -> Self {
        let submitted = tx.submitted_at;
        CrossShardTx {
            tx,
            phase: XPhase::Locking,
            proof: None,
            acks: BTreeMap::new(),
            attempt: 1,
            batch: None,
            times: Lifecycle {
                submitted,
                ..Lifecycle::default()
            },
            abort_reason: None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.phase, XPhase::Finalized | XPhase::Aborted)
    }

    fn abort(&mut self, reason: RejectReason, now: Tick) {
        self.phase = XPhase::Aborted;
        self.abort_reason = Some(reason);
        self.times.done = Some(now);
    }

    /// Records an acknowledgement; returns the decision once every
    /// participating shard answered.
    pub fn record_ack(&mut self, shard: ShardId, ack: Ack, now: Tick) -> Option<Decision> {
        self.acks.insert(shard, ack);
        self.times.acked.get_or_insert(now);
        if self.acks.contains_key(&self.tx.dest_shard) {
            self.phase = XPhase::Committing;
            Some(commit_decision(self.phase_validated(), ack.is_validated()))
        } else {
            None
        }
    }

    fn phase_validated(&self) -> bool {
        self.proof.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Commit,
    Abort,
}

/// `C(T) = V_a(T) * V_b(T)`.
pub fn commit_decision(source_valid: bool, dest_valid: bool) -> Decision {
    if source_valid && dest_valid {
        Decision::Commit
    } else {
        Decision::Abort
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitiateOutcome {
    /// Lock block finalized; the message is ready for the destination.
    Sent(LockMessage),
    /// Insufficient balance or bad routing: aborted, no lock.
    Aborted(RejectReason),
    /// Sender already locked by another transaction.
    Conflict(TxId),
}

/// Phase 1: seals a block with the lock entry on the source and builds the
/// proof over the post-lock leaves.
pub fn initiate(ctx: &mut CrossShardTx, source: &mut ShardState, now: Tick, env: &BlockEnv) -> Result<InitiateOutcome> {
    if !ctx.tx.is_cross() {
        return Err(Error::domain(format!("{} is not cross-shard", ctx.tx.id)));
    }
    let sealed = seal_entries(source, vec![Entry::Lock(ctx.tx.clone())], now, env)?;
    if let Some((_, err)) = sealed.rejected.first() {
        return Ok(match err {
            ApplyError::Locked { holder, .. } => InitiateOutcome::Conflict(*holder),
            other => {
                ctx.abort(RejectReason::from_apply(other), now);
                InitiateOutcome::Aborted(RejectReason::from_apply(other))
            }
        });
    }
    let expires_at = sealed
        .effects
        .iter()
        .find_map(|fx| match fx {
            Effect::Locked { tx, expires_at } if *tx == ctx.tx.id => Some(*expires_at),
            _ => None,
        })
        .ok_or_else(|| Error::invariant("lock entry produced no lock effect"))?;
    let msg = lock_message(source, &ctx.tx, expires_at)?;
    ctx.proof = Some(msg.proof.clone());
    ctx.phase = XPhase::Validating;
    ctx.times.locked = Some(now);
    Ok(InitiateOutcome::Sent(msg))
}

/// Proof-of-lock for `tx` against the source's current head.
pub fn lock_message(source: &ShardState, tx: &Transaction, expires_at: Tick) -> Result<LockMessage> {
    let tree = source
        .ledger
        .merkle_tree()
        .ok_or_else(|| Error::invariant("locked shard has no leaves"))?;
    let proof = source
        .ledger
        .proof_for(&tree, tx.sender, source.height(), expires_at)
        .ok_or_else(|| Error::invariant(format!("no leaf for sender {}", tx.sender)))?;
    Ok(LockMessage { tx: tx.clone(), proof })
}

/// Phase 2: verifies the proof and stages the credit in a destination
/// block.
pub fn validate_and_execute(msg: &LockMessage, dest: &mut ShardState, now: Tick, env: &BlockEnv) -> Result<Ack> {
    let entry = Entry::Stage {
        tx: msg.tx.clone(),
        proof: Box::new(msg.proof.clone()),
    };
    let sealed = seal_entries(dest, vec![entry], now, env)?;
    Ok(match sealed.rejected.first() {
        None => Ack::Validated,
        Some((_, err)) => Ack::Rejected(RejectReason::from_apply(err)),
    })
}

/// Phase 3 for a single transaction.
pub fn finalize(
    ctx: &mut CrossShardTx,
    source: &mut ShardState,
    dest: &mut ShardState,
    now: Tick,
    env: &BlockEnv,
) -> Result<XPhase> {
    let mut shards = BTreeMap::new();
    let (s, d) = (source.shard(), dest.shard());
    shards.insert(s, std::mem::replace(source, placeholder(s)));
    shards.insert(d, std::mem::replace(dest, placeholder(d)));
    let res = finalize_batch(std::slice::from_mut(ctx), &mut shards, now, env);
    *source = shards.remove(&s).expect("inserted");
    *dest = shards.remove(&d).expect("inserted");
    res?;
    Ok(ctx.phase)
}

fn placeholder(shard: ShardId) -> ShardState {
    ShardState::genesis(crate::model::Ledger::new(shard, crate::partition::Range::full()), 0)
}

/// Phase 3 for a batch: every decision touching a shard goes into a single
/// block on that shard. Missing acknowledgements count as a timeout.
pub fn finalize_batch(
    ctxs: &mut [CrossShardTx],
    shards: &mut BTreeMap<ShardId, ShardState>,
    now: Tick,
    env: &BlockEnv,
) -> Result<()> {
    let mut per_shard: BTreeMap<ShardId, Vec<Entry>> = BTreeMap::new();
    let mut decisions = Vec::with_capacity(ctxs.len());
    for ctx in ctxs.iter() {
        if ctx.is_terminal() {
            decisions.push(None);
            continue;
        }
        let dest_ack = ctx.acks.get(&ctx.tx.dest_shard).copied();
        let decision = commit_decision(ctx.proof.is_some(), dest_ack.is_some_and(Ack::is_validated));
        let entry = |tx: &Transaction| match decision {
            Decision::Commit => Entry::Commit(tx.clone()),
            Decision::Abort => Entry::Abort(tx.clone()),
        };
        if ctx.proof.is_some() {
            per_shard.entry(ctx.tx.source_shard).or_default().push(entry(&ctx.tx));
        }
        if dest_ack.is_some_and(Ack::is_validated) {
            per_shard.entry(ctx.tx.dest_shard).or_default().push(entry(&ctx.tx));
        }
        let reason = match dest_ack {
            Some(Ack::Rejected(r)) => r,
            _ => RejectReason::Timeout,
        };
        decisions.push(Some((decision, reason)));
    }
    let mut failed: BTreeSet<TxId> = BTreeSet::new();
    for (shard, entries) in per_shard {
        let state = shards
            .get_mut(&shard)
            .ok_or_else(|| Error::domain(format!("no state for {shard}")))?;
        let sealed = seal_entries(state, entries, now, env)?;
        failed.extend(sealed.rejected.iter().map(|(e, _)| e.tx().id));
    }
    for (ctx, d) in ctxs.iter_mut().zip(decisions) {
        let Some((decision, reason)) = d else { continue };
        ctx.batch = Some(now);
        ctx.times.source_decided = Some(now);
        match decision {
            Decision::Commit if !failed.contains(&ctx.tx.id) => {
                ctx.phase = XPhase::Finalized;
                ctx.times.done = Some(now);
            }
            Decision::Commit => ctx.abort(RejectReason::Timeout, now),
            Decision::Abort => ctx.abort(reason, now),
        }
    }
    Ok(())
}

/// Lock-failure backoff parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub base: Tick,
    pub max_delay: Tick,
    pub max_attempts: u32,
    pub fee_weight: f64,
    /// Fee that counts as 1.0 after normalisation.
    pub fee_norm: u64,
    pub jitter_lo: f64,
    pub jitter_hi: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base: 4,
            max_delay: 512,
            max_attempts: 6,
            fee_weight: 1.0,
            fee_norm: 10,
            jitter_lo: 0.75,
            jitter_hi: 1.25,
        }
    }
}

/// Backoff before attempt `attempt + 1`, or `None` once `attempt` reached
/// the limit.
pub fn retry_delay(attempt: u32, fee: u64, jitter: f64, policy: &RetryPolicy) -> Option<Tick> {
    if attempt == 0 || attempt >= policy.max_attempts {
        return None;
    }
    let growth = (policy.base as f64) * 2f64.powi(attempt as i32 - 1) * jitter;
    let norm_fee = fee as f64 / policy.fee_norm.max(1) as f64;
    let d = growth / (1.0 + policy.fee_weight * norm_fee);
    Some((d.round() as Tick).clamp(1, policy.max_delay.max(1)))
}

/// [`retry_delay`] with jitter drawn from `rng`.
pub fn retry_schedule<R: Rng + ?Sized>(attempt: u32, fee: u64, policy: &RetryPolicy, rng: &mut R) -> Option<Tick> {
    let jitter = if policy.jitter_hi > policy.jitter_lo {
        rng.random_range(policy.jitter_lo..policy.jitter_hi)
    } else {
        policy.jitter_lo
    };
    retry_delay(attempt, fee, jitter, policy)
}

/// Seals an empty block at `now`, which drops every lock with
/// `expires_at <= now`, and returns the released records.
pub fn expire_locks(state: &mut ShardState, now: Tick, env: &BlockEnv) -> Result<Vec<LockRecord>> {
    if state.ledger.locks().all(|l| l.expires_at > now) {
        return Ok(Vec::new());
    }
    let sealed = seal_entries(state, Vec::new(), now, env)?;
    Ok(sealed
        .effects
        .into_iter()
        .filter_map(|fx| match fx {
            Effect::SourceExpired(l) | Effect::DestLockExpired(l) => Some(l),
            _ => None,
        })
        .collect())
}

/// Aborts every context whose source lock is among `released`.
pub fn abort_expired(ctxs: &mut [CrossShardTx], released: &[LockRecord], now: Tick) -> Vec<TxId> {
    let holders: BTreeSet<TxId> = released
        .iter()
        .filter(|l| l.role == LockRole::Source)
        .map(|l| l.holder)
        .collect();
    let mut out = Vec::new();
    for ctx in ctxs.iter_mut() {
        if !ctx.is_terminal() && holders.contains(&ctx.tx.id) {
            ctx.abort(RejectReason::Timeout, now);
            out.push(ctx.tx.id);
        }
    }
    out
}
