//! The sharded network: per-shard committees running the replica state
//! machine over the simulated network, mempools, cross-shard relays,
//! epoch transitions and the trace. One instance is single-owner and fully
//! determined by its configuration.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::limiter::RateLimiter;
use super::queue::EventQueue;
use super::trace::Trace;
use super::NetworkModel;
use crate::config::{Behavior, ScenarioConfig};
use crate::consensus::{
    weighted_select, ConsensusMsg, ConsensusState, Output, Payload, Phase, ReputationScore, ReputationWeights, Timing,
    ValidatorSet,
};
use crate::cross_shard::{retry_schedule, Ack, LockMessage, RejectReason, RetryPolicy};
use crate::epoch::{plan_reconfiguration, skew_of, transition_epoch, EpochConfig, EpochState};
use crate::error::{Error, Result};
use crate::hash::Hash256;
use crate::model::{
    AccountId, Block, BlockBuilder, BlockSizing, Effect, Entry, Key256, Ledger, LedgerParams, NodeId, PushError,
    ShardId, ShardState, Tick, Transaction, TxId, SYSTEM_PROPOSER,
};
use crate::partition::RangeTable;
use crate::prf::Prf;
use crate::randomness::{phase_deadline, run_round, AggregationMode, BeaconStrategy, Randomness};

/// Genesis input for one run.
#[derive(Debug, Clone)]
pub struct Genesis {
    pub table: RangeTable,
    /// Key per account id; accounts are `0..keys.len()`.
    pub keys: Vec<Key256>,
    pub balance: u64,
    /// Timed stream, sorted by submission tick, ids `0..len`.
    pub txs: Vec<(Transaction, bool)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxStatus {
    Pending,
    /// Cross-shard transaction past its source lock.
    InFlight,
    Finalized(Tick),
    Aborted(Tick, RejectReason),
    /// Refused at admission by the rate limiter.
    Refused(Tick),
}

impl TxStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, TxStatus::Pending | TxStatus::InFlight)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxOutcome {
    pub id: TxId,
    pub cross: bool,
    pub spam: bool,
    pub submitted: Tick,
    pub status: TxStatus,
    pub attempts: u32,
    /// Ticks spent backing off after lock conflicts.
    pub lock_wait: Tick,
}

impl TxOutcome {
    pub fn finalized_at(&self) -> Option<Tick> {
        match self.status {
            TxStatus::Finalized(t) => Some(t),
            _ => None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.status.is_terminal()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub at: Tick,
    pub workloads: BTreeMap<ShardId, u64>,
    pub sigma_before: f64,
    pub sigma_after: f64,
    pub actions: Vec<String>,
    pub committees: Vec<(ShardId, String)>,
    pub beacon_retries: u32,
    pub withheld: usize,
}

/// A run that stopped on an error, with whatever trace it had.
#[derive(Debug, Clone)]
pub struct SimFailure {
    pub error: Error,
    pub trace: Option<Trace>,
}

/// Raw results of a run.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub txs: Vec<TxOutcome>,
    pub blocks: u64,
    pub rounds_total: u64,
    pub round_changes: u64,
    pub messages: u64,
    pub escalations: u64,
    pub invalid_proposals: u64,
    pub dest_lock_expiries: u64,
    pub epochs: Vec<EpochSummary>,
    pub trace: Trace,
    pub quiescent: bool,
    pub end_tick: Tick,
    pub genesis_total: u128,
    pub final_total: u128,
    pub live_locks: usize,
    pub staged_credits: usize,
    pub refused: u64,
    /// Largest finalized block, in bytes.
    pub max_block_bytes: u64,
    pub final_balances: BTreeMap<AccountId, u64>,
    pub behaviors: Vec<Behavior>,
    /// Range table in force at the end of the run.
    pub table: RangeTable,
}

#[derive(Debug, Clone)]
enum Ev {
    Arrive,
    Msg {
        shard: ShardId,
        epoch: u64,
        msg: ConsensusMsg<Arc<Block>>,
    },
    Timer {
        shard: ShardId,
        epoch: u64,
        h: u64,
        r: u64,
    },
    Propose {
        shard: ShardId,
        epoch: u64,
        h: u64,
        r: u64,
    },
    Wake {
        shard: ShardId,
        epoch: u64,
    },
    Retry(TxId),
    Stage(Box<LockMessage>),
    Ack {
        tx: TxId,
        ack: Ack,
    },
    Decision(Entry),
    Barrier,
    Boundary,
}

type Validated = Option<Arc<(Ledger, Vec<Effect>)>>;

struct ShardRt {
    state: ShardState,
    committee: ValidatorSet,
    mempool: BTreeSet<(Reverse<u64>, TxId)>,
    stages: BTreeMap<TxId, Entry>,
    decisions: BTreeMap<TxId, Entry>,
    cache: HashMap<Hash256, Validated>,
    dormant: bool,
    last_block_at: Tick,
    max_round: u64,
    workload: u64,
    touched: Vec<Key256>,
}

impl ShardRt {
    fn new(state: ShardState, committee: ValidatorSet, now: Tick) -> Self {
        ShardRt {
            state,
            committee,
            mempool: BTreeSet::new(),
            stages: BTreeMap::new(),
            decisions: BTreeMap::new(),
            cache: HashMap::new(),
            dormant: false,
            last_block_at: now,
            max_round: 0,
            workload: 0,
            touched: Vec::new(),
        }
    }
}

struct TxRec {
    tx: Transaction,
    spam: bool,
    status: TxStatus,
    attempts: u32,
    lock_wait: Tick,
    reject: Option<RejectReason>,
}

fn validate_cached(rt: &mut ShardRt, b: &Arc<Block>, limit: u64, params: &LedgerParams) -> bool {
    let head = rt.state.height();
    if b.height() <= head {
        return rt.state.chain()[b.height() as usize].hash() == b.hash();
    }
    if b.height() != head + 1 {
        return false;
    }
    let d = b.hash();
    if let Some(v) = rt.cache.get(&d) {
        return v.is_some();
    }
    let v = rt.state.validate(b, limit, params).ok().map(Arc::new);
    let ok = v.is_some();
    rt.cache.insert(d, v);
    ok
}

pub struct Simulator {
    cfg: ScenarioConfig,
    timing: Timing,
    net: NetworkModel,
    params: LedgerParams,
    sizing: BlockSizing,
    policy: RetryPolicy,
    epoch_cfg: EpochConfig,
    queue: EventQueue<Ev>,
    rng_net: Prf,
    rng_relay: Prf,
    rng_retry: Prf,
    rng_inject: Prf,
    root: Prf,
    behaviors: Vec<Behavior>,
    reputation: BTreeMap<NodeId, ReputationScore>,
    epoch: u64,
    table: RangeTable,
    shards: BTreeMap<ShardId, ShardRt>,
    replicas: BTreeMap<(ShardId, NodeId), ConsensusState<Arc<Block>>>,
    txs: Vec<TxRec>,
    cursor: usize,
    keys: Vec<Key256>,
    limiter: RateLimiter,
    trace: Trace,
    in_transit: u128,
    genesis_total: u128,
    barrier: bool,
    next_boundary: Tick,
    beacon_retries: u32,
    pending_cross: u64,
    epochs: Vec<EpochSummary>,
    blocks: u64,
    max_block_bytes: u64,
    rounds_total: u64,
    round_changes: u64,
    messages: u64,
    escalations: u64,
    invalid_proposals: u64,
    dest_lock_expiries: u64,
}

impl Simulator {
    pub fn new(cfg: &ScenarioConfig, genesis: Genesis) -> Result<Self> {
        cfg.validate()?;
        let root = Prf::new(cfg.seed);
        let n = cfg.n_nodes;

        let mut behaviors = vec![Behavior::Honest; n];
        let m = cfg.malicious_count();
        if m > 0 {
            let mut ids: Vec<usize> = (0..n).collect();
            let mut pick = root.fork("malicious");
            for i in 0..m {
                let j = pick.random_range(i..n);
                ids.swap(i, j);
            }
            for (k, id) in ids[..m].iter().enumerate() {
                behaviors[*id] = cfg.behaviors[k % cfg.behaviors.len()];
            }
        }

        let epoch_cfg = cfg.epoch_config();
        let pool: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
        let order: Vec<ShardId> = genesis.table.shards().collect();
        let seed = Randomness::from_value(root.fork("genesis-beacon").next_u64());
        let committees = crate::epoch::rotate_committees(&pool, &order, &seed, &epoch_cfg, 0)?;

        let mut trace = Trace::new(cfg.record_trace);
        let mut ledgers: BTreeMap<ShardId, Ledger> = genesis
            .table
            .ranges()
            .iter()
            .map(|(s, r)| (*s, Ledger::new(*s, *r)))
            .collect();
        for (i, key) in genesis.keys.iter().enumerate() {
            let shard = genesis.table.find_shard(key);
            let a = AccountId(i as u64);
            ledgers
                .get_mut(&shard)
                .expect("shard from table")
                .insert_keyed(a, *key, genesis.balance)?;
            trace.push(
                0,
                SYSTEM_PROPOSER.0,
                "genesis",
                "-",
                format!("acct={};bal={};shard={}", a.0, genesis.balance, shard.0),
            );
        }
        let mut shards = BTreeMap::new();
        for (id, ledger) in ledgers {
            let vs = committees[&id].clone();
            shards.insert(id, ShardRt::new(ShardState::genesis(ledger, 0), vs, 0));
        }

        let txs = genesis
            .txs
            .into_iter()
            .map(|(tx, spam)| TxRec {
                tx,
                spam,
                status: TxStatus::Pending,
                attempts: 1,
                lock_wait: 0,
                reject: None,
            })
            .collect::<Vec<_>>();
        for (i, t) in txs.iter().enumerate() {
            if t.tx.id.0 != i as u64 {
                return Err(Error::domain("workload ids must be 0..n in order"));
            }
        }

        let genesis_total = genesis.balance as u128 * genesis.keys.len() as u128;
        Ok(Simulator {
            timing: cfg.timing(),
            net: cfg.network(),
            params: cfg.ledger_params(),
            sizing: cfg.sizing(),
            policy: cfg.retry_policy(),
            epoch_cfg,
            queue: EventQueue::new(),
            rng_net: root.fork("net"),
            rng_relay: root.fork("relay"),
            rng_retry: root.fork("retry"),
            rng_inject: root.fork("inject"),
            behaviors,
            reputation: pool.iter().map(|n| (*n, ReputationScore::default())).collect(),
            epoch: 0,
            table: genesis.table,
            shards,
            replicas: BTreeMap::new(),
            txs,
            cursor: 0,
            keys: genesis.keys,
            limiter: RateLimiter::new(cfg.dos_defense, cfg.rate_window, cfg.rate_limit, cfg.rate_penalty),
            trace,
            in_transit: 0,
            genesis_total,
            barrier: false,
            next_boundary: 0,
            beacon_retries: 0,
            pending_cross: 0,
            epochs: Vec::new(),
            blocks: 0,
            max_block_bytes: 0,
            rounds_total: 0,
            round_changes: 0,
            messages: 0,
            escalations: 0,
            invalid_proposals: 0,
            dest_lock_expiries: 0,
            root,
            cfg: cfg.clone(),
        })
    }

    pub fn behaviors(&self) -> &[Behavior] {
        &self.behaviors
    }

    fn now(&self) -> Tick {
        self.queue.now()
    }

    fn at(&mut self, at: Tick, ev: Ev) -> Result<()> {
        self.queue.schedule(at, SYSTEM_PROPOSER, ev)?;
        Ok(())
    }

    /// Runs to completion and returns the measurements.
    pub fn run(self) -> Result<SimOutput> {
        self.run_traced().map_err(|f| f.error)
    }

    /// Like [`Simulator::run`]; on failure the trace up to the fault is
    /// sealed and returned with the error.
    pub fn run_traced(mut self) -> std::result::Result<SimOutput, Box<SimFailure>> {
        match self.drive() {
            Ok(()) => {
                let mut trace = self.trace.clone();
                self.finish().map_err(|error| {
                    trace.seal(0);
                    Box::new(SimFailure {
                        error,
                        trace: Some(trace),
                    })
                })
            }
            Err(error) => {
                let now = self.now();
                self.trace.push(now, SYSTEM_PROPOSER.0, "fault", "-", error.to_string());
                self.trace.seal(now);
                Err(Box::new(SimFailure {
                    error,
                    trace: Some(self.trace),
                }))
            }
        }
    }

    fn drive(&mut self) -> Result<()> {
        let shard_ids: Vec<ShardId> = self.shards.keys().copied().collect();
        for s in shard_ids {
            self.spawn_replicas(s)?;
        }
        if let Some(first) = self.txs.first() {
            let t = first.tx.submitted_at;
            self.at(t, Ev::Arrive)?;
        }
        self.schedule_epoch(self.cfg.epoch_length)?;
        let end = self.cfg.duration + self.cfg.drain;
        while let Some(ev) = self.queue.pop() {
            if ev.at > end {
                break;
            }
            self.handle(ev.target, ev.payload)?;
        }
        Ok(())
    }

    fn schedule_epoch(&mut self, boundary: Tick) -> Result<()> {
        if self.cfg.epoch_length == 0 || boundary > self.cfg.duration {
            return Ok(());
        }
        self.next_boundary = boundary;
        let barrier = boundary.saturating_sub(self.cfg.lock_ttl).max(self.now());
        self.at(barrier, Ev::Barrier)?;
        self.at(boundary, Ev::Boundary)
    }

    fn handle(&mut self, target: NodeId, ev: Ev) -> Result<()> {
        let now = self.now();
        match ev {
            Ev::Arrive => self.on_arrive(),
            Ev::Msg { shard, epoch, msg } => {
                if epoch == self.epoch {
                    self.on_msg(shard, target, msg)?;
                }
                Ok(())
            }
            Ev::Timer { shard, epoch, h, r } => {
                if epoch == self.epoch {
                    self.on_timer(shard, target, h, r)?;
                }
                Ok(())
            }
            Ev::Propose { shard, epoch, h, r } => {
                if epoch == self.epoch {
                    self.on_propose(shard, target, h, r)?;
                }
                Ok(())
            }
            Ev::Wake { shard, epoch } => {
                if epoch == self.epoch {
                    self.wake(shard)?;
                }
                Ok(())
            }
            Ev::Retry(id) => {
                if self.txs[id.0 as usize].status == TxStatus::Pending {
                    self.enqueue(id)?;
                }
                Ok(())
            }
            Ev::Stage(msg) => {
                self.pending_cross -= 1;
                self.on_stage(*msg)
            }
            Ev::Ack { tx, ack } => {
                self.pending_cross -= 1;
                self.on_ack(tx, ack)
            }
            Ev::Decision(entry) => {
                self.pending_cross -= 1;
                let shard = entry.tx().dest_shard;
                let rt = self
                    .shards
                    .get_mut(&shard)
                    .ok_or_else(|| Error::invariant(format!("decision for unknown {shard}")))?;
                rt.decisions.insert(entry.tx().id, entry);
                self.wake(shard)
            }
            Ev::Barrier => {
                self.barrier = true;
                Ok(())
            }
            Ev::Boundary => self.on_boundary(now),
        }
    }

    // ---- workload ----------------------------------------------------

    fn on_arrive(&mut self) -> Result<()> {
        let now = self.now();
        while self.cursor < self.txs.len() && self.txs[self.cursor].tx.submitted_at <= now {
            let id = TxId(self.cursor as u64);
            self.cursor += 1;
            let sender = self.txs[id.0 as usize].tx.sender;
            if !self.limiter.admit(sender, now) {
                self.txs[id.0 as usize].status = TxStatus::Refused(now);
                continue;
            }
            self.enqueue(id)?;
        }
        if let Some(next) = self.txs.get(self.cursor) {
            let t = next.tx.submitted_at;
            self.at(t, Ev::Arrive)?;
        }
        Ok(())
    }

    fn route(&self, a: AccountId) -> ShardId {
        self.table.find_shard(&self.keys[a.0 as usize])
    }

    fn enqueue(&mut self, id: TxId) -> Result<()> {
        let (s, d) = {
            let tx = &self.txs[id.0 as usize].tx;
            (self.route(tx.sender), self.route(tx.receiver))
        };
        let rec = &mut self.txs[id.0 as usize];
        rec.tx.reroute(s, d);
        let fee = rec.tx.fee;
        self.shards
            .get_mut(&s)
            .expect("routed shard exists")
            .mempool
            .insert((Reverse(fee), id));
        self.wake(s)
    }

    fn finalize_tx(&mut self, id: TxId) {
        let now = self.now();
        let rec = &mut self.txs[id.0 as usize];
        if rec.status == TxStatus::Pending || rec.status == TxStatus::InFlight {
            rec.status = TxStatus::Finalized(now);
            let detail = format!(
                "tx={};cross={};spam={};latency={}",
                id.0,
                rec.tx.is_cross() as u8,
                rec.spam as u8,
                now - rec.tx.submitted_at
            );
            self.trace.push(now, SYSTEM_PROPOSER.0, "final", "-", detail);
        }
    }

    fn abort_tx(&mut self, id: TxId, reason: RejectReason) {
        let now = self.now();
        let rec = &mut self.txs[id.0 as usize];
        if !matches!(rec.status, TxStatus::Pending | TxStatus::InFlight) {
            return;
        }
        rec.status = TxStatus::Aborted(now, reason);
        self.trace.push(
            now,
            SYSTEM_PROPOSER.0,
            "abort",
            "-",
            format!("tx={};reason={reason:?}", id.0),
        );
    }

    /// Backs off after a lock conflict, or aborts once attempts run out.
    fn retry_or_abort(&mut self, id: TxId) -> Result<()> {
        let now = self.now();
        let rec = &mut self.txs[id.0 as usize];
        match retry_schedule(rec.attempts, rec.tx.fee, &self.policy, &mut self.rng_retry) {
            Some(delay) => {
                rec.attempts += 1;
                rec.lock_wait += delay;
                rec.status = TxStatus::Pending;
                rec.reject = None;
                self.at(now + delay, Ev::Retry(id))
            }
            None => {
                self.abort_tx(id, RejectReason::LockConflict);
                Ok(())
            }
        }
    }

    // ---- consensus hosting -------------------------------------------

    fn spawn_replicas(&mut self, shard: ShardId) -> Result<()> {
        let now = self.now();
        let (members, height) = {
            let rt = &self.shards[&shard];
            (rt.committee.members.clone(), rt.state.height() + 1)
        };
        let mut outs = Vec::new();
        for m in &members {
            if !self.behaviors[m.0 as usize].runs_protocol() {
                continue;
            }
            let r = ConsensusState::new(*m, members.clone(), height, now, self.timing);
            outs.push((*m, r.start()));
            self.replicas.insert((shard, *m), r);
        }
        for (m, out) in outs {
            self.process(shard, m, out)?;
        }
        Ok(())
    }

    fn broadcast(
        &mut self,
        shard: ShardId,
        from: NodeId,
        msg: ConsensusMsg<Arc<Block>>,
        to: Option<&[NodeId]>,
    ) -> Result<()> {
        let now = self.now();
        let members = match to {
            Some(t) => t.to_vec(),
            None => self.shards[&shard].committee.members.clone(),
        };
        for m in members {
            self.messages += 1;
            if !self.replicas.contains_key(&(shard, m)) {
                continue;
            }
            if let Some(lat) = self.net.transit(from, m, &mut self.rng_net) {
                self.queue.schedule(
                    now + lat,
                    m,
                    Ev::Msg {
                        shard,
                        epoch: self.epoch,
                        msg: msg.clone(),
                    },
                )?;
            }
        }
        Ok(())
    }

    fn process(&mut self, shard: ShardId, node: NodeId, out: Output<Arc<Block>>) -> Result<()> {
        let now = self.now();
        let behavior = self.behaviors[node.0 as usize];
        for (h, block) in out.finalized {
            self.on_finalized(shard, h, block)?;
        }
        if let Some(p) = out.invalid_proposer {
            self.invalid_proposals += 1;
            if let Some(s) = self.reputation.get_mut(&p) {
                s.record_message(false);
            }
        }
        self.round_changes += out.round_changes as u64;
        self.escalations += out.escalate as u64;
        if let Some((h, r, at)) = out.timer {
            if let Some(rt) = self.shards.get_mut(&shard) {
                if h == rt.state.height() + 1 {
                    rt.max_round = rt.max_round.max(r);
                }
            }
            self.queue.schedule(
                at,
                node,
                Ev::Timer {
                    shard,
                    epoch: self.epoch,
                    h,
                    r,
                },
            )?;
        }
        if let Some((h, r)) = out.need_proposal {
            let mut at = if r == 0 {
                now.max(self.shards[&shard].last_block_at + self.cfg.block_interval)
            } else {
                now
            };
            if behavior == Behavior::Staller {
                at += self.timing.tau / 2;
            }
            self.queue.schedule(
                at,
                node,
                Ev::Propose {
                    shard,
                    epoch: self.epoch,
                    h,
                    r,
                },
            )?;
        }
        for msg in out.outbound {
            let own_vote = matches!(msg.payload, Payload::Prepare(_) | Payload::Commit(_));
            if behavior == Behavior::Equivocate && own_vote {
                continue;
            }
            self.broadcast(shard, node, msg, None)?;
        }
        Ok(())
    }

    /// Lets a lagging replica catch up with the canonical chain.
    fn sync_replica(&mut self, shard: ShardId, node: NodeId) -> Result<()> {
        let Some(rt) = self.shards.get_mut(&shard) else {
            return Ok(());
        };
        let Some(rep) = self.replicas.get_mut(&(shard, node)) else {
            return Ok(());
        };
        let target = rt.state.height() + 1;
        if rep.height() >= target {
            return Ok(());
        }
        let (limit, params) = (self.cfg.block_size, self.params);
        let out = rep.sync_to(target, self.queue.now(), &mut |b| {
            validate_cached(rt, b, limit, &params)
        });
        self.process(shard, node, out)
    }

    fn on_msg(&mut self, shard: ShardId, node: NodeId, msg: ConsensusMsg<Arc<Block>>) -> Result<()> {
        if !self.replicas.contains_key(&(shard, node)) {
            return Ok(());
        }
        self.sync_replica(shard, node)?;
        if self.behaviors[node.0 as usize] == Behavior::Equivocate {
            if let Payload::PrePrepare { block, .. } = &msg.payload {
                let d = block.hash();
                for payload in [Payload::Prepare(d), Payload::Commit(d)] {
                    let vote = ConsensusMsg {
                        height: msg.height,
                        round: msg.round,
                        sender: node,
                        payload,
                    };
                    self.broadcast(shard, node, vote, None)?;
                }
            }
        }
        let now = self.now();
        let (limit, params) = (self.cfg.block_size, self.params);
        let Some(rt) = self.shards.get_mut(&shard) else {
            return Ok(());
        };
        let Some(rep) = self.replicas.get_mut(&(shard, node)) else {
            return Ok(());
        };
        let out = rep.step(msg, now, &mut |b| validate_cached(rt, b, limit, &params));
        self.process(shard, node, out)
    }

    fn on_timer(&mut self, shard: ShardId, node: NodeId, h: u64, r: u64) -> Result<()> {
        self.sync_replica(shard, node)?;
        let now = self.now();
        let Some(rt) = self.shards.get(&shard) else {
            return Ok(());
        };
        let Some(rep) = self.replicas.get_mut(&(shard, node)) else {
            return Ok(());
        };
        if (rep.height(), rep.round()) != (h, r) {
            return Ok(());
        }
        if rt.dormant && r == 0 && rep.phase() == Phase::Idle {
            return Ok(());
        }
        let out = rep.on_timeout(now);
        self.process(shard, node, out)
    }

    fn has_work(&self, shard: ShardId) -> bool {
        let rt = &self.shards[&shard];
        let now = self.now();
        if !rt.decisions.is_empty() || !rt.stages.is_empty() {
            return true;
        }
        if rt.state.ledger.locks().any(|l| l.expires_at <= now) {
            return true;
        }
        if self.barrier {
            rt.mempool.iter().any(|(_, id)| !self.txs[id.0 as usize].tx.is_cross())
        } else {
            !rt.mempool.is_empty()
        }
    }

    fn wake(&mut self, shard: ShardId) -> Result<()> {
        let now = self.now();
        let Some(rt) = self.shards.get_mut(&shard) else {
            return Ok(());
        };
        if !rt.dormant {
            return Ok(());
        }
        rt.dormant = false;
        let members = rt.committee.members.clone();
        for m in members {
            let Some(rep) = self.replicas.get_mut(&(shard, m)) else {
                continue;
            };
            let out = rep.restart_round(now);
            self.process(shard, m, out)?;
        }
        Ok(())
    }

    fn on_propose(&mut self, shard: ShardId, node: NodeId, h: u64, r: u64) -> Result<()> {
        self.sync_replica(shard, node)?;
        let now = self.now();
        {
            let Some(rep) = self.replicas.get(&(shard, node)) else {
                return Ok(());
            };
            if (rep.height(), rep.round()) != (h, r) || rep.phase() != Phase::Idle {
                return Ok(());
            }
        }
        if r == 0 && !self.has_work(shard) {
            let rt = self.shards.get_mut(&shard).expect("shard exists");
            rt.dormant = true;
            if let Some(exp) = rt.state.ledger.locks().map(|l| l.expires_at).min() {
                let epoch = self.epoch;
                self.at(exp.max(now + 1), Ev::Wake { shard, epoch })?;
            }
            return Ok(());
        }
        let behavior = self.behaviors[node.0 as usize];
        let honest_builder = !matches!(behavior, Behavior::Equivocate | Behavior::InvalidProposal);
        let block = self.build_block(shard, node, now, honest_builder)?;
        match behavior {
            Behavior::InvalidProposal => {
                let bad = Block::new(
                    block.shard(),
                    block.height(),
                    block.parent_hash(),
                    block.timestamp(),
                    block.entries().to_vec(),
                    block.state_root().with_bit_flipped(0),
                    node,
                    &self.sizing,
                );
                let rep = self.replicas.get_mut(&(shard, node)).expect("checked");
                let out = rep.propose(Arc::new(bad));
                self.process(shard, node, out)
            }
            Behavior::Equivocate => {
                let other = {
                    let rt = &self.shards[&shard];
                    BlockBuilder::new(
                        &rt.state,
                        block.timestamp() + 1,
                        node,
                        self.cfg.block_size,
                        self.sizing,
                        self.params,
                    )
                    .finish()
                };
                let rep = self.replicas.get_mut(&(shard, node)).expect("checked");
                let mut out = rep.propose(Arc::new(block));
                let members = self.shards[&shard].committee.members.clone();
                let (first, second) = members.split_at(members.len() / 2);
                let msgs = std::mem::take(&mut out.outbound);
                for msg in msgs {
                    if let Payload::PrePrepare { justification, .. } = &msg.payload {
                        let twin = ConsensusMsg {
                            payload: Payload::PrePrepare {
                                block: Arc::new(other.clone()),
                                justification: justification.clone(),
                            },
                            ..msg.clone()
                        };
                        self.broadcast(shard, node, msg, Some(first))?;
                        self.broadcast(shard, node, twin, Some(second))?;
                    } else {
                        self.broadcast(shard, node, msg, None)?;
                    }
                }
                self.process(shard, node, out)
            }
            _ => {
                let rep = self.replicas.get_mut(&(shard, node)).expect("checked");
                let out = rep.propose(Arc::new(block));
                self.process(shard, node, out)
            }
        }
    }

    /// Packs decisions, then staged credits, then the mempool by fee. An
    /// honest builder also acts on what it learns: conflicting locks back
    /// off, impossible transactions abort, rejected credits are answered.
    fn build_block(&mut self, shard: ShardId, proposer: NodeId, now: Tick, side_effects: bool) -> Result<Block> {
        let rt = &self.shards[&shard];
        let mut b = BlockBuilder::new(&rt.state, now, proposer, self.cfg.block_size, self.sizing, self.params);
        let mut dead_decisions = Vec::new();
        let mut rejected_stages = Vec::new();
        let mut deferred = Vec::new();
        let mut invalid = Vec::new();
        for (id, e) in &rt.decisions {
            match b.try_push(e.clone()) {
                Ok(_) => {}
                Err(PushError::Full) => break,
                Err(PushError::Rejected(_)) => dead_decisions.push(*id),
            }
        }
        for (id, e) in &rt.stages {
            if b.is_full() {
                break;
            }
            match b.try_push(e.clone()) {
                Ok(_) => {}
                Err(PushError::Full) => break,
                Err(PushError::Rejected(err)) => rejected_stages.push((*id, RejectReason::from_apply(&err))),
            }
        }
        for (fee, id) in &rt.mempool {
            if b.is_full() {
                break;
            }
            let tx = &self.txs[id.0 as usize].tx;
            let entry = if tx.is_cross() {
                if self.barrier {
                    continue;
                }
                Entry::Lock(tx.clone())
            } else {
                Entry::Transfer(tx.clone())
            };
            match b.try_push(entry) {
                Ok(_) => {}
                Err(PushError::Full) => break,
                Err(PushError::Rejected(crate::model::ApplyError::Locked { .. })) => deferred.push((*fee, *id)),
                Err(PushError::Rejected(err)) => invalid.push((*fee, *id, RejectReason::from_apply(&err))),
            }
        }
        let block = b.finish();
        if side_effects {
            let rt = self.shards.get_mut(&shard).expect("shard exists");
            for id in dead_decisions {
                rt.decisions.remove(&id);
            }
            for (id, _) in &rejected_stages {
                rt.stages.remove(id);
            }
            for (fee, id) in deferred.iter().copied().chain(invalid.iter().map(|(f, i, _)| (*f, *i))) {
                rt.mempool.remove(&(fee, id));
            }
            for (id, reason) in rejected_stages {
                self.send_ack(shard, id, Ack::Rejected(reason))?;
            }
            for (_, id) in deferred {
                self.retry_or_abort(id)?;
            }
            for (_, id, reason) in invalid {
                self.abort_tx(id, reason);
            }
        }
        Ok(block)
    }

    fn on_finalized(&mut self, shard: ShardId, h: u64, block: Arc<Block>) -> Result<()> {
        let now = self.now();
        let (limit, params) = (self.cfg.block_size, self.params);
        let rt = self
            .shards
            .get_mut(&shard)
            .ok_or_else(|| Error::invariant(format!("finalization for unknown {shard}")))?;
        let head = rt.state.height();
        if h <= head {
            if rt.state.chain()[h as usize].hash() != block.hash() {
                return Err(Error::invariant(format!(
                    "{shard}: conflicting blocks finalized at height {h}"
                )));
            }
            return Ok(());
        }
        if h != head + 1 {
            return Err(Error::invariant(format!(
                "{shard}: finalized height {h} skips past {head}"
            )));
        }
        let validated = match rt.cache.get(&block.hash()) {
            Some(v) => v.clone(),
            None => rt.state.validate(&block, limit, &params).ok().map(Arc::new),
        };
        let Some(validated) = validated else {
            return Err(Error::invariant(format!(
                "{shard}: invalid block finalized at height {h}"
            )));
        };
        let (post, effects) = (validated.0.clone(), validated.1.clone());
        rt.state.append(block.clone(), post);
        rt.cache.clear();
        rt.dormant = false;
        rt.last_block_at = now;
        let rounds = rt.max_round + 1;
        rt.max_round = 0;
        self.blocks += 1;
        self.max_block_bytes = self.max_block_bytes.max(block.size_bytes());
        self.rounds_total += rounds;
        if let Some(s) = self.reputation.get_mut(&block.proposer()) {
            s.record_round(rounds == 1);
        }

        let bh = block.hash().to_hex();
        self.trace.push(
            now,
            block.proposer().0,
            "block",
            &bh,
            format!(
                "shard={};height={h};entries={};rounds={rounds}",
                shard.0,
                block.entries().len()
            ),
        );
        let rt = self.shards.get_mut(&shard).expect("exists");
        for e in block.entries() {
            let tx = e.tx();
            self.trace.push(
                now,
                block.proposer().0,
                "entry",
                &bh[..16],
                format!(
                    "shard={};op={};tx={};from={};to={};amount={};fee={};src={};dst={}",
                    shard.0,
                    e.tag(),
                    tx.id.0,
                    tx.sender.0,
                    tx.receiver.0,
                    tx.amount,
                    tx.fee,
                    tx.source_shard.0,
                    tx.dest_shard.0
                ),
            );
            match e {
                Entry::Transfer(_) | Entry::Lock(_) => {
                    rt.mempool.remove(&(Reverse(tx.fee), tx.id));
                }
                Entry::Stage { .. } => {
                    rt.stages.remove(&tx.id);
                }
                Entry::Commit(_) | Entry::Abort(_) => {
                    rt.decisions.remove(&tx.id);
                }
            }
        }
        self.apply_effects(shard, h, effects)?;
        self.check_conservation()?;

        let members = self.shards[&shard].committee.members.clone();
        for m in members {
            self.sync_replica(shard, m)?;
        }
        Ok(())
    }

    fn touch(&mut self, shard: ShardId, cost: u64, accounts: &[AccountId]) {
        let keys: Vec<Key256> = accounts.iter().map(|a| self.keys[a.0 as usize]).collect();
        let rt = self.shards.get_mut(&shard).expect("exists");
        rt.workload += cost;
        rt.touched.extend(keys);
    }

    fn apply_effects(&mut self, shard: ShardId, height: u64, effects: Vec<Effect>) -> Result<()> {
        let mut tree = None;
        for fx in effects {
            match fx {
                Effect::Transferred { tx, .. } => {
                    let t = self.txs[tx.0 as usize].tx.clone();
                    self.touch(shard, 1, &[t.sender, t.receiver]);
                    self.finalize_tx(tx);
                }
                Effect::Locked { tx, expires_at } => {
                    let t = self.txs[tx.0 as usize].tx.clone();
                    self.txs[tx.0 as usize].status = TxStatus::InFlight;
                    self.touch(shard, 2, &[t.sender]);
                    let ledger = &self.shards[&shard].state.ledger;
                    let tree = tree.get_or_insert_with(|| ledger.merkle_tree().expect("locked shard has leaves"));
                    let proof = ledger
                        .proof_for(tree, t.sender, height, expires_at)
                        .ok_or_else(|| Error::invariant(format!("no leaf for {}", t.sender)))?;
                    self.send_stage(shard, LockMessage { tx: t, proof })?;
                }
                Effect::Staged { tx } => {
                    let t = self.txs[tx.0 as usize].tx.clone();
                    self.touch(shard, 2, &[t.receiver]);
                    self.send_ack(shard, tx, Ack::Validated)?;
                }
                Effect::SourceCommitted { tx, .. } => {
                    let t = self.txs[tx.0 as usize].tx.clone();
                    self.in_transit += t.amount as u128;
                    self.send_decision(shard, Entry::Commit(t))?;
                }
                Effect::DestCommitted { tx, credit } => {
                    self.in_transit = self
                        .in_transit
                        .checked_sub(credit as u128)
                        .ok_or_else(|| Error::invariant("credit without a matching debit"))?;
                    self.finalize_tx(tx);
                }
                Effect::SourceAborted { tx } => {
                    let reason = self.txs[tx.0 as usize].reject.unwrap_or(RejectReason::Other);
                    if reason.retryable() {
                        self.retry_or_abort(tx)?;
                    } else {
                        self.abort_tx(tx, reason);
                    }
                }
                Effect::DestAborted { .. } => {}
                Effect::SourceExpired(lock) => {
                    let id = lock.holder;
                    self.shards.get_mut(&shard).expect("exists").decisions.remove(&id);
                    if !self.txs[id.0 as usize].status.is_terminal() {
                        self.abort_tx(id, RejectReason::Timeout);
                        let t = self.txs[id.0 as usize].tx.clone();
                        self.send_decision(shard, Entry::Abort(t))?;
                    }
                }
                Effect::DestLockExpired(_) => self.dest_lock_expiries += 1,
            }
        }
        Ok(())
    }

    // ---- cross-shard relays --------------------------------------------

    /// Delivery delay through `f + 1` reputation-weighted relays of
    /// `shard`'s committee; `None` when no honest relay was picked.
    fn relay_latency(&mut self, shard: ShardId) -> Result<Option<Tick>> {
        let w = ReputationWeights::default();
        let rt = &self.shards[&shard];
        let candidates: Vec<(NodeId, f64)> = rt
            .committee
            .members
            .iter()
            .map(|m| (*m, self.reputation.get(m).map_or(0.0, |s| s.value(&w))))
            .collect();
        let k = rt.committee.quorum().f + 1;
        let seed = Randomness::from_value(self.rng_relay.next_u64());
        let relays = weighted_select(&candidates, k, &seed)?;
        let mut best: Option<Tick> = None;
        for r in relays {
            self.messages += 1;
            if matches!(
                self.behaviors[r.0 as usize],
                Behavior::Silent | Behavior::Equivocate | Behavior::InvalidProposal
            ) {
                continue;
            }
            if let Some(lat) = self.net.transit(r, SYSTEM_PROPOSER, &mut self.rng_net) {
                best = Some(best.map_or(lat, |b| b.min(lat)));
            }
        }
        Ok(best)
    }

    fn send_stage(&mut self, source: ShardId, msg: LockMessage) -> Result<()> {
        let Some(mut lat) = self.relay_latency(source)? else {
            return Ok(());
        };
        if self.cfg.inject_delay_rate > 0.0 && self.rng_inject.random_bool(self.cfg.inject_delay_rate) {
            lat += 2 * self.cfg.lock_ttl;
        }
        self.pending_cross += 1;
        let at = self.now() + lat;
        self.at(at, Ev::Stage(Box::new(msg)))
    }

    fn send_ack(&mut self, dest: ShardId, tx: TxId, ack: Ack) -> Result<()> {
        let Some(lat) = self.relay_latency(dest)? else {
            return Ok(());
        };
        self.pending_cross += 1;
        let at = self.now() + lat;
        self.at(at, Ev::Ack { tx, ack })
    }

    fn send_decision(&mut self, source: ShardId, entry: Entry) -> Result<()> {
        // A lost decision would strand the staged credit; decisions are
        // retransmitted until a relay gets through.
        let mut extra = 0;
        let lat = loop {
            if let Some(l) = self.relay_latency(source)? {
                break l;
            }
            extra += self.timing.tau;
        };
        self.pending_cross += 1;
        let at = self.now() + lat + extra;
        self.at(at, Ev::Decision(entry))
    }

    fn on_stage(&mut self, msg: LockMessage) -> Result<()> {
        let dest = msg.tx.dest_shard;
        let id = msg.tx.id;
        if self.cfg.inject_reject_rate > 0.0 && self.rng_inject.random_bool(self.cfg.inject_reject_rate) {
            return self.send_ack(dest, id, Ack::Rejected(RejectReason::Injected));
        }
        let rt = self
            .shards
            .get_mut(&dest)
            .ok_or_else(|| Error::invariant(format!("stage for unknown {dest}")))?;
        rt.stages.insert(
            id,
            Entry::Stage {
                tx: msg.tx,
                proof: Box::new(msg.proof),
            },
        );
        self.wake(dest)
    }

    fn on_ack(&mut self, id: TxId, ack: Ack) -> Result<()> {
        let rec = &mut self.txs[id.0 as usize];
        if rec.status != TxStatus::InFlight {
            return Ok(());
        }
        let tx = rec.tx.clone();
        let entry = match ack {
            Ack::Validated => Entry::Commit(tx.clone()),
            Ack::Rejected(reason) => {
                rec.reject = Some(reason);
                Entry::Abort(tx.clone())
            }
        };
        let rt = self.shards.get_mut(&tx.source_shard).expect("source exists");
        rt.decisions.insert(id, entry);
        self.wake(tx.source_shard)
    }

    // ---- epochs --------------------------------------------------------

    fn epoch_quiescent(&self) -> bool {
        self.pending_cross == 0
            && self
                .shards
                .values()
                .all(|rt| rt.stages.is_empty() && rt.decisions.is_empty() && rt.state.ledger.is_quiescent())
    }

    fn on_boundary(&mut self, now: Tick) -> Result<()> {
        if !self.epoch_quiescent() {
            return self.at(now + self.timing.tau, Ev::Boundary);
        }
        let participants: Vec<(NodeId, BeaconStrategy)> = self
            .behaviors
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let s = match b {
                    Behavior::Silent | Behavior::RevealWithholder => BeaconStrategy::Withhold,
                    _ => BeaconStrategy::Honest,
                };
                (NodeId(i as u32), s)
            })
            .collect();
        let mut rng = self
            .root
            .fork_indexed("beacon", self.epoch * 1000 + self.beacon_retries as u64);
        let transcript = run_round(self.epoch + 1, &participants, AggregationMode::Xor, &self.net, &mut rng)?;
        let outcome = match transcript.outcome {
            Ok(o) => o,
            Err(_) => {
                self.beacon_retries += 1;
                return self.at(now + 2 * phase_deadline(&self.net), Ev::Boundary);
            }
        };
        for w in &outcome.withheld {
            if let Some(s) = self.reputation.get_mut(w) {
                s.penalize(ReputationScore::WITHHOLD_PENALTY);
            }
        }

        let workloads: BTreeMap<ShardId, u64> = self.shards.iter().map(|(s, rt)| (*s, rt.workload)).collect();
        let mut histograms: BTreeMap<ShardId, Vec<Key256>> = BTreeMap::new();
        let mut all_keys = Vec::new();
        for (s, rt) in &self.shards {
            let mut keys = rt.touched.clone();
            keys.sort();
            all_keys.extend(keys.iter().copied());
            histograms.insert(*s, keys);
        }
        let sigma_before = skew_of(&self.table, &all_keys).unwrap_or(1.0);
        let plan = plan_reconfiguration(&workloads, &self.table, &self.epoch_cfg, &histograms);

        let old_shards = std::mem::take(&mut self.shards);
        let mut mempool: Vec<TxId> = Vec::new();
        let mut states = BTreeMap::new();
        let mut committees = BTreeMap::new();
        for (s, rt) in old_shards {
            mempool.extend(rt.mempool.iter().map(|(_, id)| *id));
            states.insert(s, rt.state);
            committees.insert(s, rt.committee);
        }
        let state = EpochState {
            epoch: self.epoch,
            table: self.table.clone(),
            shards: states,
            committees,
        };
        let before = state.total_value();
        let pool: Vec<NodeId> = (0..self.cfg.n_nodes as u32).map(NodeId).collect();
        let (next, full_plan) = transition_epoch(&state, &plan, &outcome.randomness, &pool, &self.epoch_cfg, now)?;
        if next.total_value() != before {
            return Err(Error::invariant("reconfiguration changed the total value"));
        }
        let sigma_after = skew_of(&next.table, &all_keys).unwrap_or(1.0);

        self.epoch = next.epoch;
        self.table = next.table.clone();
        let committee_rows = next
            .committee_digests()
            .into_iter()
            .map(|(s, d)| (s, d.to_hex()[..16].to_string()))
            .collect::<Vec<_>>();
        check_placement(&next, self.epoch_cfg.v_min)?;
        for (s, st) in next.shards {
            let vs = next.committees[&s].clone();
            self.shards.insert(s, ShardRt::new(st, vs, now));
        }
        self.replicas.clear();
        self.barrier = false;
        let summary = EpochSummary {
            epoch: self.epoch,
            at: now,
            workloads,
            sigma_before,
            sigma_after,
            actions: full_plan.actions.iter().map(|a| a.label()).collect(),
            committees: committee_rows,
            beacon_retries: self.beacon_retries,
            withheld: outcome.withheld.len(),
        };
        self.beacon_retries = 0;
        self.trace.push(
            now,
            SYSTEM_PROPOSER.0,
            "epoch",
            &format!("{:016x}", outcome.randomness.value),
            format!(
                "epoch={};shards={};sigma_before={:.6};sigma_after={:.6};actions={}",
                summary.epoch,
                self.shards.len(),
                sigma_before,
                sigma_after,
                summary.actions.join("|")
            ),
        );
        self.epochs.push(summary);

        let ids: Vec<ShardId> = self.shards.keys().copied().collect();
        for s in &ids {
            self.spawn_replicas(*s)?;
        }
        for id in mempool {
            self.enqueue(id)?;
        }
        let next_boundary = self.next_boundary + self.cfg.epoch_length;
        self.schedule_epoch(next_boundary.max(now + self.cfg.lock_ttl + 1))
    }

    // ---- invariants and results ----------------------------------------

    fn total_value(&self) -> u128 {
        self.shards
            .values()
            .map(|rt| rt.state.ledger.total_balance() + rt.state.ledger.burned() as u128)
            .sum::<u128>()
            + self.in_transit
    }

    fn check_conservation(&self) -> Result<()> {
        let total = self.total_value();
        if total != self.genesis_total {
            return Err(Error::invariant(format!(
                "value not conserved: {total} != genesis {}",
                self.genesis_total
            )));
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SimOutput> {
        let end = self.now();
        self.check_conservation()?;
        for rt in self.shards.values() {
            rt.state.verify_chain()?;
        }
        let live_locks: usize = self.shards.values().map(|rt| rt.state.ledger.live_lock_count()).sum();
        let staged: usize = self.shards.values().map(|rt| rt.state.ledger.staged().len()).sum();
        let all_done = self.cursor == self.txs.len()
            && self
                .txs
                .iter()
                .all(|t| !matches!(t.status, TxStatus::Pending | TxStatus::InFlight));
        let quiescent = all_done && self.pending_cross == 0 && self.in_transit == 0;
        if quiescent && (live_locks > 0 || staged > 0) {
            return Err(Error::invariant(format!(
                "quiescent with {live_locks} live locks and {staged} staged credits"
            )));
        }
        let mut balances = BTreeMap::new();
        for rt in self.shards.values() {
            balances.extend(rt.state.ledger.balances().iter().map(|(a, b)| (*a, *b)));
        }
        for (a, b) in &balances {
            self.trace
                .push(end, SYSTEM_PROPOSER.0, "balance", "-", format!("acct={};bal={b}", a.0));
        }
        self.trace.seal(end);
        let final_total = self.total_value();
        Ok(SimOutput {
            txs: self
                .txs
                .iter()
                .map(|t| TxOutcome {
                    id: t.tx.id,
                    cross: t.tx.is_cross(),
                    spam: t.spam,
                    submitted: t.tx.submitted_at,
                    status: t.status,
                    attempts: t.attempts,
                    lock_wait: t.lock_wait,
                })
                .collect(),
            blocks: self.blocks,
            rounds_total: self.rounds_total,
            round_changes: self.round_changes,
            messages: self.messages,
            escalations: self.escalations,
            invalid_proposals: self.invalid_proposals,
            dest_lock_expiries: self.dest_lock_expiries,
            epochs: self.epochs,
            trace: self.trace,
            quiescent,
            end_tick: end,
            genesis_total: self.genesis_total,
            final_total,
            live_locks,
            staged_credits: staged,
            refused: self.limiter.refused(),
            max_block_bytes: self.max_block_bytes,
            final_balances: balances,
            behaviors: self.behaviors,
            table: self.table.clone(),
        })
    }
}

/// Every shard's ledger matches its range in the table, holds only keys
/// inside it, and has a committee of at least `v_min`.
fn check_placement(next: &EpochState, v_min: usize) -> Result<()> {
    for (s, st) in &next.shards {
        let range = next
            .table
            .range_of(*s)
            .ok_or_else(|| Error::invariant(format!("shard {} has no range", s.0)))?;
        if st.ledger.range() != range {
            return Err(Error::invariant(format!(
                "shard {} ledger range differs from the table",
                s.0
            )));
        }
        if let Some((k, a)) = st.ledger.accounts_by_key().find(|(k, _)| !range.contains(k)) {
            return Err(Error::invariant(format!(
                "account {} key {k:?} outside shard {}",
                a.0, s.0
            )));
        }
        let size = next.committees.get(s).map_or(0, |c| c.members.len());
        if size < v_min {
            return Err(Error::invariant(format!(
                "shard {} committee {size} below floor {v_min}",
                s.0
            )));
        }
    }
    Ok(())
}
