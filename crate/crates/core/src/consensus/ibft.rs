use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{quorum_threshold, Quorum};
use crate::hash::Hash256;
use crate::model::{Block, NodeId, Tick};

/// Anything the replicas can agree on.
pub trait Proposal: Clone + Debug + PartialEq + Eq {
    fn digest(&self) -> Hash256;
}

impl Proposal for Arc<Block> {
    fn digest(&self) -> Hash256 {
        self.hash()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Timing {
    /// Base round timeout; round `r` lasts `tau * 2^r`.
    pub tau: Tick,
    /// Extra time granted to round 0 (the block interval).
    pub round0_offset: Tick,
    /// Failed rounds before asking for validator replacement.
    pub r_max: u64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            tau: 50,
            round0_offset: 0,
            r_max: 8,
        }
    }
}

pub fn round_deadline(start: Tick, round: u64, timing: &Timing) -> Tick {
    let offset = if round == 0 { timing.round0_offset } else { 0 };
    start + offset + timing.tau.saturating_mul(1u64 << round.min(40))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    PrePrepared,
    Prepared,
    Committed,
}

/// `T_q` prepare votes for `block` in `round`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PreparedCert<B> {
    pub round: u64,
    pub block: B,
    pub signers: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RoundChange<B> {
    pub sender: NodeId,
    pub round: u64,
    pub prepared: Option<PreparedCert<B>>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Payload<B> {
    /// Round `r > 0` proposals carry the `T_q` round changes that opened the
    /// round.
    PrePrepare {
        block: B,
        justification: Vec<RoundChange<B>>,
    },
    Prepare(Hash256),
    Commit(Hash256),
    RoundChange(Option<PreparedCert<B>>),
}

impl<B> Payload<B> {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::PrePrepare { .. } => "preprepare",
            Payload::Prepare(_) => "prepare",
            Payload::Commit(_) => "commit",
            Payload::RoundChange(_) => "roundchange",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConsensusMsg<B> {
    pub height: u64,
    pub round: u64,
    pub sender: NodeId,
    pub payload: Payload<B>,
}

/// Everything a step asks of its host. Every outbound message is a
/// broadcast to the whole committee, the sender included.
#[derive(Debug, Clone, PartialEq)]
pub struct Output<B> {
    pub outbound: Vec<ConsensusMsg<B>>,
    pub finalized: Vec<(u64, B)>,
    /// The replica leads `(height, round)` and needs a fresh block.
    pub need_proposal: Option<(u64, u64)>,
    /// Proposer of a block that failed validation.
    pub invalid_proposer: Option<NodeId>,
    /// New round-timer deadline to arm, tagged with `(height, round)`.
    pub timer: Option<(u64, u64, Tick)>,
    /// Round changes that happened in this step.
    pub round_changes: u32,
    /// Too many failed rounds at this height.
    pub escalate: bool,
}

impl<B> Default for Output<B> {
    fn default() -> Self {
        Output {
            outbound: Vec::new(),
            finalized: Vec::new(),
            need_proposal: None,
            invalid_proposer: None,
            timer: None,
            round_changes: 0,
            escalate: false,
        }
    }
}

const PREPARE: u8 = 0;
const COMMIT: u8 = 1;
const FUTURE_CAP: usize = 4096;

/// One validator's view of its shard's consensus.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConsensusState<B> {
    id: NodeId,
    members: Vec<NodeId>,
    quorum: Quorum,
    timing: Timing,
    height: u64,
    round: u64,
    phase: Phase,
    round_start: Tick,
    deadline: Tick,
    proposal: Option<B>,
    blocks: BTreeMap<Hash256, B>,
    votes: BTreeMap<(u64, u8), BTreeMap<Hash256, BTreeSet<NodeId>>>,
    prepared: Option<PreparedCert<B>>,
    round_changes: BTreeMap<u64, BTreeMap<NodeId, Option<PreparedCert<B>>>>,
    proposed: BTreeSet<u64>,
    future: Vec<ConsensusMsg<B>>,
    failed_rounds: u64,
}

impl<B: Proposal> ConsensusState<B> {
    /// Replica `id` waiting to decide `height`, with round 0 starting at
    /// `now`.
    pub fn new(id: NodeId, members: Vec<NodeId>, height: u64, now: Tick, timing: Timing) -> Self {
        let quorum = quorum_threshold(members.len()).expect("non-empty committee");
        let mut s = ConsensusState {
            id,
            members,
            quorum,
            timing,
            height,
            round: 0,
            phase: Phase::Idle,
            round_start: now,
            deadline: 0,
            proposal: None,
            blocks: BTreeMap::new(),
            votes: BTreeMap::new(),
            prepared: None,
            round_changes: BTreeMap::new(),
            proposed: BTreeSet::new(),
            future: Vec::new(),
            failed_rounds: 0,
        };
        s.deadline = round_deadline(now, 0, &timing);
        s
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn deadline(&self) -> Tick {
        self.deadline
    }

    pub fn quorum(&self) -> Quorum {
        self.quorum
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn proposal(&self) -> Option<&B> {
        self.proposal.as_ref()
    }

    pub fn prepared(&self) -> Option<&PreparedCert<B>> {
        self.prepared.as_ref()
    }

    pub fn failed_rounds(&self) -> u64 {
        self.failed_rounds
    }

    /// Prepare or commit voters for `digest` in the current round.
    pub fn vote_count(&self, commit: bool, digest: &Hash256) -> usize {
        let kind = if commit { COMMIT } else { PREPARE };
        self.votes
            .get(&(self.round, kind))
            .and_then(|m| m.get(digest))
            .map_or(0, BTreeSet::len)
    }

    pub fn leader(&self, height: u64, round: u64) -> NodeId {
        let n = self.members.len() as u64;
        self.members[((height % n + round % n) % n) as usize]
    }

    pub fn is_leader(&self) -> bool {
        self.leader(self.height, self.round) == self.id
    }

    fn msg(&self, payload: Payload<B>) -> ConsensusMsg<B> {
        ConsensusMsg {
            height: self.height,
            round: self.round,
            sender: self.id,
            payload,
        }
    }

    /// Announces the initial timer and, for the round-0 leader, asks for a
    /// block.
    pub fn start(&self) -> Output<B> {
        let mut out = Output {
            timer: Some((self.height, self.round, self.deadline)),
            ..Output::default()
        };
        if self.round == 0 && self.is_leader() {
            out.need_proposal = Some((self.height, 0));
        }
        out
    }

    fn enter_round(&mut self, round: u64, now: Tick, out: &mut Output<B>) {
        self.round = round;
        self.round_start = now;
        self.deadline = round_deadline(now, round, &self.timing);
        self.phase = Phase::Idle;
        self.proposal = None;
        self.round_changes.retain(|r, _| *r >= round);
        out.timer = Some((self.height, round, self.deadline));
        out.round_changes += 1;
    }

    fn enter_height(&mut self, height: u64, now: Tick, out: &mut Output<B>) {
        self.height = height;
        self.round = 0;
        self.phase = Phase::Idle;
        self.round_start = now;
        self.deadline = round_deadline(now, 0, &self.timing);
        self.proposal = None;
        self.blocks.clear();
        self.votes.clear();
        self.prepared = None;
        self.round_changes.clear();
        self.proposed.clear();
        self.failed_rounds = 0;
        out.timer = Some((height, 0, self.deadline));
        out.need_proposal = None;
        if self.is_leader() {
            out.need_proposal = Some((height, 0));
        }
    }

    /// Leader-side proposal for the current round. Ignored when this replica
    /// does not lead the round, already proposed, or must re-propose a
    /// prepared block.
    pub fn propose(&mut self, block: B) -> Output<B> {
        let mut out = Output::default();
        if !self.is_leader() || self.proposed.contains(&self.round) || self.phase != Phase::Idle {
            return out;
        }
        if self.round == 0 {
            self.proposed.insert(0);
            out.outbound.push(self.msg(Payload::PrePrepare {
                block,
                justification: Vec::new(),
            }));
            return out;
        }
        let Some(justification) = self.justification() else {
            return out;
        };
        if highest_cert(&justification).is_some() {
            return out;
        }
        self.proposed.insert(self.round);
        out.outbound
            .push(self.msg(Payload::PrePrepare { block, justification }));
        out
    }

    fn justification(&self) -> Option<Vec<RoundChange<B>>> {
        let rcs = self.round_changes.get(&self.round)?;
        if rcs.len() < self.quorum.t_q {
            return None;
        }
        Some(
            rcs.iter()
                .map(|(sender, prepared)| RoundChange {
                    sender: *sender,
                    round: self.round,
                    prepared: prepared.clone(),
                })
                .collect(),
        )
    }

    /// Round leader with a full round-change quorum either re-proposes the
    /// highest prepared block or asks the host for a new one.
    fn try_lead(&mut self, out: &mut Output<B>) {
        if self.round == 0 || !self.is_leader() || self.proposed.contains(&self.round) {
            return;
        }
        let Some(justification) = self.justification() else {
            return;
        };
        match highest_cert(&justification) {
            Some(cert) => {
                let block = cert.block.clone();
                self.proposed.insert(self.round);
                out.outbound
                    .push(self.msg(Payload::PrePrepare { block, justification }));
            }
            None => out.need_proposal = Some((self.height, self.round)),
        }
    }

    /// Restarts the round-0 clock when the host resumes an idle shard.
    /// No-op once a proposal was seen or a round change happened.
    pub fn restart_round(&mut self, now: Tick) -> Output<B> {
        let mut out = Output::default();
        if self.round != 0 || self.phase != Phase::Idle {
            return out;
        }
        self.round_start = now;
        self.deadline = round_deadline(now, 0, &self.timing);
        out.timer = Some((self.height, 0, self.deadline));
        if self.is_leader() && !self.proposed.contains(&0) {
            out.need_proposal = Some((self.height, 0));
        }
        out
    }

    /// Round timer fired.
    pub fn on_timeout(&mut self, now: Tick) -> Output<B> {
        let mut out = Output::default();
        if now < self.deadline || self.phase == Phase::Committed {
            return out;
        }
        self.failed_rounds += 1;
        let next = self.round + 1;
        self.enter_round(next, now, &mut out);
        out.outbound.push(self.msg(Payload::RoundChange(self.prepared.clone())));
        self.round_changes
            .entry(next)
            .or_default()
            .insert(self.id, self.prepared.clone());
        if self.failed_rounds == self.timing.r_max {
            out.escalate = true;
        }
        self.try_lead(&mut out);
        out
    }

    fn cert_ok(&self, cert: &PreparedCert<B>, below: u64) -> bool {
        cert.round < below
            && cert.signers.len() >= self.quorum.t_q
            && cert.signers.iter().all(|s| self.members.contains(s))
    }

    fn justification_ok(&self, round: u64, block: &B, just: &[RoundChange<B>]) -> bool {
        let mut senders = BTreeSet::new();
        for rc in just {
            if rc.round != round || !self.members.contains(&rc.sender) {
                return false;
            }
            if rc.prepared.as_ref().is_some_and(|c| !self.cert_ok(c, round)) {
                return false;
            }
            senders.insert(rc.sender);
        }
        if senders.len() < self.quorum.t_q {
            return false;
        }
        highest_cert(just).is_none_or(|c| c.block.digest() == block.digest())
    }

    /// Feeds one delivered message through the state machine. `valid`
    /// re-executes a proposed block against local state.
    pub fn step(&mut self, msg: ConsensusMsg<B>, now: Tick, valid: &mut dyn FnMut(&B) -> bool) -> Output<B> {
        let mut out = Output::default();
        self.handle(msg, now, valid, &mut out);
        out
    }

    fn handle(&mut self, msg: ConsensusMsg<B>, now: Tick, valid: &mut dyn FnMut(&B) -> bool, out: &mut Output<B>) {
        if !self.members.contains(&msg.sender) || msg.height < self.height {
            return;
        }
        if msg.height > self.height {
            if self.future.len() < FUTURE_CAP {
                self.future.push(msg);
            }
            return;
        }
        match msg.payload {
            Payload::PrePrepare { block, justification } => {
                if msg.round < self.round || msg.sender != self.leader(self.height, msg.round) {
                    return;
                }
                if msg.round == self.round && self.phase != Phase::Idle {
                    return;
                }
                if msg.round > 0 && !self.justification_ok(msg.round, &block, &justification) {
                    return;
                }
                if !valid(&block) {
                    out.invalid_proposer = Some(msg.sender);
                    return;
                }
                if msg.round > self.round {
                    self.enter_round(msg.round, now, out);
                }
                let d = block.digest();
                self.blocks.insert(d, block.clone());
                self.proposal = Some(block);
                self.phase = Phase::PrePrepared;
                out.outbound.push(self.msg(Payload::Prepare(d)));
            }
            Payload::Prepare(d) => {
                self.votes
                    .entry((msg.round, PREPARE))
                    .or_default()
                    .entry(d)
                    .or_default()
                    .insert(msg.sender);
            }
            Payload::Commit(d) => {
                self.votes
                    .entry((msg.round, COMMIT))
                    .or_default()
                    .entry(d)
                    .or_default()
                    .insert(msg.sender);
            }
            Payload::RoundChange(cert) => {
                if msg.round <= self.round && !(msg.round == self.round && self.round > 0) {
                    return;
                }
                if cert.as_ref().is_some_and(|c| !self.cert_ok(c, msg.round)) {
                    return;
                }
                self.round_changes
                    .entry(msg.round)
                    .or_default()
                    .insert(msg.sender, cert);
                self.maybe_jump(now, out);
                self.try_lead(out);
            }
        }
        self.evaluate(now, valid, out);
    }

    /// `f + 1` replicas already moved past our round: follow them.
    fn maybe_jump(&mut self, now: Tick, out: &mut Output<B>) {
        let mut latest: BTreeMap<NodeId, u64> = BTreeMap::new();
        for (r, rcs) in self.round_changes.range(self.round + 1..) {
            for s in rcs.keys() {
                latest.insert(*s, *r);
            }
        }
        if latest.len() <= self.quorum.f {
            return;
        }
        let mut rounds: Vec<u64> = latest.into_values().collect();
        rounds.sort_unstable_by(|a, b| b.cmp(a));
        let target = rounds[self.quorum.f];
        self.failed_rounds += target - self.round;
        self.enter_round(target, now, out);
        out.outbound.push(self.msg(Payload::RoundChange(self.prepared.clone())));
        self.round_changes
            .entry(target)
            .or_default()
            .insert(self.id, self.prepared.clone());
        if self.failed_rounds >= self.timing.r_max {
            out.escalate = true;
        }
    }

    fn evaluate(&mut self, now: Tick, valid: &mut dyn FnMut(&B) -> bool, out: &mut Output<B>) {
        if self.phase == Phase::PrePrepared {
            let d = self.proposal.as_ref().expect("pre-prepared").digest();
            let signers = self
                .votes
                .get(&(self.round, PREPARE))
                .and_then(|m| m.get(&d))
                .cloned()
                .unwrap_or_default();
            if signers.len() >= self.quorum.t_q {
                self.phase = Phase::Prepared;
                self.prepared = Some(PreparedCert {
                    round: self.round,
                    block: self.proposal.clone().expect("pre-prepared"),
                    signers,
                });
                out.outbound.push(self.msg(Payload::Commit(d)));
            }
        }
        let decided = self
            .votes
            .iter()
            .filter(|((_, kind), _)| *kind == COMMIT)
            .flat_map(|(_, m)| m.iter())
            .find(|(d, signers)| signers.len() >= self.quorum.t_q && self.blocks.contains_key(*d))
            .map(|(d, _)| *d);
        if let Some(d) = decided {
            let block = self.blocks[&d].clone();
            self.phase = Phase::Committed;
            out.finalized.push((self.height, block));
            let next = self.height + 1;
            self.enter_height(next, now, out);
            self.replay_future(now, valid, out);
        }
    }

    fn replay_future(&mut self, now: Tick, valid: &mut dyn FnMut(&B) -> bool, out: &mut Output<B>) {
        let pending = std::mem::take(&mut self.future);
        let (now_msgs, later): (Vec<_>, Vec<_>) = pending.into_iter().partition(|m| m.height <= self.height);
        self.future = later;
        for m in now_msgs {
            if m.height == self.height {
                self.handle(m, now, valid, out);
            }
        }
    }

    /// Jumps to `height` after the host synced the chain from peers.
    pub fn sync_to(&mut self, height: u64, now: Tick, valid: &mut dyn FnMut(&B) -> bool) -> Output<B> {
        let mut out = Output::default();
        if height > self.height {
            self.enter_height(height, now, &mut out);
            self.replay_future(now, valid, &mut out);
        }
        out
    }
}

/// Prepared certificate with the highest round among `rcs`.
fn highest_cert<B>(rcs: &[RoundChange<B>]) -> Option<&PreparedCert<B>> {
    rcs.iter().filter_map(|rc| rc.prepared.as_ref()).max_by_key(|c| c.round)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::TestValue;

    fn timing(tau: Tick) -> Timing {
        Timing {
            tau,
            round0_offset: 0,
            r_max: 8,
        }
    }

    fn committee(n: u32, tau: Tick) -> Vec<ConsensusState<TestValue>> {
        let members: Vec<NodeId> = (0..n).map(NodeId).collect();
        members
            .iter()
            .map(|m| ConsensusState::new(*m, members.clone(), 0, 0, timing(tau)))
            .collect()
    }

    /// Synchronous broadcast loop; returns messages received per node by kind.
    fn run_sync(nodes: &mut [ConsensusState<TestValue>], silent: &[NodeId]) -> BTreeMap<(NodeId, &'static str), usize> {
        let mut inbox: Vec<ConsensusMsg<TestValue>> = Vec::new();
        let mut seen = BTreeMap::new();
        for n in nodes.iter_mut() {
            if let Some((_, _)) = n.start().need_proposal {
                if !silent.contains(&n.id()) {
                    inbox.extend(n.propose(TestValue(7)).outbound);
                }
            }
        }
        while !inbox.is_empty() {
            let batch = std::mem::take(&mut inbox);
            for m in batch {
                for n in nodes.iter_mut() {
                    if silent.contains(&n.id()) {
                        continue;
                    }
                    *seen.entry((n.id(), m.payload.kind())).or_insert(0) += 1;
                    let out = n.step(m.clone(), 0, &mut |_| true);
                    inbox.extend(out.outbound);
                }
            }
        }
        seen
    }

    #[test]
    fn four_honest_finalize_with_quadratic_messages() {
        let mut nodes = committee(4, 8);
        let seen = run_sync(&mut nodes, &[]);
        for n in &nodes {
            assert_eq!(n.height(), 1);
            assert_eq!(seen[&(n.id(), "preprepare")], 1);
            assert_eq!(seen[&(n.id(), "prepare")], 4);
            assert_eq!(seen[&(n.id(), "commit")], 4);
        }
        let total: usize = seen.values().sum();
        assert_eq!(total, 4 * 9);
    }

    #[test]
    fn duplicate_prepare_is_idempotent() {
        let mut nodes = committee(4, 8);
        let pp = nodes[0].propose(TestValue(1)).outbound;
        let out = nodes[1].step(pp[0].clone(), 0, &mut |_| true);
        let prep = ConsensusMsg {
            sender: NodeId(2),
            ..out.outbound[0].clone()
        };
        let d = TestValue(1).digest();
        nodes[1].step(prep.clone(), 0, &mut |_| true);
        let before = nodes[1].clone();
        nodes[1].step(prep, 0, &mut |_| true);
        assert_eq!(nodes[1], before);
        assert_eq!(nodes[1].vote_count(false, &d), 1);
    }

    #[test]
    fn invalid_proposal_is_refused() {
        let mut nodes = committee(4, 8);
        let pp = nodes[0].propose(TestValue(1)).outbound;
        let before = nodes[1].clone();
        let out = nodes[1].step(pp[0].clone(), 0, &mut |_| false);
        assert_eq!(out.invalid_proposer, Some(NodeId(0)));
        assert!(out.outbound.is_empty());
        assert_eq!(nodes[1], before);
    }

    #[test]
    fn wrong_leader_is_ignored() {
        let mut nodes = committee(4, 8);
        let fake = ConsensusMsg {
            height: 0,
            round: 0,
            sender: NodeId(2),
            payload: Payload::PrePrepare {
                block: TestValue(3),
                justification: Vec::new(),
            },
        };
        assert!(nodes[1].step(fake, 0, &mut |_| true).outbound.is_empty());
        assert_eq!(nodes[1].phase(), Phase::Idle);
    }

    #[test]
    fn doubling_round_change_schedule() {
        let mut node = committee(4, 8).remove(1);
        let mut fired = Vec::new();
        let mut now = 0;
        for _ in 0..3 {
            now = node.deadline();
            assert!(node.on_timeout(now - 1).outbound.is_empty());
            let out = node.on_timeout(now);
            assert_eq!(out.outbound[0].payload.kind(), "roundchange");
            fired.push(now);
        }
        assert_eq!(fired, vec![8, 24, 56]);
        assert_eq!(node.round(), 3);
        assert_eq!(node.deadline(), now + 64);
    }

    #[test]
    fn escalates_after_r_max() {
        let mut node = committee(4, 1).remove(1);
        let mut escalated = 0;
        for _ in 0..10 {
            let d = node.deadline();
            escalated += node.on_timeout(d).escalate as u32;
        }
        assert_eq!(escalated, 1);
    }
}
