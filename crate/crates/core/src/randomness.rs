//! Commit-reveal randomness and the beacon that rotates shard committees.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{tagged_hash, Domain, Encoder, Hash256};
use crate::model::{NodeId, ShardId, Tick};
use crate::prf::CounterPrf;
use crate::sim::{EventQueue, NetworkModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum AggregationMode {
    #[default]
    Xor,
    Average,
}

/// `H(0x03 || v || r)` with `v` and `r` fixed-width big-endian.
pub fn commit(value: u64, nonce: u128) -> Hash256 {
    let enc = Encoder::new().u64(value).u128(nonce).finish();
    tagged_hash(Domain::Commitment, &[&enc])
}

pub fn verify_reveal(commitment: &Hash256, value: u64, nonce: u128) -> bool {
    commit(value, nonce) == *commitment
}

pub fn aggregate(values: &[u64], mode: AggregationMode) -> Result<u64> {
    if values.is_empty() {
        return Err(Error::domain("aggregate needs at least one value"));
    }
    Ok(match mode {
        AggregationMode::Xor => values.iter().fold(0, |acc, v| acc ^ v),
        AggregationMode::Average => {
            let sum: u128 = values.iter().map(|v| *v as u128).sum();
            (sum / values.len() as u128) as u64
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Randomness {
    pub value: u64,
    pub contributors: BTreeSet<NodeId>,
}

impl Randomness {
    /// Fixed value with no contributors; genesis and tests.
    pub fn from_value(value: u64) -> Self {
        Randomness {
            value,
            contributors: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Committing,
    Revealing,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RevealError {
    WrongPhase,
    NotCommitted,
    Mismatch,
    Duplicate,
}

/// State of one beacon round.
#[derive(Debug, Clone)]
pub struct CommitRevealRound {
    pub round: u64,
    pub mode: AggregationMode,
    phase: Phase,
    commitments: BTreeMap<NodeId, Hash256>,
    reveals: BTreeMap<NodeId, (u64, u128)>,
}

/// Result of a closed round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutcome {
    pub randomness: Randomness,
    /// Committed but never produced a valid reveal in time.
    pub withheld: Vec<NodeId>,
}

impl CommitRevealRound {
    pub fn new(round: u64, mode: AggregationMode) -> Self {
        CommitRevealRound {
            round,
            mode,
            phase: Phase::Committing,
            commitments: BTreeMap::new(),
            reveals: BTreeMap::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn commitments(&self) -> &BTreeMap<NodeId, Hash256> {
        &self.commitments
    }

    pub fn reveals(&self) -> &BTreeMap<NodeId, (u64, u128)> {
        &self.reveals
    }

    /// First commitment per participant wins.
    pub fn submit_commit(&mut self, from: NodeId, c: Hash256) -> Result<(), RevealError> {
        if self.phase != Phase::Committing {
            return Err(RevealError::WrongPhase);
        }
        if self.commitments.contains_key(&from) {
            return Err(RevealError::Duplicate);
        }
        self.commitments.insert(from, c);
        Ok(())
    }

    pub fn close_commits(&mut self) {
        if self.phase == Phase::Committing {
            self.phase = Phase::Revealing;
        }
    }

    pub fn submit_reveal(&mut self, from: NodeId, value: u64, nonce: u128) -> Result<(), RevealError> {
        if self.phase != Phase::Revealing {
            return Err(RevealError::WrongPhase);
        }
        let c = self.commitments.get(&from).ok_or(RevealError::NotCommitted)?;
        if self.reveals.contains_key(&from) {
            return Err(RevealError::Duplicate);
        }
        if !verify_reveal(c, value, nonce) {
            return Err(RevealError::Mismatch);
        }
        self.reveals.insert(from, (value, nonce));
        Ok(())
    }

    /// Aggregate of the reveals accepted so far, excluding `without`.
    pub fn preview(&self, without: Option<NodeId>) -> Option<u64> {
        let vals: Vec<u64> = self
            .reveals
            .iter()
            .filter(|(id, _)| Some(**id) != without)
            .map(|(_, (v, _))| *v)
            .collect();
        aggregate(&vals, self.mode).ok()
    }

    /// Closes the round. Non-revealers are excluded from the output.
    pub fn finish(&mut self) -> Result<RoundOutcome> {
        self.close_commits();
        self.phase = Phase::Complete;
        let values: Vec<u64> = self.reveals.values().map(|(v, _)| *v).collect();
        if values.is_empty() {
            return Err(Error::BeaconFailure { round: self.round });
        }
        let withheld = self
            .commitments
            .keys()
            .filter(|id| !self.reveals.contains_key(id))
            .copied()
            .collect();
        Ok(RoundOutcome {
            randomness: Randomness {
                value: aggregate(&values, self.mode)?,
                contributors: self.reveals.keys().copied().collect(),
            },
            withheld,
        })
    }
}

/// How a participant behaves in a beacon round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BeaconStrategy {
    Honest,
    /// Commits, never reveals.
    Withhold,
    /// Waits for every other reveal, then reveals only if that puts the
    /// output's top bit equal to `target_high`.
    LastRevealer {
        target_high: bool,
    },
}

/// Phase deadline: twice the network's latency bound.
pub fn phase_deadline(net: &NetworkModel) -> Tick {
    2 * net.latency.bound().max(1)
}

#[derive(Debug, Clone)]
enum BeaconMsg {
    Commit(Hash256),
    Reveal(u64, u128),
    /// Adversary wake-up to decide on its reveal.
    Decide,
}

/// Transcript of a round for audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundTranscript {
    pub commitments: BTreeMap<NodeId, Hash256>,
    pub reveals: BTreeMap<NodeId, u64>,
    pub outcome: std::result::Result<RoundOutcome, Error>,
}

/// Runs one commit-reveal round. Participants post to a shared bulletin
/// over `net`; anything arriving after a phase deadline counts as withheld.
/// Values and nonces come from `rng`.
pub fn run_round<R: Rng + ?Sized>(
    round: u64,
    participants: &[(NodeId, BeaconStrategy)],
    mode: AggregationMode,
    net: &NetworkModel,
    rng: &mut R,
) -> Result<RoundTranscript> {
    if !participants.iter().any(|(_, s)| *s == BeaconStrategy::Honest) {
        return Err(Error::domain("a beacon round needs at least one honest participant"));
    }
    const BULLETIN: NodeId = NodeId(u32::MAX - 1);
    let deadline = phase_deadline(net);
    let mut state = CommitRevealRound::new(round, mode);
    let mut secrets = BTreeMap::new();
    let mut queue: EventQueue<(NodeId, BeaconMsg)> = EventQueue::new();
    for (id, _) in participants {
        let v: u64 = rng.random();
        let r: u128 = rng.random();
        secrets.insert(*id, (v, r));
        if let Some(lat) = net.transit(*id, BULLETIN, rng) {
            queue.schedule(lat, BULLETIN, (*id, BeaconMsg::Commit(commit(v, r))))?;
        }
    }
    let reveal_deadline = 2 * deadline;
    let mut phase_two_started = false;
    loop {
        let next = queue.peek_time();
        if !phase_two_started && next.is_none_or(|t| t > deadline) {
            phase_two_started = true;
            queue.advance_to(deadline);
            state.close_commits();
            for (id, strategy) in participants {
                if *strategy != BeaconStrategy::Honest || !state.commitments().contains_key(id) {
                    continue;
                }
                let (v, r) = secrets[id];
                if let Some(lat) = net.transit(*id, BULLETIN, rng) {
                    queue.schedule(deadline + lat, BULLETIN, (*id, BeaconMsg::Reveal(v, r)))?;
                }
            }
            // Adversaries decide at the latest moment a reveal can still make
            // the deadline, after every honest reveal has landed.
            for (id, strategy) in participants {
                if matches!(strategy, BeaconStrategy::LastRevealer { .. }) && state.commitments().contains_key(id) {
                    let at = reveal_deadline.saturating_sub(net.latency.bound());
                    queue.schedule(at.max(deadline), *id, (*id, BeaconMsg::Decide))?;
                }
            }
            continue;
        }
        let Some(ev) = queue.pop() else { break };
        if ev.at > reveal_deadline {
            break;
        }
        let (from, msg) = ev.payload;
        match msg {
            BeaconMsg::Commit(c) if ev.at <= deadline => {
                let _ = state.submit_commit(from, c);
            }
            BeaconMsg::Commit(_) => {}
            BeaconMsg::Reveal(v, r) => {
                let _ = state.submit_reveal(from, v, r);
            }
            BeaconMsg::Decide => {
                let strategy = participants.iter().find(|(id, _)| *id == from).map(|(_, s)| *s);
                if let Some(BeaconStrategy::LastRevealer { target_high }) = strategy {
                    let (v, r) = secrets[&from];
                    let mut with = state.clone();
                    let _ = with.submit_reveal(from, v, r);
                    let hits = |x: Option<u64>| x.is_some_and(|x| (x >> 63 == 1) == target_high);
                    if hits(with.preview(None)) {
                        let at = queue.now() + net.latency.bound();
                        queue.schedule(at, BULLETIN, (from, BeaconMsg::Reveal(v, r)))?;
                    }
                }
            }
        }
    }
    let reveals = state.reveals().iter().map(|(id, (v, _))| (*id, *v)).collect();
    let commitments = state.commitments().clone();
    let outcome = state.finish();
    Ok(RoundTranscript {
        commitments,
        reveals,
        outcome,
    })
}

/// Committee for `shard` in the next epoch: a Fisher-Yates shuffle of
/// `pool` driven by a counter-mode PRF keyed by `H(seed || shard)`, keeping
/// the first `max(v_min, committee_size)` candidates.
pub fn random_beacon(
    pool: &[NodeId],
    shard: ShardId,
    seed: &Randomness,
    committee_size: usize,
    v_min: usize,
) -> Result<Vec<NodeId>> {
    let take = committee_size.max(v_min);
    if pool.len() < v_min {
        return Err(Error::config(format!(
            "candidate pool of {} is below the minimum committee size {v_min}",
            pool.len()
        )));
    }
    if pool.len() < take {
        return Err(Error::config(format!(
            "candidate pool of {} cannot fill a committee of {take}",
            pool.len()
        )));
    }
    let key = tagged_hash(
        Domain::Prf,
        &[b"beacon", &seed.value.to_be_bytes(), &shard.0.to_be_bytes()],
    );
    let mut prf = CounterPrf::new(key);
    let mut order: Vec<NodeId> = pool.to_vec();
    order.sort();
    // Only the first `take` positions are needed.
    for i in 0..take {
        let j = i + prf.below((order.len() - i) as u64) as usize;
        order.swap(i, j);
    }
    order.truncate(take);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;
    use crate::prf::Prf;

    fn honest(n: u32) -> Vec<(NodeId, BeaconStrategy)> {
        (0..n).map(|i| (NodeId(i), BeaconStrategy::Honest)).collect()
    }

    #[test]
    fn commit_is_deterministic_and_binding() {
        assert_eq!(commit(7, 9), commit(7, 9));
        let mut rng = Prf::new(3);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let v = rng.next_u64();
            let r1: u128 = rng.random();
            let r2: u128 = rng.random();
            if r1 != r2 {
                assert_ne!(commit(v, r1), commit(v, r2));
            }
            assert_ne!(commit(v, r1), commit(v.wrapping_add(1), r1));
            assert!(seen.insert(commit(v, r1)));
        }
    }

    #[test]
    fn verify_reveal_exhaustive_at_toy_width() {
        let c = commit(0x5a, 0x3c);
        for v in 0..256u64 {
            for r in 0..256u128 {
                assert_eq!(verify_reveal(&c, v, r), v == 0x5a && r == 0x3c);
            }
        }
        assert!(!verify_reveal(&c, 0x5b, 0x3c));
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[5, 3, 6], AggregationMode::Xor).unwrap(), 0);
        assert_eq!(aggregate(&[42], AggregationMode::Xor).unwrap(), 42);
        assert_eq!(aggregate(&[2, 4, 6], AggregationMode::Average).unwrap(), 4);
        assert_eq!(
            aggregate(&[u64::MAX, u64::MAX], AggregationMode::Average).unwrap(),
            u64::MAX
        );
        assert!(aggregate(&[], AggregationMode::Xor).is_err());
    }

    #[test]
    fn reveal_requires_commit_and_match() {
        let mut r = CommitRevealRound::new(0, AggregationMode::Xor);
        r.submit_commit(NodeId(1), commit(10, 1)).unwrap();
        assert_eq!(r.submit_reveal(NodeId(1), 10, 1), Err(RevealError::WrongPhase));
        r.close_commits();
        assert_eq!(r.submit_commit(NodeId(2), commit(1, 1)), Err(RevealError::WrongPhase));
        assert_eq!(r.submit_reveal(NodeId(2), 1, 1), Err(RevealError::NotCommitted));
        assert_eq!(r.submit_reveal(NodeId(1), 11, 1), Err(RevealError::Mismatch));
        r.submit_reveal(NodeId(1), 10, 1).unwrap();
        let out = r.finish().unwrap();
        assert_eq!(out.randomness.value, 10);
        assert_eq!(r.phase(), Phase::Complete);
    }

    #[test]
    fn all_honest_round_uses_every_value() {
        let mut rng = Prf::new(5);
        let t = run_round(0, &honest(6), AggregationMode::Xor, &NetworkModel::default(), &mut rng).unwrap();
        let out = t.outcome.unwrap();
        assert_eq!(out.randomness.contributors.len(), 6);
        assert!(out.withheld.is_empty());
        let vals: Vec<u64> = t.reveals.values().copied().collect();
        assert_eq!(out.randomness.value, aggregate(&vals, AggregationMode::Xor).unwrap());
    }

    #[test]
    fn withholder_is_excluded_and_flagged() {
        let mut ps = honest(5);
        ps[2].1 = BeaconStrategy::Withhold;
        let mut rng = Prf::new(6);
        let t = run_round(0, &ps, AggregationMode::Xor, &NetworkModel::default(), &mut rng).unwrap();
        let out = t.outcome.unwrap();
        assert_eq!(out.withheld, vec![NodeId(2)]);
        assert!(!out.randomness.contributors.contains(&NodeId(2)));
        let vals: Vec<u64> = t.reveals.values().copied().collect();
        assert_eq!(vals.len(), 4);
        assert_eq!(out.randomness.value, aggregate(&vals, AggregationMode::Xor).unwrap());
    }

    #[test]
    fn no_honest_participant_is_rejected() {
        let mut rng = Prf::new(6);
        let ps = vec![(NodeId(0), BeaconStrategy::Withhold)];
        assert!(run_round(0, &ps, AggregationMode::Xor, &NetworkModel::default(), &mut rng).is_err());
    }

    #[test]
    fn lost_messages_mean_round_failure() {
        let mut rng = Prf::new(6);
        let net = NetworkModel {
            drop_rate: 1.0,
            ..NetworkModel::default()
        };
        let t = run_round(4, &honest(3), AggregationMode::Xor, &net, &mut rng).unwrap();
        assert_eq!(t.outcome, Err(Error::BeaconFailure { round: 4 }));
    }

    #[test]
    fn pool_of_exactly_v_min() {
        let pool: Vec<NodeId> = (0..4).map(NodeId).collect();
        for s in 0..20 {
            let mut got = random_beacon(&pool, ShardId(1), &Randomness::from_value(s), 4, 4).unwrap();
            got.sort();
            assert_eq!(got, pool);
        }
        assert!(random_beacon(&pool, ShardId(1), &Randomness::from_value(0), 4, 5).is_err());
    }

    #[test]
    fn beacon_is_deterministic_and_shard_dependent() {
        let pool: Vec<NodeId> = (0..50).map(NodeId).collect();
        let seed = Randomness::from_value(77);
        let a = random_beacon(&pool, ShardId(0), &seed, 10, 4).unwrap();
        assert_eq!(a, random_beacon(&pool, ShardId(0), &seed, 10, 4).unwrap());
        assert_ne!(a, random_beacon(&pool, ShardId(1), &seed, 10, 4).unwrap());
        let mut uniq = a.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
    }

    #[test]
    fn selection_frequency_matches_binomial() {
        let pool: Vec<NodeId> = (0..20).map(NodeId).collect();
        let mut counts = [0u32; 20];
        for s in 0..10_000u64 {
            for n in random_beacon(&pool, ShardId(0), &Randomness::from_value(s), 5, 4).unwrap() {
                counts[n.0 as usize] += 1;
            }
        }
        for c in counts {
            assert!((2350..=2650).contains(&c), "count {c}");
        }
    }
}
