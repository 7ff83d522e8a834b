//! Per-shard BFT consensus: quorum arithmetic, reputation, weighted
//! selection for cross-shard duties, validator sets and the three-phase
//! replica state machine.

mod drive;
mod explore;
mod ibft;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{tagged_hash, Domain, Hash256};
use crate::model::{NodeId, ShardId};
use crate::prf::CounterPrf;
use crate::randomness::Randomness;

pub use drive::{run_committee, LivenessReport};
pub use explore::{explore_exhaustive, explore_random, ByzantineMode, ExploreConfig, ExploreReport, TestValue};
pub use ibft::{
    round_deadline, ConsensusMsg, ConsensusState, Output, Payload, Phase, PreparedCert, Proposal, RoundChange, Timing,
};

/// `n`, `f = (n - 1) / 3` and the quorum `T_q = n - f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quorum {
    pub n: usize,
    pub f: usize,
    pub t_q: usize,
}

pub fn quorum_threshold(n: usize) -> Result<Quorum> {
    if n == 0 {
        return Err(Error::domain("committee size must be positive"));
    }
    let f = (n - 1) / 3;
    Ok(Quorum { n, f, t_q: n - f })
}

/// `R_v = w1 * P_v + w2 * T_v`.
pub fn reputation(performance: f64, trust: f64, w1: f64, w2: f64) -> Result<f64> {
    for (name, v) in [("performance", performance), ("trust", trust), ("w1", w1), ("w2", w2)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config(format!("{name} = {v} is outside [0, 1]")));
        }
    }
    if ((w1 + w2) - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "reputation weights sum to {} instead of 1",
            w1 + w2
        )));
    }
    Ok((w1 * performance + w2 * trust).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReputationWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for ReputationWeights {
    fn default() -> Self {
        ReputationWeights { w1: 0.5, w2: 0.5 }
    }
}

/// Rolling reputation inputs for one validator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReputationScore {
    window: VecDeque<bool>,
    valid: u64,
    total: u64,
    penalty: f64,
}

impl Default for ReputationScore {
    fn default() -> Self {
        ReputationScore {
            window: VecDeque::with_capacity(Self::WINDOW),
            valid: 0,
            total: 0,
            penalty: 0.0,
        }
    }
}

impl ReputationScore {
    pub const WINDOW: usize = 100;
    pub const WITHHOLD_PENALTY: f64 = 0.1;

    /// Records whether the validator took part on time in one round.
    pub fn record_round(&mut self, on_time: bool) {
        if self.window.len() == Self::WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(on_time);
    }

    pub fn record_message(&mut self, valid: bool) {
        self.total += 1;
        self.valid += valid as u64;
    }

    /// Beacon reveal withheld.
    pub fn penalize(&mut self, amount: f64) {
        self.penalty += amount;
    }

    /// Fraction of the last 100 rounds with on-time participation.
    pub fn performance(&self) -> f64 {
        if self.window.is_empty() {
            return 1.0;
        }
        self.window.iter().filter(|b| **b).count() as f64 / self.window.len() as f64
    }

    pub fn trust(&self) -> f64 {
        let base = if self.total == 0 {
            1.0
        } else {
            self.valid as f64 / self.total as f64
        };
        (base - self.penalty).max(0.0)
    }

    pub fn value(&self, w: &ReputationWeights) -> f64 {
        reputation(self.performance(), self.trust(), w.w1, w.w2).unwrap_or(0.0)
    }
}

/// Draws `k` distinct candidates without replacement, each draw
/// proportional to the candidate's score among those left. Falls back to
/// uniform when every score is zero.
pub fn weighted_select(candidates: &[(NodeId, f64)], k: usize, seed: &Randomness) -> Result<Vec<NodeId>> {
    if k > candidates.len() {
        return Err(Error::domain(format!(
            "cannot select {k} of {} candidates",
            candidates.len()
        )));
    }
    if candidates.iter().any(|(_, s)| !s.is_finite() || *s < 0.0) {
        return Err(Error::domain("scores must be finite and non-negative"));
    }
    let key = tagged_hash(Domain::Prf, &[b"weighted-select", &seed.value.to_be_bytes()]);
    let mut prf = CounterPrf::new(key);
    let mut pool: Vec<(NodeId, f64)> = candidates.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = pool.iter().map(|(_, s)| s).sum();
        let idx = if total <= 0.0 {
            prf.below(pool.len() as u64) as usize
        } else {
            let mut u = prf.unit() * total;
            let mut pick = pool.len() - 1;
            for (i, (_, s)) in pool.iter().enumerate() {
                if u < *s {
                    pick = i;
                    break;
                }
                u -= s;
            }
            pick
        };
        out.push(pool.remove(idx).0);
    }
    Ok(out)
}

/// Signed vote on `(height, round, digest)`. Signatures are not modelled:
/// the simulator only ever lets a node emit votes under its own id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Vote {
    pub height: u64,
    pub round: u64,
    pub digest: Hash256,
    pub signer: NodeId,
}

/// True iff the votes carry at least `t_q` distinct signers.
pub fn validate_block(votes: &[Vote], t_q: usize) -> Result<bool> {
    if let Some(first) = votes.first() {
        if votes
            .iter()
            .any(|v| (v.height, v.round, v.digest) != (first.height, first.round, first.digest))
        {
            return Err(Error::domain("votes reference different blocks"));
        }
    }
    let signers: BTreeSet<NodeId> = votes.iter().map(|v| v.signer).collect();
    Ok(signers.len() >= t_q)
}

/// Committee of one shard for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatorSet {
    pub shard: ShardId,
    pub members: Vec<NodeId>,
    pub epoch: u64,
    pub scores: BTreeMap<NodeId, ReputationScore>,
}

impl ValidatorSet {
    pub fn new(shard: ShardId, members: Vec<NodeId>, epoch: u64, v_min: usize) -> Result<Self> {
        if members.len() < v_min.max(1) {
            return Err(Error::config(format!(
                "{shard}: committee of {} is below the minimum {v_min}",
                members.len()
            )));
        }
        let mut uniq = members.clone();
        uniq.sort();
        uniq.dedup();
        if uniq.len() != members.len() {
            return Err(Error::config(format!("{shard}: duplicate committee member")));
        }
        let scores = members.iter().map(|m| (*m, ReputationScore::default())).collect();
        Ok(ValidatorSet {
            shard,
            members,
            epoch,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn quorum(&self) -> Quorum {
        quorum_threshold(self.members.len()).expect("non-empty committee")
    }

    pub fn leader(&self, height: u64, round: u64) -> NodeId {
        let n = self.members.len() as u64;
        self.members[((height % n + round % n) % n) as usize]
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }

    pub fn score_mut(&mut self, node: NodeId) -> Option<&mut ReputationScore> {
        self.scores.get_mut(&node)
    }

    /// `(member, R_v)` pairs for weighted selection.
    pub fn weighted(&self, w: &ReputationWeights) -> Vec<(NodeId, f64)> {
        self.members
            .iter()
            .map(|m| (*m, self.scores.get(m).map_or(0.0, |s| s.value(w))))
            .collect()
    }

    /// Digest of the membership list, for epoch summaries.
    pub fn digest(&self) -> Hash256 {
        let bytes: Vec<u8> = self.members.iter().flat_map(|m| m.0.to_be_bytes()).collect();
        tagged_hash(Domain::Trace, &[b"committee", &self.shard.0.to_be_bytes(), &bytes])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quorum_examples() {
        assert_eq!(quorum_threshold(10).unwrap(), Quorum { n: 10, f: 3, t_q: 7 });
        assert_eq!(quorum_threshold(4).unwrap(), Quorum { n: 4, f: 1, t_q: 3 });
        assert_eq!(quorum_threshold(1).unwrap(), Quorum { n: 1, f: 0, t_q: 1 });
        assert!(quorum_threshold(0).is_err());
    }

    #[test]
    fn quorums_intersect_in_f_plus_one() {
        for n in 4..=100 {
            let q = quorum_threshold(n).unwrap();
            assert!(2 * q.t_q - n > q.f, "n = {n}");
        }
    }

    #[test]
    fn reputation_examples() {
        assert!((reputation(0.8, 0.6, 0.5, 0.5).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(reputation(0.3, 0.9, 1.0, 0.0).unwrap(), 0.3);
        for w in [0.0, 0.25, 0.5, 1.0] {
            assert!((reputation(1.0, 1.0, w, 1.0 - w).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(reputation(0.5, 0.5, 0.6, 0.6), Err(Error::Config(_))));
    }

    #[test]
    fn score_window_and_penalty() {
        let mut s = ReputationScore::default();
        for i in 0..150 {
            s.record_round(i % 2 == 0 || i >= 100);
        }
        assert!((s.performance() - 0.75).abs() < 1e-12);
        s.record_message(true);
        s.record_message(false);
        s.penalize(0.1);
        assert!((s.trust() - 0.4).abs() < 1e-12);
        s.penalize(5.0);
        assert_eq!(s.trust(), 0.0);
    }

    #[test]
    fn weighted_select_edge_cases() {
        let c = vec![(NodeId(1), 0.2), (NodeId(2), 0.0), (NodeId(3), 0.9)];
        let mut all = weighted_select(&c, 3, &Randomness::from_value(1)).unwrap();
        all.sort();
        assert_eq!(all, vec![NodeId(1), NodeId(2), NodeId(3)]);
        assert_eq!(
            weighted_select(&[(NodeId(5), 0.4)], 1, &Randomness::from_value(9)).unwrap(),
            vec![NodeId(5)]
        );
        assert!(weighted_select(&c, 4, &Randomness::from_value(1)).is_err());
        let zeros = vec![(NodeId(1), 0.0), (NodeId(2), 0.0)];
        assert_eq!(weighted_select(&zeros, 1, &Randomness::from_value(1)).unwrap().len(), 1);
    }

    #[test]
    fn weighted_select_frequency() {
        let c = vec![(NodeId(0), 0.9), (NodeId(1), 0.1)];
        let hits = (0..10_000u64)
            .filter(|s| weighted_select(&c, 1, &Randomness::from_value(*s)).unwrap()[0] == NodeId(0))
            .count();
        assert!((8730..=9270).contains(&hits), "hits {hits}");
    }

    fn vote(signer: u32) -> Vote {
        Vote {
            height: 1,
            round: 0,
            digest: Hash256::ZERO,
            signer: NodeId(signer),
        }
    }

    #[test]
    fn validate_block_counts_distinct_signers() {
        let seven: Vec<Vote> = (0..7).map(vote).collect();
        assert!(validate_block(&seven, 7).unwrap());
        let mut dup: Vec<Vote> = (0..6).map(vote).collect();
        dup.push(vote(0));
        assert!(!validate_block(&dup, 7).unwrap());
        let mut mixed = seven.clone();
        mixed[0].digest = Hash256([1; 32]);
        assert!(validate_block(&mixed, 7).is_err());
    }

    #[test]
    fn validate_block_exhaustive_over_ten() {
        let t_q = quorum_threshold(10).unwrap().t_q;
        for mask in 0u32..1024 {
            let votes: Vec<Vote> = (0..10).filter(|i| mask >> i & 1 == 1).map(vote).collect();
            assert_eq!(validate_block(&votes, t_q).unwrap(), mask.count_ones() as usize >= t_q);
        }
    }

    #[test]
    fn leader_rotates_round_robin() {
        let vs = ValidatorSet::new(ShardId(0), (0..4).map(NodeId).collect(), 0, 4).unwrap();
        assert_eq!(vs.leader(0, 0), NodeId(0));
        assert_eq!(vs.leader(0, 1), NodeId(1));
        assert_eq!(vs.leader(5, 2), NodeId(3));
        assert!(ValidatorSet::new(ShardId(0), vec![NodeId(1)], 0, 4).is_err());
        assert!(ValidatorSet::new(ShardId(0), vec![NodeId(1), NodeId(1)], 0, 1).is_err());
    }
}
