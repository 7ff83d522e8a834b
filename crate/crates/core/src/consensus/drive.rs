//! Runs one committee over a simulated network for a number of heights,
//! with some members silent. Used to measure liveness and the round timer
//! schedule in isolation from the ledger.

use std::collections::{BTreeMap, BTreeSet};

use super::explore::TestValue;
use super::ibft::{ConsensusMsg, ConsensusState, Output, Timing};
use crate::error::{Error, Result};
use crate::model::{NodeId, Tick};
use crate::prf::Prf;
use crate::sim::{EventQueue, NetworkModel};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LivenessReport {
    /// Rounds used per height (1 = decided in round 0).
    pub rounds_per_height: Vec<u64>,
    /// Observed round durations, keyed by round number.
    pub timer_durations: BTreeMap<u64, BTreeSet<Tick>>,
    pub messages: u64,
    pub escalations: u64,
    pub finished_at: Tick,
}

impl LivenessReport {
    pub fn max_rounds(&self) -> u64 {
        self.rounds_per_height.iter().copied().max().unwrap_or(0)
    }
}

enum Ev {
    Msg(ConsensusMsg<TestValue>),
    Timer(u64, u64),
    Propose(u64, u64),
}

/// Drives `n` replicas (members `0..n`) until every honest replica decided
/// `heights` heights. Fails on disagreement or if `deadline` passes first.
pub fn run_committee(
    n: u32,
    silent: &[NodeId],
    heights: u64,
    timing: Timing,
    net: &NetworkModel,
    seed: u64,
    deadline: Tick,
) -> Result<LivenessReport> {
    let members: Vec<NodeId> = (0..n).map(NodeId).collect();
    let honest: Vec<NodeId> = members.iter().copied().filter(|m| !silent.contains(m)).collect();
    let mut replicas: BTreeMap<NodeId, ConsensusState<TestValue>> = honest
        .iter()
        .map(|m| (*m, ConsensusState::new(*m, members.clone(), 1, 0, timing)))
        .collect();
    let mut rng = Prf::new(seed).fork("liveness-net");
    let mut queue: EventQueue<Ev> = EventQueue::new();
    let mut report = LivenessReport::default();
    let mut decided: BTreeMap<u64, TestValue> = BTreeMap::new();
    let mut decided_by: BTreeMap<u64, usize> = BTreeMap::new();
    let mut round_at_decision: BTreeMap<u64, u64> = BTreeMap::new();

    let starts: Vec<(NodeId, Output<TestValue>)> = replicas.iter().map(|(id, r)| (*id, r.start())).collect();
    let mut pending: Vec<(NodeId, Output<TestValue>, Tick)> = starts.into_iter().map(|(id, o)| (id, o, 0)).collect();

    loop {
        for (id, out, now) in pending.drain(..) {
            report.escalations += out.escalate as u64;
            if let Some((h, r, at)) = out.timer {
                report.timer_durations.entry(r).or_default().insert(at - now);
                queue.schedule(at, id, Ev::Timer(h, r))?;
            }
            if let Some((h, r)) = out.need_proposal {
                queue.schedule(now, id, Ev::Propose(h, r))?;
            }
            for (h, v) in out.finalized {
                match decided.get(&h) {
                    Some(prev) if *prev != v => {
                        return Err(Error::invariant(format!("conflicting decisions at height {h}")));
                    }
                    Some(_) => {}
                    None => {
                        decided.insert(h, v);
                    }
                }
                *decided_by.entry(h).or_default() += 1;
            }
            for m in out.outbound {
                for to in &members {
                    report.messages += 1;
                    if let Some(lat) = net.transit(id, *to, &mut rng) {
                        queue.schedule(now + lat, *to, Ev::Msg(m.clone()))?;
                    }
                }
            }
        }
        let all_done = (1..=heights).all(|h| decided_by.get(&h).copied().unwrap_or(0) == honest.len());
        if all_done {
            break;
        }
        let Some(ev) = queue.pop() else {
            return Err(Error::invariant("committee stalled with an empty event queue"));
        };
        if ev.at > deadline {
            return Err(Error::invariant(format!("heights not decided by tick {deadline}")));
        }
        let now = ev.at;
        let Some(rep) = replicas.get_mut(&ev.target) else {
            continue;
        };
        let before = (rep.height(), rep.round());
        let out = match ev.payload {
            Ev::Msg(m) => rep.step(m, now, &mut |_| true),
            Ev::Timer(h, r) if (h, r) == before => rep.on_timeout(now),
            Ev::Propose(h, r) if (h, r) == before => rep.propose(TestValue(h * 1000 + r)),
            _ => continue,
        };
        if !out.finalized.is_empty() {
            round_at_decision.entry(before.0).or_insert(before.1);
        }
        pending.push((ev.target, out, now));
        report.finished_at = now;
    }
    report.rounds_per_height = (1..=heights)
        .map(|h| round_at_decision.get(&h).map_or(0, |r| r + 1))
        .collect();
    Ok(report)
}
