//! Bounded model checking of the replica state machine: a committee with
//! one Byzantine member, an asynchronous network that may deliver any
//! in-flight message next, and timers that may fire at any moment.
//!
//! The exhaustive search is delay-bounded: the default schedule delivers
//! messages in send order, and a schedule may deviate from it by at most
//! `delay_bound` steps in total (skipping `k` older messages costs `k`,
//! firing a timer costs 1). Every schedule inside the bound is enumerated.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ibft::{ConsensusMsg, ConsensusState, Output, Payload, Proposal, Timing};
use crate::hash::{tagged_hash, Domain, Hash256};
use crate::model::NodeId;

/// Stand-in proposal for model checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TestValue(pub u64);

impl Proposal for TestValue {
    fn digest(&self) -> Hash256 {
        tagged_hash(Domain::Block, &[b"test-value", &self.0.to_be_bytes()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ByzantineMode {
    /// Never sends anything.
    Silent,
    /// Proposes two different values to different peers when leading, and
    /// votes for every value it hears about.
    Equivocate,
}

#[derive(Debug, Clone, Copy)]
pub struct ExploreConfig {
    pub n: u32,
    pub mode: ByzantineMode,
    /// Highest round any honest replica may time out into.
    pub max_round: u64,
    /// Heights beyond this are not explored.
    pub max_height: u64,
    /// Total deviation from send order allowed per schedule.
    pub delay_bound: u32,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            n: 4,
            mode: ByzantineMode::Equivocate,
            max_round: 1,
            max_height: 1,
            delay_bound: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExploreReport {
    pub initial_configs: usize,
    pub transitions: u64,
    /// Schedules that ran until no action was enabled (or the delay budget
    /// left only the default order and it drained).
    pub complete_schedules: u64,
    pub violations: u64,
    /// Honest finalizations summed over complete schedules.
    pub decisions: u64,
}

type Msg = ConsensusMsg<TestValue>;

#[derive(Clone)]
struct World {
    replicas: Vec<ConsensusState<TestValue>>,
    /// Send order.
    inflight: Vec<(NodeId, Msg)>,
    byz_sent: BTreeSet<(u64, u64, u8, Hash256)>,
    decided: BTreeMap<u64, Hash256>,
    violated: bool,
    decisions: u32,
}

#[derive(Clone, Copy)]
enum Action {
    Deliver(usize),
    Timeout(usize),
}

struct Model {
    cfg: ExploreConfig,
    members: Vec<NodeId>,
    byz: NodeId,
}

const START_HEIGHT: u64 = 1;

impl Model {
    fn new(cfg: ExploreConfig) -> Self {
        let members: Vec<NodeId> = (0..cfg.n).map(NodeId).collect();
        // The Byzantine node leads round 0 of the first height.
        let byz = members[(START_HEIGHT % cfg.n as u64) as usize];
        Model { cfg, members, byz }
    }

    fn honest(&self) -> Vec<NodeId> {
        self.members.iter().copied().filter(|m| *m != self.byz).collect()
    }

    fn broadcast(&self, w: &mut World, msg: Msg) {
        if msg.height > self.cfg.max_height {
            return;
        }
        for m in &self.members {
            if *m != self.byz {
                w.inflight.push((*m, msg.clone()));
            }
        }
        self.byz_react(w, &msg);
    }

    /// An equivocator votes for anything it sees proposed and joins every
    /// round change.
    fn byz_react(&self, w: &mut World, msg: &Msg) {
        if self.cfg.mode != ByzantineMode::Equivocate {
            return;
        }
        match &msg.payload {
            Payload::PrePrepare { block, .. } => self.byz_vote(w, msg.height, msg.round, block.digest()),
            Payload::RoundChange(_) => {
                let key = (msg.height, msg.round, 2, Hash256::ZERO);
                if w.byz_sent.insert(key) {
                    let rc = Msg {
                        height: msg.height,
                        round: msg.round,
                        sender: self.byz,
                        payload: Payload::RoundChange(None),
                    };
                    for m in self.honest() {
                        w.inflight.push((m, rc.clone()));
                    }
                }
            }
            _ => {}
        }
    }

    fn byz_vote(&self, w: &mut World, height: u64, round: u64, d: Hash256) {
        if !w.byz_sent.insert((height, round, 0, d)) {
            return;
        }
        for payload in [Payload::Prepare(d), Payload::Commit(d)] {
            let m = Msg {
                height,
                round,
                sender: self.byz,
                payload,
            };
            for h in self.honest() {
                w.inflight.push((h, m.clone()));
            }
        }
    }

    fn absorb(&self, w: &mut World, idx: usize, out: Output<TestValue>) {
        for (h, v) in &out.finalized {
            w.decisions += 1;
            match w.decided.get(h) {
                Some(d) if *d != v.digest() => w.violated = true,
                _ => {
                    w.decided.insert(*h, v.digest());
                }
            }
        }
        for m in out.outbound {
            self.broadcast(w, m);
        }
        if let Some((h, r)) = out.need_proposal {
            let id = w.replicas[idx].id();
            let value = TestValue(1000 * h + 10 * r + id.0 as u64 + 1);
            let out = w.replicas[idx].propose(value);
            self.absorb(w, idx, out);
        }
    }

    /// One initial world per way the Byzantine leader can split the honest
    /// replicas between its two proposals.
    fn initial_worlds(&self) -> Vec<World> {
        let honest = self.honest();
        let timing = Timing {
            tau: 1,
            round0_offset: 0,
            r_max: 64,
        };
        let base = World {
            replicas: honest
                .iter()
                .map(|h| ConsensusState::new(*h, self.members.clone(), START_HEIGHT, 0, timing))
                .collect(),
            inflight: Vec::new(),
            byz_sent: BTreeSet::new(),
            decided: BTreeMap::new(),
            violated: false,
            decisions: 0,
        };
        match self.cfg.mode {
            ByzantineMode::Silent => vec![base],
            ByzantineMode::Equivocate => {
                let (a, b) = (TestValue(901), TestValue(902));
                (0u32..1 << honest.len())
                    .map(|mask| {
                        let mut w = base.clone();
                        for (i, h) in honest.iter().enumerate() {
                            let block = if mask >> i & 1 == 1 { a } else { b };
                            w.inflight.push((
                                *h,
                                Msg {
                                    height: START_HEIGHT,
                                    round: 0,
                                    sender: self.byz,
                                    payload: Payload::PrePrepare {
                                        block,
                                        justification: Vec::new(),
                                    },
                                },
                            ));
                        }
                        self.byz_vote(&mut w, START_HEIGHT, 0, a.digest());
                        self.byz_vote(&mut w, START_HEIGHT, 0, b.digest());
                        w
                    })
                    .collect()
            }
        }
    }

    /// Enabled actions with their delay cost.
    fn actions(&self, w: &World) -> Vec<(Action, u32)> {
        let mut acts: Vec<(Action, u32)> = (0..w.inflight.len()).map(|k| (Action::Deliver(k), k as u32)).collect();
        for (i, r) in w.replicas.iter().enumerate() {
            if r.round() < self.cfg.max_round && r.height() <= self.cfg.max_height {
                acts.push((Action::Timeout(i), 1));
            }
        }
        acts
    }

    fn apply(&self, w: &World, action: Action) -> World {
        let mut w = w.clone();
        match action {
            Action::Deliver(k) => {
                let (to, msg) = w.inflight.remove(k);
                let idx = w.replicas.iter().position(|r| r.id() == to).expect("honest target");
                let out = w.replicas[idx].step(msg, 0, &mut |_| true);
                self.absorb(&mut w, idx, out);
            }
            Action::Timeout(i) => {
                let d = w.replicas[i].deadline();
                let out = w.replicas[i].on_timeout(d);
                self.absorb(&mut w, i, out);
            }
        }
        w
    }
}

/// Enumerates every schedule whose total deviation from send order is at
/// most `cfg.delay_bound`, for every way the Byzantine leader can split its
/// proposals.
pub fn explore_exhaustive(cfg: ExploreConfig) -> ExploreReport {
    let model = Model::new(cfg);
    let mut report = ExploreReport::default();
    let mut frontier: Vec<(World, u32)> = Vec::new();
    for w in model.initial_worlds() {
        report.initial_configs += 1;
        frontier.push((w, cfg.delay_bound));
    }
    // Expand breadth-first until there is enough independent work to
    // spread over threads, then search each subtree depth-first.
    while !frontier.is_empty() && frontier.len() < 256 {
        let mut next = Vec::new();
        for (w, budget) in frontier {
            expand(&model, w, budget, &mut report, &mut next);
        }
        frontier = next;
    }
    let parts: Vec<ExploreReport> = frontier
        .into_par_iter()
        .map(|(w, budget)| {
            let mut r = ExploreReport::default();
            let mut stack = vec![(w, budget)];
            while let Some((w, budget)) = stack.pop() {
                expand(&model, w, budget, &mut r, &mut stack);
            }
            r
        })
        .collect();
    for r in parts {
        report.transitions += r.transitions;
        report.complete_schedules += r.complete_schedules;
        report.violations += r.violations;
        report.decisions += r.decisions;
    }
    report
}

fn expand(model: &Model, w: World, budget: u32, report: &mut ExploreReport, out: &mut Vec<(World, u32)>) {
    if w.violated {
        report.violations += 1;
        report.complete_schedules += 1;
        return;
    }
    let acts: Vec<(Action, u32)> = model
        .actions(&w)
        .into_iter()
        .filter(|(_, cost)| *cost <= budget)
        .collect();
    if acts.is_empty() {
        report.complete_schedules += 1;
        report.decisions += w.decisions as u64;
        return;
    }
    for (a, cost) in acts {
        report.transitions += 1;
        out.push((model.apply(&w, a), budget - cost));
    }
}

/// `schedules` random complete interleavings.
pub fn explore_random(cfg: ExploreConfig, schedules: u64, seed: u64) -> ExploreReport {
    let model = Model::new(cfg);
    let inits = model.initial_worlds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ExploreReport {
        initial_configs: inits.len(),
        ..Default::default()
    };
    for _ in 0..schedules {
        let mut w = inits[rng.random_range(0..inits.len())].clone();
        loop {
            let acts = model.actions(&w);
            if acts.is_empty() || w.violated {
                break;
            }
            // Timers are rarer than deliveries so most schedules reach a
            // decision before rounds change.
            let delivers = w.inflight.len();
            let a = if delivers > 0 && rng.random_bool(0.9) {
                Action::Deliver(rng.random_range(0..delivers))
            } else {
                acts[rng.random_range(0..acts.len())].0
            };
            w = model.apply(&w, a);
            report.transitions += 1;
        }
        report.complete_schedules += 1;
        report.decisions += w.decisions as u64;
        report.violations += w.violated as u64;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silent_small_search_is_safe_and_decides() {
        let r = explore_exhaustive(ExploreConfig {
            mode: ByzantineMode::Silent,
            max_round: 1,
            delay_bound: 2,
            ..Default::default()
        });
        assert_eq!(r.violations, 0);
        assert!(r.decisions > 0);
        assert!(r.complete_schedules > 1);
    }

    #[test]
    fn zero_delay_is_a_single_schedule() {
        let r = explore_exhaustive(ExploreConfig {
            mode: ByzantineMode::Silent,
            delay_bound: 0,
            ..Default::default()
        });
        assert_eq!(r.complete_schedules, 1);
    }

    #[test]
    fn random_equivocation_is_safe() {
        let r = explore_random(ExploreConfig::default(), 500, 1);
        assert_eq!(r.violations, 0);
        assert!(r.decisions > 0);
    }
}
