//! Epoch boundaries: measure per-shard workload, plan splits and merges,
//! migrate balances into the new partition and rotate committees.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::consensus::ValidatorSet;
use crate::error::{Error, Result};
use crate::hash::Hash256;
use crate::model::{Key256, Ledger, NodeId, ShardId, ShardState, Tick};
use crate::partition::{skew_ratio, split_range, RangeTable};
use crate::randomness::{random_beacon, Randomness};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochConfig {
    /// Ticks between transitions; 0 disables epochs.
    pub length: Tick,
    /// Explicit split threshold; defaults to `hi_factor` times the mean.
    pub w_hi: Option<u64>,
    /// Explicit merge threshold; defaults to `lo_factor` times the mean.
    pub w_lo: Option<u64>,
    pub hi_factor: f64,
    pub lo_factor: f64,
    pub v_min: usize,
    pub committee_size: usize,
}

impl Default for EpochConfig {
    fn default() -> Self {
        EpochConfig {
            length: 0,
            w_hi: None,
            w_lo: None,
            hi_factor: 2.0,
            lo_factor: 0.25,
            v_min: 4,
            committee_size: 7,
        }
    }
}

impl EpochConfig {
    pub fn validate(&self) -> Result<()> {
        if let (Some(hi), Some(lo)) = (self.w_hi, self.w_lo) {
            if lo >= hi {
                return Err(Error::config("merge threshold must be below the split threshold"));
            }
        }
        if self.lo_factor >= self.hi_factor || self.lo_factor < 0.0 {
            return Err(Error::config("lo_factor must be in [0, hi_factor)"));
        }
        if self.v_min < 4 && self.v_min != 1 {
            return Err(Error::config(
                "v_min must be at least 4 (or 1 for single-validator tests)",
            ));
        }
        if self.committee_size < self.v_min {
            return Err(Error::config("committee size is below v_min"));
        }
        Ok(())
    }

    /// `(W_hi, W_lo)` for this epoch's workloads.
    pub fn thresholds(&self, workloads: &BTreeMap<ShardId, u64>) -> (f64, f64) {
        let mean = if workloads.is_empty() {
            0.0
        } else {
            workloads.values().sum::<u64>() as f64 / workloads.len() as f64
        };
        (
            self.w_hi.map_or(self.hi_factor * mean, |v| v as f64),
            self.w_lo.map_or(self.lo_factor * mean, |v| v as f64),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Leg {
    Intra,
    /// One side of a cross-shard transfer.
    Cross,
}

/// `R(t)`: one unit per intra-shard transfer, two per cross-shard leg.
pub fn default_cost(leg: Leg) -> u64 {
    match leg {
        Leg::Intra => 1,
        Leg::Cross => 2,
    }
}

/// `W(S) = sum of R(t)` over the transactions the shard processed.
pub fn shard_workload<T>(txs: &[T], cost: impl Fn(&T) -> u64) -> u64 {
    txs.iter().map(cost).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReconfigAction {
    Split {
        shard: ShardId,
        at: Key256,
        new_shard: ShardId,
    },
    Merge {
        a: ShardId,
        b: ShardId,
    },
    Rotate {
        shard: ShardId,
        members: Vec<NodeId>,
    },
}

impl ReconfigAction {
    pub fn label(&self) -> String {
        match self {
            ReconfigAction::Split { shard, new_shard, .. } => format!("split {shard}->{new_shard}"),
            ReconfigAction::Merge { a, b } => format!("merge {a}+{b}"),
            ReconfigAction::Rotate { shard, members } => format!("rotate {shard}({})", members.len()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconfigPlan {
    pub actions: Vec<ReconfigAction>,
    /// Overloaded shards that could not be split.
    pub skipped: Vec<ShardId>,
}

impl ReconfigPlan {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Splits every shard above `W_hi` at its load median, then merges
/// adjacent cold pairs greedily from the left. `histograms` holds, per
/// shard, the sorted multiset of touched keys.
pub fn plan_reconfiguration(
    workloads: &BTreeMap<ShardId, u64>,
    table: &RangeTable,
    cfg: &EpochConfig,
    histograms: &BTreeMap<ShardId, Vec<Key256>>,
) -> ReconfigPlan {
    let (hi, lo) = cfg.thresholds(workloads);
    let w = |s: ShardId| workloads.get(&s).copied().unwrap_or(0) as f64;
    let mut plan = ReconfigPlan::default();
    let mut used = BTreeSet::new();
    let mut next_id = table.shards().map(|s| s.0).max().map_or(0, |m| m + 1);
    for (shard, range) in table.ranges() {
        if w(*shard) <= hi {
            continue;
        }
        let keys = histograms.get(shard).map(Vec::as_slice).unwrap_or(&[]);
        match split_range(range, keys) {
            Some((_, upper)) => {
                plan.actions.push(ReconfigAction::Split {
                    shard: *shard,
                    at: upper.lo,
                    new_shard: ShardId(next_id),
                });
                next_id += 1;
                used.insert(*shard);
            }
            None => plan.skipped.push(*shard),
        }
    }
    let ranges = table.ranges();
    let mut i = 0;
    while i + 1 < ranges.len() {
        let (a, b) = (ranges[i].0, ranges[i + 1].0);
        let cold = |s| w(s) < lo && !used.contains(&s);
        if cold(a) && cold(b) && w(a) + w(b) < hi {
            plan.actions.push(ReconfigAction::Merge { a, b });
            used.insert(a);
            used.insert(b);
            i += 2;
        } else {
            i += 1;
        }
    }
    plan
}

/// Skew ratio of `keys` (already in table coordinates) under `table`,
/// counting empty shards.
pub fn skew_of(table: &RangeTable, keys: &[Key256]) -> Result<f64> {
    let mut counts: BTreeMap<ShardId, u64> = table.shards().map(|s| (s, 0)).collect();
    for k in keys {
        *counts.entry(table.find_shard(k)).or_default() += 1;
    }
    skew_ratio(&counts.into_values().collect::<Vec<_>>())
}

/// Applies the split/merge actions of `plan`: builds the new table, moves
/// every account to the ledger that owns its key and seals a
/// reconfiguration block on each touched shard.
pub fn apply_plan(
    table: &RangeTable,
    shards: &BTreeMap<ShardId, ShardState>,
    plan: &ReconfigPlan,
    now: Tick,
) -> Result<(RangeTable, BTreeMap<ShardId, ShardState>)> {
    for (id, s) in shards {
        if !s.ledger.is_quiescent() {
            return Err(Error::invariant(format!(
                "{id} has in-flight cross-shard state at the epoch boundary"
            )));
        }
    }
    let mut new_table = table.clone();
    let mut touched: BTreeSet<ShardId> = BTreeSet::new();
    let mut retired: BTreeMap<ShardId, ShardId> = BTreeMap::new();
    for action in &plan.actions {
        match action {
            ReconfigAction::Split { shard, at, new_shard } => {
                new_table = new_table.split(*shard, *at, *new_shard)?;
                touched.extend([*shard, *new_shard]);
            }
            ReconfigAction::Merge { a, b } => {
                new_table = new_table.merge(*a, *b)?;
                touched.insert(*a);
                retired.insert(*b, *a);
            }
            ReconfigAction::Rotate { .. } => {}
        }
    }
    if touched.is_empty() && retired.is_empty() {
        return Ok((new_table, shards.clone()));
    }
    let mut fresh: BTreeMap<ShardId, Ledger> = touched
        .iter()
        .map(|s| {
            let range = new_table
                .range_of(*s)
                .ok_or_else(|| Error::invariant(format!("{s} missing after reconfiguration")))?;
            Ok((*s, Ledger::new(*s, range)))
        })
        .collect::<Result<_>>()?;
    for (id, state) in shards {
        let moving = touched.contains(id) || retired.contains_key(id);
        if !moving {
            continue;
        }
        for (key, account) in state.ledger.accounts_by_key() {
            let owner = new_table.find_shard(&key);
            let ledger = fresh
                .get_mut(&owner)
                .ok_or_else(|| Error::invariant(format!("account {account} migrated to untouched {owner}")))?;
            ledger
                .insert_keyed(account, key, state.ledger.balance(account))
                .map_err(|e| Error::invariant(format!("migration: {e}")))?;
        }
        let heir = retired.get(id).copied().unwrap_or(*id);
        if let Some(l) = fresh.get_mut(&heir) {
            l.absorb_burned(state.ledger.burned());
        }
    }
    let mut out = BTreeMap::new();
    for (id, state) in shards {
        if retired.contains_key(id) {
            continue;
        }
        match fresh.remove(id) {
            Some(ledger) => {
                let mut s = state.clone();
                s.ledger = ledger;
                s.seal_reconfiguration(now);
                out.insert(*id, s);
            }
            None => {
                out.insert(*id, state.clone());
            }
        }
    }
    for (id, ledger) in fresh {
        out.insert(id, ShardState::genesis(ledger, now));
    }
    Ok((new_table, out))
}

/// Draws one committee per shard from `pool` with the beacon. Committees
/// are disjoint while the pool lasts, then drawn from the whole pool.
pub fn rotate_committees(
    pool: &[NodeId],
    shards: &[ShardId],
    seed: &Randomness,
    cfg: &EpochConfig,
    epoch: u64,
) -> Result<BTreeMap<ShardId, ValidatorSet>> {
    let mut sorted = pool.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut remaining = sorted.clone();
    let mut out = BTreeMap::new();
    for shard in shards {
        let source = if remaining.len() >= cfg.committee_size.max(cfg.v_min) {
            &remaining
        } else {
            &sorted
        };
        let members = random_beacon(source, *shard, seed, cfg.committee_size, cfg.v_min)?;
        remaining.retain(|n| !members.contains(n));
        out.insert(*shard, ValidatorSet::new(*shard, members, epoch, cfg.v_min)?);
    }
    Ok(out)
}

/// Network-wide state that changes at epoch boundaries.
#[derive(Debug, Clone)]
pub struct EpochState {
    pub epoch: u64,
    pub table: RangeTable,
    pub shards: BTreeMap<ShardId, ShardState>,
    pub committees: BTreeMap<ShardId, ValidatorSet>,
}

impl EpochState {
    /// Sum of balances plus burned fees over every shard.
    pub fn total_value(&self) -> u128 {
        self.shards
            .values()
            .map(|s| s.ledger.total_balance() + s.ledger.burned() as u128)
            .sum()
    }

    pub fn committee_digests(&self) -> Vec<(ShardId, Hash256)> {
        self.committees.iter().map(|(s, v)| (*s, v.digest())).collect()
    }
}

/// Applies `plan`, then rotates every committee with `seed`. Rotation
/// actions are appended to the returned plan.
pub fn transition_epoch(
    state: &EpochState,
    plan: &ReconfigPlan,
    seed: &Randomness,
    pool: &[NodeId],
    cfg: &EpochConfig,
    now: Tick,
) -> Result<(EpochState, ReconfigPlan)> {
    let (table, shards) = apply_plan(&state.table, &state.shards, plan, now)?;
    table.validate()?;
    for (id, s) in &shards {
        for (key, account) in s.ledger.accounts_by_key() {
            if table.find_shard(&key) != *id {
                return Err(Error::invariant(format!(
                    "account {account} outside {id} after migration"
                )));
            }
        }
    }
    let order: Vec<ShardId> = table.shards().collect();
    let epoch = state.epoch + 1;
    let committees = rotate_committees(pool, &order, seed, cfg, epoch)?;
    let mut full = plan.clone();
    for (shard, vs) in &committees {
        full.actions.push(ReconfigAction::Rotate {
            shard: *shard,
            members: vs.members.clone(),
        });
    }
    Ok((
        EpochState {
            epoch,
            table,
            shards,
            committees,
        },
        full,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AccountId;
    use crate::partition::{init_ranges_in, KeySpace};
    use proptest::prelude::*;

    fn k(v: u64) -> Key256 {
        Key256::from_u64(v)
    }

    fn narrow_state(n_shards: usize, accounts: &[(u64, u64)]) -> EpochState {
        let table = init_ranges_in(KeySpace::new(8).unwrap(), n_shards).unwrap();
        let mut shards = BTreeMap::new();
        for (id, range) in table.ranges() {
            let mut l = Ledger::new(*id, *range);
            for (key, bal) in accounts {
                if range.contains(&k(*key)) {
                    l.insert_keyed(AccountId(*key), k(*key), *bal).unwrap();
                }
            }
            shards.insert(*id, ShardState::genesis(l, 0));
        }
        let pool: Vec<NodeId> = (0..40).map(NodeId).collect();
        let order: Vec<ShardId> = table.shards().collect();
        let committees = rotate_committees(&pool, &order, &Randomness::from_value(1), &cfg(), 0).unwrap();
        EpochState {
            epoch: 0,
            table,
            shards,
            committees,
        }
    }

    fn cfg() -> EpochConfig {
        EpochConfig {
            committee_size: 4,
            ..EpochConfig::default()
        }
    }

    fn balances(s: &EpochState) -> BTreeMap<AccountId, u64> {
        s.shards
            .values()
            .flat_map(|sh| sh.ledger.balances().iter().map(|(a, b)| (*a, *b)))
            .collect()
    }

    #[test]
    fn workload_cost_model() {
        assert_eq!(shard_workload::<Leg>(&[], |l| default_cost(*l)), 0);
        let mut legs = vec![Leg::Intra; 10];
        legs.extend(vec![Leg::Cross; 5]);
        assert_eq!(shard_workload(&legs, |l| default_cost(*l)), 20);
    }

    #[test]
    fn plan_is_empty_inside_thresholds() {
        let s = narrow_state(3, &[]);
        let w = BTreeMap::from([(ShardId(0), 100), (ShardId(1), 90), (ShardId(2), 110)]);
        assert!(plan_reconfiguration(&w, &s.table, &cfg(), &BTreeMap::new()).is_empty());
    }

    #[test]
    fn hot_shard_splits_and_cold_pair_merges() {
        let s = narrow_state(3, &[]);
        let w = BTreeMap::from([(ShardId(0), 300), (ShardId(1), 10), (ShardId(2), 10)]);
        let c = EpochConfig {
            w_hi: Some(200),
            w_lo: Some(50),
            ..cfg()
        };
        let hist = BTreeMap::from([(ShardId(0), vec![k(5), k(10), k(20), k(40), k(60)])]);
        let plan = plan_reconfiguration(&w, &s.table, &c, &hist);
        assert_eq!(
            plan.actions,
            vec![
                ReconfigAction::Split {
                    shard: ShardId(0),
                    at: k(40),
                    new_shard: ShardId(3)
                },
                ReconfigAction::Merge {
                    a: ShardId(1),
                    b: ShardId(2)
                },
            ]
        );
    }

    #[test]
    fn three_cold_neighbours_merge_once() {
        let s = narrow_state(4, &[]);
        let w = BTreeMap::from([(ShardId(0), 1), (ShardId(1), 1), (ShardId(2), 1), (ShardId(3), 400)]);
        let plan = plan_reconfiguration(&w, &s.table, &cfg(), &BTreeMap::new());
        let merges: Vec<_> = plan
            .actions
            .iter()
            .filter(|a| matches!(a, ReconfigAction::Merge { .. }))
            .collect();
        assert_eq!(
            merges,
            vec![&ReconfigAction::Merge {
                a: ShardId(0),
                b: ShardId(1)
            }]
        );
        assert_eq!(plan.skipped, vec![ShardId(3)]);
    }

    #[test]
    fn split_migrates_accounts_and_conserves_value() {
        let s = narrow_state(1, &[(10, 50), (90, 70)]);
        let plan = ReconfigPlan {
            actions: vec![ReconfigAction::Split {
                shard: ShardId(0),
                at: k(60),
                new_shard: ShardId(1),
            }],
            skipped: vec![],
        };
        let (next, full) = transition_epoch(&s, &plan, &Randomness::from_value(9), &pool(), &cfg(), 100).unwrap();
        assert_eq!(
            next.shards[&ShardId(0)].ledger.balances(),
            &BTreeMap::from([(AccountId(10), 50)])
        );
        assert_eq!(
            next.shards[&ShardId(1)].ledger.balances(),
            &BTreeMap::from([(AccountId(90), 70)])
        );
        assert_eq!(next.total_value(), s.total_value());
        assert_eq!(full.actions.len(), 3);
        for sh in next.shards.values() {
            sh.verify_chain().unwrap();
        }
    }

    fn pool() -> Vec<NodeId> {
        (0..40).map(NodeId).collect()
    }

    #[test]
    fn empty_plan_only_rotates() {
        let s = narrow_state(3, &[(10, 5), (100, 6), (200, 7)]);
        let (next, _) = transition_epoch(
            &s,
            &ReconfigPlan::default(),
            &Randomness::from_value(3),
            &pool(),
            &cfg(),
            50,
        )
        .unwrap();
        assert_eq!(balances(&next), balances(&s));
        assert_eq!(next.table, s.table);
        assert_ne!(next.committee_digests(), s.committee_digests());
        for vs in next.committees.values() {
            assert!(vs.len() >= cfg().v_min);
        }
    }

    #[test]
    fn transition_is_deterministic() {
        let s = narrow_state(2, &[(3, 1), (130, 2), (131, 3)]);
        let plan = ReconfigPlan {
            actions: vec![ReconfigAction::Merge {
                a: ShardId(0),
                b: ShardId(1),
            }],
            skipped: vec![],
        };
        let run = || {
            transition_epoch(&s, &plan, &Randomness::from_value(5), &pool(), &cfg(), 10)
                .unwrap()
                .0
        };
        let (a, b) = (run(), run());
        assert_eq!(a.table, b.table);
        assert_eq!(a.committee_digests(), b.committee_digests());
        let heads = |e: &EpochState| e.shards.values().map(|s| s.head().hash()).collect::<Vec<_>>();
        assert_eq!(heads(&a), heads(&b));
        assert_eq!(a.shards.len(), 1);
        assert_eq!(balances(&a), balances(&s));
    }

    #[test]
    fn busy_shard_blocks_transition() {
        let mut s = narrow_state(1, &[(10, 50)]);
        let sh = s.shards.get_mut(&ShardId(0)).unwrap();
        sh.ledger
            .acquire_locks(
                &[AccountId(10)],
                crate::model::TxId(1),
                0,
                &Default::default(),
                crate::model::LockRole::Source,
            )
            .unwrap()
            .unwrap();
        let err = transition_epoch(
            &s,
            &ReconfigPlan::default(),
            &Randomness::from_value(1),
            &pool(),
            &cfg(),
            1,
        );
        assert!(matches!(err, Err(Error::Invariant(_))));
    }

    #[test]
    fn splitting_a_skewed_histogram_lowers_skew() {
        let s = narrow_state(4, &[]);
        let mut keys: Vec<Key256> = (0..200).map(|i| k(i % 20)).collect();
        keys.extend((0..30).map(|i| k(64 + i * 6)));
        keys.sort();
        let before = skew_of(&s.table, &keys).unwrap();
        assert!(before >= 2.0);
        let mut hist: BTreeMap<ShardId, Vec<Key256>> = BTreeMap::new();
        let mut w: BTreeMap<ShardId, u64> = s.table.shards().map(|s| (s, 0)).collect();
        for key in &keys {
            let sh = s.table.find_shard(key);
            hist.entry(sh).or_default().push(*key);
            *w.get_mut(&sh).unwrap() += 1;
        }
        let plan = plan_reconfiguration(&w, &s.table, &cfg(), &hist);
        let (table, _) = apply_plan(&s.table, &s.shards, &plan, 1).unwrap();
        assert!(skew_of(&table, &keys).unwrap() < before);
    }

    proptest! {
        #[test]
        fn planned_reconfiguration_preserves_partition_and_balances(
            accts in proptest::collection::btree_map(0u64..256, 1u64..1000, 2..60),
            loads in proptest::collection::vec(0u64..500, 4),
        ) {
            let list: Vec<(u64, u64)> = accts.into_iter().collect();
            let s = narrow_state(4, &list);
            let w: BTreeMap<ShardId, u64> = loads.iter().enumerate().map(|(i, l)| (ShardId(i as u32), *l)).collect();
            let mut hist: BTreeMap<ShardId, Vec<Key256>> = BTreeMap::new();
            for (key, _) in &list {
                hist.entry(s.table.find_shard(&k(*key))).or_default().push(k(*key));
            }
            let plan = plan_reconfiguration(&w, &s.table, &cfg(), &hist);
            let (next, _) = transition_epoch(&s, &plan, &Randomness::from_value(2), &pool(), &cfg(), 7).unwrap();
            next.table.validate().unwrap();
            prop_assert_eq!(balances(&next), balances(&s));
            prop_assert_eq!(next.total_value(), s.total_value());
            prop_assert_eq!(next.shards.len(), next.table.len());
        }
    }
}
