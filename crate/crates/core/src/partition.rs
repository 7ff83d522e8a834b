//! Key-space partitioning: the range table, routing of nodes, transactions
//! and data to shards, skew measurement and split/merge arithmetic.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{hash_key, Key256, NodeId, ShardId, Transaction};

/// Width of the key space. Production uses 256 bits; tests may shrink it to
/// make exhaustive checks cheap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySpace {
    pub bits: u32,
}

impl KeySpace {
    pub const FULL: KeySpace = KeySpace { bits: 256 };

    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > 256 {
            return Err(Error::domain(format!("key width {bits} not in 1..=256")));
        }
        Ok(KeySpace { bits })
    }

    /// Number of keys, 2^bits.
    pub fn size(&self) -> BigUint {
        BigUint::from(1u8) << self.bits as usize
    }

    /// Maps a full-width key into this space.
    pub fn project(&self, key: &Key256) -> Key256 {
        key.truncate_to(self.bits)
    }
}

/// Half-open interval `[lo, hi)`; `hi = None` means "to the top of the key
/// space".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Range {
    pub lo: Key256,
    pub hi: Option<Key256>,
}

impl Range {
    pub fn new(lo: Key256, hi: Option<Key256>) -> Result<Self> {
        if hi.is_some_and(|h| h <= lo) {
            return Err(Error::domain("range requires lo < hi"));
        }
        Ok(Range { lo, hi })
    }

    pub fn full() -> Self {
        Range {
            lo: Key256::ZERO,
            hi: None,
        }
    }

    pub fn contains(&self, key: &Key256) -> bool {
        *key >= self.lo && self.hi.is_none_or(|h| *key < h)
    }

    pub fn hi_hex(&self) -> String {
        self.hi.map_or_else(|| "top".to_string(), |h| h.to_hex())
    }
}

/// Splits `range` at the load median of `occupied` (sorted keys inside the
/// range, repeats allowed): the smallest occupied key `k` such that at least
/// half of the entries are `< k`. Returns `None` when fewer than two distinct
/// keys are occupied.
pub fn split_range(range: &Range, occupied: &[Key256]) -> Option<(Range, Range)> {
    let n = occupied.len();
    if n < 2 {
        return None;
    }
    debug_assert!(occupied.windows(2).all(|w| w[0] <= w[1]), "histogram must be sorted");
    let need = n.div_ceil(2);
    // occupied[i] has exactly i entries before it only at the first index of
    // each run of equal keys.
    let mut i = 0;
    while i < n {
        let k = occupied[i];
        if i >= need && k > range.lo && range.contains(&k) {
            return Some((
                Range {
                    lo: range.lo,
                    hi: Some(k),
                },
                Range { lo: k, hi: range.hi },
            ));
        }
        while i < n && occupied[i] == k {
            i += 1;
        }
    }
    None
}

/// `[a.lo, b.hi)` for adjacent ranges.
pub fn merge_ranges(a: &Range, b: &Range) -> Result<Range> {
    if a.hi != Some(b.lo) {
        return Err(Error::domain("ranges are not adjacent"));
    }
    Ok(Range { lo: a.lo, hi: b.hi })
}

/// σ = max(count) · n / Σ count.
pub fn skew_ratio(row_counts: &[u64]) -> Result<f64> {
    if row_counts.is_empty() {
        return Err(Error::domain("skew ratio needs at least one shard"));
    }
    let total: u128 = row_counts.iter().map(|c| *c as u128).sum();
    if total == 0 {
        return Err(Error::domain("skew ratio undefined for zero total"));
    }
    let max = *row_counts.iter().max().expect("non-empty") as f64;
    Ok(max * row_counts.len() as f64 / total as f64)
}

/// Ordered, contiguous partition of the key space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeTable {
    space: KeySpace,
    ranges: Vec<(ShardId, Range)>,
}

impl RangeTable {
    /// Builds a table and checks the partition invariants.
    pub fn from_ranges(space: KeySpace, ranges: Vec<(ShardId, Range)>) -> Result<Self> {
        let table = RangeTable { space, ranges };
        table.validate()?;
        Ok(table)
    }

    pub fn space(&self) -> KeySpace {
        self.space
    }

    pub fn ranges(&self) -> &[(ShardId, Range)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn shards(&self) -> impl Iterator<Item = ShardId> + '_ {
        self.ranges.iter().map(|(s, _)| *s)
    }

    pub fn range_of(&self, shard: ShardId) -> Option<Range> {
        self.ranges.iter().find(|(s, _)| *s == shard).map(|(_, r)| *r)
    }

    fn position(&self, shard: ShardId) -> Option<usize> {
        self.ranges.iter().position(|(s, _)| *s == shard)
    }

    /// Disjoint, covering, abutting, sorted; shard ids unique.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .ranges
            .first()
            .ok_or_else(|| Error::invariant("range table is empty"))?;
        if first.1.lo != Key256::ZERO {
            return Err(Error::invariant("first range must start at zero"));
        }
        for w in self.ranges.windows(2) {
            let (a, b) = (&w[0].1, &w[1].1);
            if a.hi != Some(b.lo) {
                return Err(Error::invariant("consecutive ranges must abut"));
            }
            if b.hi.is_some_and(|h| h <= b.lo) {
                return Err(Error::invariant("empty range"));
            }
        }
        if first.1.hi.is_some_and(|h| h <= first.1.lo) {
            return Err(Error::invariant("empty range"));
        }
        if self.ranges.last().expect("non-empty").1.hi.is_some() {
            return Err(Error::invariant("last range must reach the top of the key space"));
        }
        let mut ids: Vec<ShardId> = self.shards().collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.ranges.len() {
            return Err(Error::invariant("duplicate shard id in range table"));
        }
        Ok(())
    }

    /// Binary search over lower bounds.
    pub fn find_shard(&self, key: &Key256) -> ShardId {
        let idx = self.ranges.partition_point(|(_, r)| r.lo <= *key);
        self.ranges[idx.saturating_sub(1)].0
    }

    /// Routes a full-width key, projecting it into a narrow test space first.
    pub fn route(&self, key: &Key256) -> ShardId {
        self.find_shard(&self.space.project(key))
    }

    /// New table with `shard` split at `at`; the upper half becomes
    /// `new_shard`, inserted right after it.
    pub fn split(&self, shard: ShardId, at: Key256, new_shard: ShardId) -> Result<RangeTable> {
        let pos = self
            .position(shard)
            .ok_or_else(|| Error::domain(format!("unknown {shard}")))?;
        let r = self.ranges[pos].1;
        if !(r.contains(&at) && at > r.lo) {
            return Err(Error::domain("split key must lie strictly inside the range"));
        }
        let mut ranges = self.ranges.clone();
        ranges[pos].1 = Range { lo: r.lo, hi: Some(at) };
        ranges.insert(pos + 1, (new_shard, Range { lo: at, hi: r.hi }));
        RangeTable::from_ranges(self.space, ranges)
    }

    /// New table where adjacent `b` is absorbed into `a`.
    pub fn merge(&self, a: ShardId, b: ShardId) -> Result<RangeTable> {
        let pa = self.position(a).ok_or_else(|| Error::domain(format!("unknown {a}")))?;
        let pb = self.position(b).ok_or_else(|| Error::domain(format!("unknown {b}")))?;
        if pb != pa + 1 {
            return Err(Error::domain(format!("{a} and {b} are not adjacent")));
        }
        let merged = merge_ranges(&self.ranges[pa].1, &self.ranges[pb].1)?;
        let mut ranges = self.ranges.clone();
        ranges[pa].1 = merged;
        ranges.remove(pb);
        RangeTable::from_ranges(self.space, ranges)
    }

    /// Rows `(shard, lo-hex, hi-hex)` for reports.
    pub fn rows(&self) -> Vec<(ShardId, String, String)> {
        self.ranges
            .iter()
            .map(|(s, r)| (*s, r.lo.to_hex(), r.hi_hex()))
            .collect()
    }
}

/// Equal-width partition of the 256-bit space.
pub fn init_ranges(n_shards: usize) -> Result<RangeTable> {
    init_ranges_in(KeySpace::FULL, n_shards)
}

/// Equal-width partition; when the space is not divisible by `n_shards` the
/// first `remainder` ranges are one key wider.
pub fn init_ranges_in(space: KeySpace, n_shards: usize) -> Result<RangeTable> {
    if n_shards == 0 {
        return Err(Error::domain("n_shards must be at least 1"));
    }
    let size = space.size();
    let n = BigUint::from(n_shards);
    if size < n {
        return Err(Error::domain("more shards than keys"));
    }
    let width = &size / &n;
    let rem = &size % &n;
    let mut ranges = Vec::with_capacity(n_shards);
    let mut lo = BigUint::from(0u8);
    for i in 0..n_shards {
        let w = if BigUint::from(i) < rem {
            &width + 1u8
        } else {
            width.clone()
        };
        let hi = &lo + &w;
        let hi_key = if i + 1 == n_shards {
            None
        } else {
            Some(Key256::from_biguint(&hi)?)
        };
        ranges.push((
            ShardId(i as u32),
            Range {
                lo: Key256::from_biguint(&lo)?,
                hi: hi_key,
            },
        ));
        lo = hi;
    }
    RangeTable::from_ranges(space, ranges)
}

/// Opaque payload paired with a transaction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataItem(pub Vec<u8>);

/// Node, transaction and data placement produced by [`distribute`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShardAssignment {
    pub node_map: BTreeMap<ShardId, Vec<NodeId>>,
    pub tx_map: BTreeMap<ShardId, Vec<Transaction>>,
    pub data_map: BTreeMap<ShardId, Vec<DataItem>>,
}

/// Places every node by the hash of its id and every `(tx, data)` pair by
/// the transaction's routing key, so a transaction and its data always land
/// in the same shard. `data[i]` is paired with `txs[i]`; unpaired
/// transactions carry no data.
pub fn distribute(
    nodes: &[NodeId],
    txs: &[Transaction],
    data: &[DataItem],
    table: &RangeTable,
) -> Result<ShardAssignment> {
    if data.len() > txs.len() {
        return Err(Error::domain("more data items than transactions"));
    }
    let mut out = ShardAssignment::default();
    for s in table.shards() {
        out.node_map.insert(s, Vec::new());
        out.tx_map.insert(s, Vec::new());
        out.data_map.insert(s, Vec::new());
    }
    for n in nodes {
        let shard = table.route(&n.key());
        out.node_map.get_mut(&shard).expect("shard exists").push(*n);
    }
    for (i, tx) in txs.iter().enumerate() {
        let shard = table.route(&tx.routing_key());
        out.tx_map.get_mut(&shard).expect("shard exists").push(tx.clone());
        if let Some(d) = data.get(i) {
            out.data_map.get_mut(&shard).expect("shard exists").push(d.clone());
        }
    }
    Ok(out)
}

/// Routing key of an arbitrary identifier.
pub fn key_of(bytes: &[u8]) -> Result<Key256> {
    hash_key(bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{AccountId, TxId};

    fn k(v: u64) -> Key256 {
        Key256::from_u64(v)
    }

    fn r(lo: u64, hi: Option<u64>) -> Range {
        Range {
            lo: k(lo),
            hi: hi.map(k),
        }
    }

    fn bits8() -> KeySpace {
        KeySpace::new(8).unwrap()
    }

    /// Width of a range inside an 8-bit space.
    fn width8(range: &Range) -> u64 {
        range.hi.map_or(256, |h| h.low_u64()) - range.lo.low_u64()
    }

    #[test]
    fn one_shard_covers_everything() {
        let t = init_ranges(1).unwrap();
        assert_eq!(t.ranges(), &[(ShardId(0), Range::full())]);
    }

    #[test]
    fn four_shards_over_eight_bits() {
        let t = init_ranges_in(bits8(), 4).unwrap();
        let got: Vec<_> = t.ranges().iter().map(|(_, r)| (r.lo.low_u64(), width8(r))).collect();
        assert_eq!(got, vec![(0, 64), (64, 64), (128, 64), (192, 64)]);
    }

    #[test]
    fn three_shards_spread_remainder() {
        let t = init_ranges_in(bits8(), 3).unwrap();
        let widths: Vec<u64> = t.ranges().iter().map(|(_, r)| width8(r)).collect();
        assert_eq!(widths, vec![86, 85, 85]);
        assert_eq!(widths.iter().sum::<u64>(), 256);
    }

    #[test]
    fn full_width_ranges_differ_by_at_most_one() {
        let t = init_ranges(7).unwrap();
        let top = KeySpace::FULL.size();
        let widths: Vec<BigUint> = t
            .ranges()
            .iter()
            .map(|(_, r)| r.hi.map_or(top.clone(), |h| h.to_biguint()) - r.lo.to_biguint())
            .collect();
        let max = widths.iter().max().unwrap();
        let min = widths.iter().min().unwrap();
        assert!(max - min <= BigUint::from(1u8));
    }

    #[test]
    fn zero_shards_is_an_error() {
        assert!(init_ranges(0).is_err());
    }

    #[test]
    fn find_shard_half_open() {
        let t = RangeTable::from_ranges(
            bits8(),
            vec![
                (ShardId(0), r(0, Some(100))),
                (ShardId(1), r(100, Some(200))),
                (ShardId(2), r(200, None)),
            ],
        )
        .unwrap();
        assert_eq!(t.find_shard(&k(150)), ShardId(1));
        assert_eq!(t.find_shard(&k(100)), ShardId(1));
        assert_eq!(t.find_shard(&k(99)), ShardId(0));
        assert_eq!(t.find_shard(&k(255)), ShardId(2));
    }

    fn random_table(rng: &mut ChaCha8Rng) -> RangeTable {
        let n = rng.random_range(1..12);
        let mut cuts: Vec<u64> = (0..n - 1).map(|_| rng.random_range(1..256)).collect();
        cuts.sort();
        cuts.dedup();
        let mut bounds = vec![0];
        bounds.extend(cuts);
        let ranges = bounds
            .iter()
            .enumerate()
            .map(|(i, lo)| (ShardId(i as u32), r(*lo, bounds.get(i + 1).copied())))
            .collect();
        RangeTable::from_ranges(bits8(), ranges).unwrap()
    }

    #[test]
    fn find_shard_matches_linear_scan_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let t = random_table(&mut rng);
            for key in 0..256u64 {
                let hits: Vec<ShardId> = t
                    .ranges()
                    .iter()
                    .filter(|(_, r)| r.contains(&k(key)))
                    .map(|(s, _)| *s)
                    .collect();
                assert_eq!(hits.len(), 1, "key {key}");
                assert_eq!(t.find_shard(&k(key)), hits[0]);
            }
        }
    }

    #[test]
    fn distribute_empty_inputs() {
        let t = init_ranges(3).unwrap();
        let a = distribute(&[], &[], &[], &t).unwrap();
        assert_eq!(a.node_map.len(), 3);
        assert!(a.node_map.values().all(Vec::is_empty));
        assert!(a.tx_map.values().all(Vec::is_empty));
    }

    #[test]
    fn distribute_partitions_nodes() {
        let t = init_ranges(4).unwrap();
        let nodes: Vec<NodeId> = (0..1000).map(NodeId).collect();
        let a = distribute(&nodes, &[], &[], &t).unwrap();
        let mut all: Vec<NodeId> = a.node_map.values().flatten().copied().collect();
        all.sort();
        assert_eq!(all, nodes);
        for (shard, members) in &a.node_map {
            for n in members {
                assert_eq!(t.find_shard(&n.key()), *shard);
            }
        }
    }

    fn tx_from(sender: u64) -> Transaction {
        Transaction::new(
            TxId(sender),
            AccountId(sender),
            AccountId(sender + 1),
            1,
            0,
            ShardId(0),
            ShardId(0),
            0,
        )
    }

    #[test]
    fn distribute_txs_is_roughly_uniform_and_pairs_data() {
        let t = init_ranges(10).unwrap();
        let txs: Vec<Transaction> = (0..10_000).map(tx_from).collect();
        let data: Vec<DataItem> = (0..10_000u64).map(|i| DataItem(i.to_be_bytes().to_vec())).collect();
        let a = distribute(&[], &txs, &data, &t).unwrap();
        for (shard, list) in &a.tx_map {
            assert!((950..=1050).contains(&list.len()), "{shard}: {}", list.len());
            let data_ids: Vec<u64> = a.data_map[shard]
                .iter()
                .map(|d| u64::from_be_bytes(d.0.clone().try_into().unwrap()))
                .collect();
            let tx_ids: Vec<u64> = list.iter().map(|t| t.id.0).collect();
            assert_eq!(data_ids, tx_ids);
            for tx in list {
                assert_eq!(t.find_shard(&tx.routing_key()), *shard);
            }
        }
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew_ratio(&[100, 100, 100, 100]).unwrap(), 1.0);
        assert_eq!(skew_ratio(&[400, 0, 0, 0]).unwrap(), 4.0);
        assert_eq!(skew_ratio(&[17]).unwrap(), 1.0);
        assert!(skew_ratio(&[0, 0]).is_err());
        assert!(skew_ratio(&[]).is_err());
    }

    #[test]
    fn split_at_load_median() {
        let keys: Vec<Key256> = [10, 20, 30, 40].map(k).to_vec();
        assert_eq!(
            split_range(&r(0, Some(100)), &keys),
            Some((r(0, Some(30)), r(30, Some(100))))
        );
        let keys: Vec<Key256> = [10, 99].map(k).to_vec();
        assert_eq!(
            split_range(&r(0, Some(100)), &keys),
            Some((r(0, Some(99)), r(99, Some(100))))
        );
    }

    #[test]
    fn split_needs_two_distinct_keys() {
        assert_eq!(split_range(&r(0, Some(100)), &[k(5)]), None);
        assert_eq!(split_range(&r(0, Some(100)), &[k(5), k(5), k(5)]), None);
    }

    #[test]
    fn split_uniform_thousand_keys_near_middle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut keys: Vec<Key256> = (0..1000).map(|_| k(rng.random_range(0..256))).collect();
        keys.sort();
        let (lo, _) = split_range(&r(0, None), &keys).unwrap();
        let at = lo.hi.unwrap().low_u64();
        assert!((120..=136).contains(&at), "split at {at}");
    }

    #[test]
    fn merge_requires_adjacency() {
        assert_eq!(
            merge_ranges(&r(0, Some(50)), &r(50, Some(100))).unwrap(),
            r(0, Some(100))
        );
        assert!(merge_ranges(&r(0, Some(50)), &r(60, Some(100))).is_err());
    }

    #[test]
    fn table_split_and_merge() {
        let t = init_ranges_in(bits8(), 2).unwrap();
        let s = t.split(ShardId(0), k(40), ShardId(9)).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.find_shard(&k(50)), ShardId(9));
        let m = s.merge(ShardId(0), ShardId(9)).unwrap();
        assert_eq!(m, t);
        assert!(s.merge(ShardId(0), ShardId(1)).is_err());
    }

    proptest! {
        #[test]
        fn split_then_merge_is_identity(lo in 0u64..200, span in 2u64..56, raw in proptest::collection::vec(0u64..1000, 2..60)) {
            let hi = lo + span;
            let range = r(lo, Some(hi));
            let mut keys: Vec<Key256> = raw.iter().map(|v| k(lo + v % span)).collect();
            keys.sort();
            if let Some((a, b)) = split_range(&range, &keys) {
                prop_assert!(a.hi == Some(b.lo));
                prop_assert!(a.lo < b.lo);
                prop_assert_eq!(merge_ranges(&a, &b).unwrap(), range);
                let below = keys.iter().filter(|x| **x < b.lo).count();
                prop_assert!(below * 2 >= keys.len());
            }
        }

        #[test]
        fn split_merge_sequences_keep_partition(ops in proptest::collection::vec((0u8..2, 0usize..16, 1u64..255), 1..40)) {
            let mut t = init_ranges_in(bits8(), 3).unwrap();
            let mut next = 3u32;
            for (op, idx, at) in ops {
                let i = idx % t.len();
                let (shard, range) = t.ranges()[i];
                if op == 0 {
                    if range.contains(&k(at)) && k(at) > range.lo {
                        t = t.split(shard, k(at), ShardId(next)).unwrap();
                        next += 1;
                    }
                } else if i + 1 < t.len() {
                    let other = t.ranges()[i + 1].0;
                    t = t.merge(shard, other).unwrap();
                }
                prop_assert!(t.validate().is_ok());
                for key in (0..256u64).step_by(7) {
                    let s = t.find_shard(&k(key));
                    prop_assert!(t.range_of(s).unwrap().contains(&k(key)));
                }
            }
        }
    }
}
