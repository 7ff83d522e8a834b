//! Genesis account layout and the timed transaction stream.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use rand::Rng;
use rand_distr::{Distribution, Exp, Zipf};

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::model::{AccountId, Key256, ShardId, Transaction, TxId};
use crate::partition::RangeTable;
use crate::prf::Prf;

/// Accounts `0..honest` carry the regular workload; the rest belong to the
/// spam stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountLayout {
    pub keys: Vec<Key256>,
    pub honest: usize,
    pub balance: u64,
}

impl AccountLayout {
    pub fn key(&self, a: AccountId) -> Key256 {
        self.keys[a.0 as usize]
    }

    pub fn spam_accounts(&self) -> impl Iterator<Item = AccountId> + '_ {
        (self.honest..self.keys.len()).map(|i| AccountId(i as u64))
    }

    pub fn genesis_total(&self) -> u128 {
        self.balance as u128 * self.keys.len() as u128
    }
}

fn top_key(v: u64) -> Key256 {
    let mut raw = [0u8; 32];
    raw[..8].copy_from_slice(&v.to_be_bytes());
    Key256(raw)
}

/// Keys for every account. With `zipf_by_key` account `i` (popularity rank
/// `i`) sits at the `i`-th evenly spaced point of the key space; otherwise
/// keys are hashed ids. Spam accounts are packed at the bottom of the
/// target shard's range.
pub fn layout_accounts(cfg: &ScenarioConfig, table: &RangeTable) -> Result<AccountLayout> {
    let n = cfg.n_accounts;
    let mut keys: Vec<Key256> = if cfg.zipf_by_key {
        let step = u64::MAX / n as u64;
        (0..n as u64).map(|i| top_key(i * step + step / 2)).collect()
    } else {
        (0..n as u64).map(|i| AccountId(i).key()).collect()
    };
    if cfg.dos_multiplier > 0.0 {
        let range = table
            .range_of(cfg.dos_target())
            .ok_or_else(|| Error::config("dos target shard does not exist"))?;
        let lo = range.lo.to_biguint();
        for j in 0..cfg.dos_senders {
            let k = Key256::from_biguint(&(&lo + BigUint::from(j as u64 + 1)))?;
            if !range.contains(&k) || keys.contains(&k) {
                return Err(Error::config("cannot place spam accounts in the target shard"));
            }
            keys.push(k);
        }
    }
    Ok(AccountLayout {
        keys,
        honest: n,
        balance: cfg.initial_balance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadTx {
    pub tx: Transaction,
    pub spam: bool,
}

/// Poisson arrivals over `[0, duration)`, sorted by submission tick. Ids
/// are assigned in arrival order.
pub fn generate_workload(
    cfg: &ScenarioConfig,
    layout: &AccountLayout,
    table: &RangeTable,
    prf: &Prf,
) -> Result<Vec<WorkloadTx>> {
    let mut by_shard: BTreeMap<ShardId, Vec<AccountId>> = table.shards().map(|s| (s, Vec::new())).collect();
    for i in 0..layout.honest {
        let a = AccountId(i as u64);
        by_shard.entry(table.find_shard(&layout.key(a))).or_default().push(a);
    }
    let shard_of = |a: AccountId| table.find_shard(&layout.key(a));
    let mut out: Vec<(u64, Transaction, bool)> = Vec::new();

    if cfg.tx_rate > 0.0 {
        let mut rng = prf.fork("workload");
        let gap = Exp::new(cfg.tx_rate).map_err(|e| Error::config(format!("tx_rate: {e}")))?;
        let zipf = if cfg.zipf > 0.0 {
            Some(Zipf::new(layout.honest as f64, cfg.zipf).map_err(|e| Error::config(format!("zipf: {e}")))?)
        } else {
            None
        };
        let mut t = 0.0f64;
        loop {
            t += gap.sample(&mut rng);
            if t >= cfg.duration as f64 {
                break;
            }
            let sender = match &zipf {
                Some(z) => AccountId((z.sample(&mut rng) as u64).clamp(1, layout.honest as u64) - 1),
                None => AccountId(rng.random_range(0..layout.honest as u64)),
            };
            let src = shard_of(sender);
            let want_cross = table.len() > 1 && rng.random_bool(cfg.cross_fraction);
            let receiver = if want_cross {
                let others = layout.honest - by_shard[&src].len();
                if others == 0 {
                    sender
                } else {
                    let mut idx = rng.random_range(0..others);
                    let mut pick = sender;
                    for (s, accts) in &by_shard {
                        if *s == src {
                            continue;
                        }
                        if idx < accts.len() {
                            pick = accts[idx];
                            break;
                        }
                        idx -= accts.len();
                    }
                    pick
                }
            } else {
                let local = &by_shard[&src];
                local[rng.random_range(0..local.len())]
            };
            let amount = rng.random_range(1..=cfg.max_amount.max(1));
            let fee = rng.random_range(0..=cfg.max_fee);
            let tx = Transaction::new(
                TxId(0),
                sender,
                receiver,
                amount,
                fee,
                src,
                shard_of(receiver),
                t as u64,
            );
            out.push((t.to_bits(), tx, false));
        }
    }

    if cfg.dos_multiplier > 0.0 && cfg.tx_rate > 0.0 {
        let spam: Vec<AccountId> = layout.spam_accounts().collect();
        let rate = cfg.dos_multiplier * cfg.tx_rate / cfg.n_shards as f64;
        let mut rng = prf.fork("spam");
        let gap = Exp::new(rate).map_err(|e| Error::config(format!("dos rate: {e}")))?;
        let mut t = 0.0f64;
        loop {
            t += gap.sample(&mut rng);
            if t >= cfg.duration as f64 {
                break;
            }
            let i = rng.random_range(0..spam.len());
            let (sender, receiver) = (spam[i], spam[(i + 1) % spam.len()]);
            let shard = cfg.dos_target();
            let tx = Transaction::new(TxId(0), sender, receiver, 1, cfg.max_fee, shard, shard, t as u64);
            out.push((t.to_bits(), tx, true));
        }
    }

    // Positive f64 bit patterns sort like the values.
    out.sort_by_key(|(t, tx, spam)| (*t, *spam, tx.sender));
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut tx, spam))| {
            tx.id = TxId(i as u64);
            WorkloadTx { tx, spam }
        })
        .collect())
}
