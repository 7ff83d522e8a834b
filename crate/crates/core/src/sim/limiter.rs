//! Per-sender admission control at the mempool.

use std::collections::{BTreeMap, VecDeque};

use crate::config::DosDefense;
use crate::model::{AccountId, Tick};

#[derive(Debug, Clone, Default)]
struct SenderState {
    recent: VecDeque<Tick>,
    blocked_until: Tick,
    offences: u32,
}

/// Sliding-window rate limiter. A sender that exceeds `limit` admissions in
/// `window` ticks is refused for a penalty period: fixed under
/// [`DosDefense::Static`], doubling per offence under
/// [`DosDefense::Adaptive`].
#[derive(Debug, Clone)]
pub struct RateLimiter {
    mode: DosDefense,
    window: Tick,
    limit: u32,
    penalty: Tick,
    senders: BTreeMap<AccountId, SenderState>,
    refused: u64,
}

impl RateLimiter {
    pub fn new(mode: DosDefense, window: Tick, limit: u32, penalty: Tick) -> Self {
        RateLimiter {
            mode,
            window: window.max(1),
            limit: limit.max(1),
            penalty,
            senders: BTreeMap::new(),
            refused: 0,
        }
    }

    pub fn refused(&self) -> u64 {
        self.refused
    }

    /// Whether a transaction from `sender` is admitted at `now`.
    pub fn admit(&mut self, sender: AccountId, now: Tick) -> bool {
        if self.mode == DosDefense::None {
            return true;
        }
        let s = self.senders.entry(sender).or_default();
        if now < s.blocked_until {
            self.refused += 1;
            return false;
        }
        while s.recent.front().is_some_and(|t| *t + self.window <= now) {
            s.recent.pop_front();
        }
        if s.recent.len() as u32 >= self.limit {
            s.offences += 1;
            let shift = match self.mode {
                DosDefense::Adaptive => (s.offences - 1).min(30),
                _ => 0,
            };
            s.blocked_until = now + self.penalty.saturating_mul(1 << shift);
            s.recent.clear();
            self.refused += 1;
            return false;
        }
        s.recent.push_back(now);
        true
    }
}
