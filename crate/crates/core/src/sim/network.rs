use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::queue::EventQueue;
use crate::error::{Error, Result};
use crate::model::{NodeId, Tick};

/// End-to-end latency distribution in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Latency {
    Fixed(Tick),
    /// Inclusive bounds.
    Uniform {
        lo: Tick,
        hi: Tick,
    },
}

impl Latency {
    pub fn mean(&self) -> f64 {
        match *self {
            Latency::Fixed(t) => t as f64,
            Latency::Uniform { lo, hi } => (lo + hi) as f64 / 2.0,
        }
    }

    /// Largest latency an honest message can see.
    pub fn bound(&self) -> Tick {
        match *self {
            Latency::Fixed(t) => t,
            Latency::Uniform { hi, .. } => hi,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tick {
        match *self {
            Latency::Fixed(t) => t,
            Latency::Uniform { lo, hi } => rng.random_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub latency: Latency,
    pub drop_rate: f64,
    /// Severed pairs; a pair blocks both directions.
    pub partition: BTreeSet<(NodeId, NodeId)>,
}

impl Default for NetworkModel {
    fn default() -> Self {
        NetworkModel {
            latency: Latency::Uniform { lo: 3, hi: 7 },
            drop_rate: 0.0,
            partition: BTreeSet::new(),
        }
    }
}

impl NetworkModel {
    pub fn fixed(latency: Tick) -> Self {
        NetworkModel {
            latency: Latency::Fixed(latency),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::config("drop rate must be in [0, 1]"));
        }
        if let Latency::Uniform { lo, hi } = self.latency {
            if lo > hi {
                return Err(Error::config("latency lo must not exceed hi"));
            }
        }
        Ok(())
    }

    pub fn severed(&self, a: NodeId, b: NodeId) -> bool {
        self.partition.contains(&(a, b)) || self.partition.contains(&(b, a))
    }

    /// Latency for one message, or `None` when it is lost. Self-addressed
    /// messages are delivered immediately.
    pub fn transit<R: Rng + ?Sized>(&self, from: NodeId, to: NodeId, rng: &mut R) -> Option<Tick> {
        if from == to {
            return Some(0);
        }
        if self.severed(from, to) {
            return None;
        }
        if self.drop_rate > 0.0 && rng.random_bool(self.drop_rate) {
            return None;
        }
        Some(self.latency.sample(rng))
    }
}

/// Schedules `msg` for `to` after the sampled latency. Returns the delivery
/// tick, or `None` when the message was dropped.
pub fn deliver<P, R: Rng + ?Sized>(
    queue: &mut EventQueue<P>,
    msg: P,
    from: NodeId,
    to: NodeId,
    model: &NetworkModel,
    rng: &mut R,
) -> Result<Option<Tick>> {
    match model.transit(from, to, rng) {
        Some(lat) => {
            let at = queue.now() + lat;
            queue.schedule(at, to, msg)?;
            Ok(Some(at))
        }
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prf::Prf;

    #[test]
    fn fixed_latency_no_drop() {
        let mut q = EventQueue::new();
        let mut rng = Prf::new(1);
        let model = NetworkModel::fixed(5);
        for _ in 0..100 {
            assert_eq!(
                deliver(&mut q, (), NodeId(0), NodeId(1), &model, &mut rng).unwrap(),
                Some(5)
            );
        }
    }

    #[test]
    fn drop_everything() {
        let mut q = EventQueue::new();
        let mut rng = Prf::new(1);
        let model = NetworkModel {
            drop_rate: 1.0,
            ..NetworkModel::fixed(5)
        };
        for _ in 0..100 {
            assert_eq!(
                deliver(&mut q, (), NodeId(0), NodeId(1), &model, &mut rng).unwrap(),
                None
            );
        }
        assert!(q.is_empty());
    }

    #[test]
    fn partition_blocks_both_directions() {
        let mut rng = Prf::new(1);
        let mut model = NetworkModel::fixed(5);
        model.partition.insert((NodeId(0), NodeId(1)));
        assert_eq!(model.transit(NodeId(1), NodeId(0), &mut rng), None);
        assert_eq!(model.transit(NodeId(0), NodeId(2), &mut rng), Some(5));
    }

    #[test]
    fn uniform_mean() {
        let mut q = EventQueue::new();
        let mut rng = Prf::new(2024);
        let model = NetworkModel {
            latency: Latency::Uniform { lo: 4, hi: 12 },
            ..Default::default()
        };
        let n = 10_000;
        let mut sum = 0u64;
        for _ in 0..n {
            let at = deliver(&mut q, (), NodeId(0), NodeId(1), &model, &mut rng)
                .unwrap()
                .unwrap();
            assert!((4..=12).contains(&at));
            sum += at;
        }
        let mean = sum as f64 / n as f64;
        assert!((mean - 8.0).abs() <= 0.2, "mean {mean}");
    }
}
