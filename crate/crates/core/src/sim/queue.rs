use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::model::{NodeId, Tick};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent<P> {
    pub at: Tick,
    pub seq: u64,
    pub target: NodeId,
    pub payload: P,
}

// Min-heap on (at, seq); the payload never takes part in ordering.
struct Slot<P>(SimEvent<P>);

impl<P> PartialEq for Slot<P> {
    fn eq(&self, other: &Self) -> bool {
        (self.0.at, self.0.seq) == (other.0.at, other.0.seq)
    }
}

impl<P> Eq for Slot<P> {}

impl<P> Ord for Slot<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.at, other.0.seq).cmp(&(self.0.at, self.0.seq))
    }
}

impl<P> PartialOrd for Slot<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Virtual clock plus pending events, executed in strict `(at, seq)` order.
pub struct EventQueue<P> {
    heap: BinaryHeap<Slot<P>>,
    clock: Tick,
    next_seq: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            clock: 0,
            next_seq: 0,
        }
    }

    pub fn now(&self) -> Tick {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn scheduled(&self) -> u64 {
        self.next_seq
    }

    pub fn schedule(&mut self, at: Tick, target: NodeId, payload: P) -> Result<u64> {
        if at < self.clock {
            return Err(Error::SchedulePast { at, clock: self.clock });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Slot(SimEvent {
            at,
            seq,
            target,
            payload,
        }));
        Ok(seq)
    }

    pub fn peek_time(&self) -> Option<Tick> {
        self.heap.peek().map(|s| s.0.at)
    }

    /// Removes the next event and advances the clock to it.
    pub fn pop(&mut self) -> Option<SimEvent<P>> {
        let ev = self.heap.pop()?.0;
        self.clock = ev.at;
        Some(ev)
    }

    /// Advances the clock without running anything (end of a bounded run).
    pub fn advance_to(&mut self, at: Tick) {
        self.clock = self.clock.max(at);
    }
}
