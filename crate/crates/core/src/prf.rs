//! Deterministic pseudo-random streams. A scenario owns one root seed; every
//! subsystem forks its own stream by label so that adding draws in one place
//! never shifts the numbers seen by another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::hash::{tagged_hash, Domain, Encoder, Hash256};

#[derive(Debug, Clone)]
pub struct Prf {
    key: Hash256,
    rng: ChaCha12Rng,
}

impl Prf {
    /// Root stream for a scenario seed.
    pub fn new(seed: u64) -> Self {
        Self::from_key(tagged_hash(Domain::Prf, &[b"root", &seed.to_be_bytes()]))
    }

    fn from_key(key: Hash256) -> Self {
        Prf {
            key,
            rng: ChaCha12Rng::from_seed(key.0),
        }
    }

    /// Independent child stream. Forking does not consume from `self`.
    pub fn fork(&self, label: &str) -> Prf {
        let enc = Encoder::new().hash(&self.key).bytes(label.as_bytes()).finish();
        Self::from_key(tagged_hash(Domain::Prf, &[&enc]))
    }

    /// Child stream indexed by a number, e.g. per node or per epoch.
    pub fn fork_indexed(&self, label: &str, index: u64) -> Prf {
        let enc = Encoder::new()
            .hash(&self.key)
            .bytes(label.as_bytes())
            .u64(index)
            .finish();
        Self::from_key(tagged_hash(Domain::Prf, &[&enc]))
    }
}

impl RngCore for Prf {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Counter-mode PRF: block `i` is `H(key || i)`. Used where the output must
/// be a documented function of its key, independent of any RNG crate.
#[derive(Debug, Clone)]
pub struct CounterPrf {
    key: Hash256,
    counter: u64,
    buf: [u8; 32],
    pos: usize,
}

impl CounterPrf {
    pub fn new(key: Hash256) -> Self {
        CounterPrf {
            key,
            counter: 0,
            buf: [0; 32],
            pos: 32,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        if self.pos + 8 > 32 {
            self.buf = tagged_hash(Domain::Prf, &[self.key.as_bytes(), &self.counter.to_be_bytes()]).0;
            self.counter += 1;
            self.pos = 0;
        }
        let v = u64::from_be_bytes(self.buf[self.pos..self.pos + 8].try_into().expect("8 bytes"));
        self.pos += 8;
        v
    }

    /// Uniform integer in `0..bound` by rejection sampling.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Uniform float in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Prf::new(9).fork("net");
        let mut b = Prf::new(9).fork("net");
        let xs: Vec<u64> = (0..16).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn forks_are_independent_of_parent_use() {
        let root = Prf::new(1);
        let mut used = root.clone();
        for _ in 0..100 {
            used.next_u64();
        }
        assert_eq!(root.fork("x").next_u64(), used.fork("x").next_u64());
        assert_ne!(root.fork("x").next_u64(), root.fork("y").next_u64());
        assert_ne!(
            root.fork_indexed("n", 0).next_u64(),
            root.fork_indexed("n", 1).next_u64()
        );
    }

    #[test]
    fn counter_prf_is_keyed_and_bounded() {
        let key = tagged_hash(Domain::Prf, &[b"k"]);
        let mut a = CounterPrf::new(key);
        let mut b = CounterPrf::new(key);
        for _ in 0..100 {
            let x = a.below(7);
            assert!(x < 7);
            assert_eq!(x, b.below(7));
        }
        let mut c = CounterPrf::new(tagged_hash(Domain::Prf, &[b"j"]));
        assert_ne!(CounterPrf::new(key).next_u64(), c.next_u64());
    }

    #[test]
    fn counter_prf_first_word_is_hash_of_counter_zero() {
        let key = tagged_hash(Domain::Prf, &[b"k"]);
        let block = tagged_hash(Domain::Prf, &[key.as_bytes(), &0u64.to_be_bytes()]);
        assert_eq!(CounterPrf::new(key).next_u64(), block.prefix_u64());
    }
}
