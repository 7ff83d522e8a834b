//! Beacon hiding and exclusion, and network delivery properties.

use proptest::prelude::*;
use rand::RngCore;
use rbs_core::model::NodeId;
use rbs_core::prf::Prf;
use rbs_core::randomness::{commit, AggregationMode, CommitRevealRound};
use rbs_core::sim::{deliver, EventQueue, Latency, NetworkModel};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn byte_histogram(value: u64, samples: usize, rng: &mut Prf) -> Vec<u64> {
    let mut h = vec![0u64; 256];
    for _ in 0..samples {
        let nonce = ((rng.next_u64() as u128) << 64) | rng.next_u64() as u128;
        for b in commit(value, nonce).as_bytes() {
            h[*b as usize] += 1;
        }
    }
    h
}

#[test]
fn commitments_to_zero_and_one_look_alike() {
    let mut rng = Prf::new(17).fork("hiding");
    let zeros = byte_histogram(0, 10_000, &mut rng);
    let ones = byte_histogram(1, 10_000, &mut rng);
    // Two-sample homogeneity statistic over byte values.
    let stat: f64 = zeros
        .iter()
        .zip(&ones)
        .filter(|(a, b)| **a + **b > 0)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2) / (*a + *b) as f64)
        .sum();
    let limit = ChiSquared::new(255.0).unwrap().inverse_cdf(0.999);
    assert!(stat < limit, "{stat} >= {limit}");
}

proptest! {
    #[test]
    fn withholders_never_shape_the_output(
        values in prop::collection::vec(any::<u64>(), 2..12),
        reveal_mask in any::<u16>(),
        swap in any::<u64>(),
    ) {
        let n = values.len();
        let reveals = |i: usize| i == 0 || reveal_mask & (1 << i) != 0;
        let run = |vals: &[u64]| {
            let mut r = CommitRevealRound::new(1, AggregationMode::Xor);
            for (i, v) in vals.iter().enumerate() {
                r.submit_commit(NodeId(i as u32), commit(*v, i as u128)).unwrap();
            }
            r.close_commits();
            for (i, v) in vals.iter().enumerate() {
                if reveals(i) {
                    r.submit_reveal(NodeId(i as u32), *v, i as u128).unwrap();
                }
            }
            r.finish().unwrap()
        };
        let out = run(&values);
        let expect = (0..n).filter(|i| reveals(*i)).fold(0, |acc, i| acc ^ values[i]);
        prop_assert_eq!(out.randomness.value, expect);
        let withheld: Vec<NodeId> = (0..n).filter(|i| !reveals(*i)).map(|i| NodeId(i as u32)).collect();
        prop_assert_eq!(&out.withheld, &withheld);

        // Changing what a withholder committed to changes nothing.
        if let Some(w) = withheld.first() {
            let mut other = values.clone();
            other[w.0 as usize] ^= swap | 1;
            prop_assert_eq!(run(&other).randomness.value, out.randomness.value);
        }
    }

    #[test]
    fn honest_links_deliver_everything_in_bounds(
        lo in 0u64..20,
        spread in 0u64..20,
        sends in prop::collection::vec((0u32..8, 0u32..8), 1..200),
        seed in any::<u64>(),
    ) {
        let model = NetworkModel {
            latency: Latency::Uniform { lo, hi: lo + spread },
            ..NetworkModel::default()
        };
        let mut q = EventQueue::new();
        let mut rng = Prf::new(seed);
        for (i, (a, b)) in sends.iter().enumerate() {
            let at = deliver(&mut q, i, NodeId(*a), NodeId(*b), &model, &mut rng).unwrap();
            let at = at.expect("dropped on an honest link");
            prop_assert!(a == b || (lo..=lo + spread).contains(&at));
        }
        prop_assert_eq!(q.len(), sends.len());
    }

    #[test]
    fn handlers_never_schedule_into_the_past(
        delays in prop::collection::vec(0u64..50, 1..300),
        seed in any::<u64>(),
    ) {
        let mut q = EventQueue::new();
        let mut rng = Prf::new(seed);
        q.schedule(0, NodeId(0), 0usize).unwrap();
        let mut next = 1;
        let mut last = 0;
        while let Some(ev) = q.pop() {
            prop_assert!(ev.at >= last);
            last = ev.at;
            if next < delays.len() {
                let d = delays[next] + rng.next_u64() % 3;
                q.schedule(ev.at + d, NodeId(1), next).unwrap();
                next += 1;
            }
            prop_assert!(q.schedule(ev.at.wrapping_sub(1), NodeId(2), 0).is_err() || ev.at == 0);
        }
    }
}
