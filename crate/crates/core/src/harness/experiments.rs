//! Protocol experiments that are not plain throughput runs: committee
//! capture across epochs, beacon quality, and DoS degradation.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::scenario::run_scenario;
use crate::config::{DosDefense, ScenarioConfig};
use crate::consensus::quorum_threshold;
use crate::epoch::{rotate_committees, EpochConfig};
use crate::error::{Error, Result};
use crate::model::{NodeId, ShardId};
use crate::prf::Prf;
use crate::randomness::{run_round, AggregationMode, BeaconStrategy, Randomness};
use crate::sim::NetworkModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SybilParams {
    pub validators: usize,
    pub shards: usize,
    pub committee_size: usize,
    pub sybil_fraction: f64,
    pub epochs: u64,
    pub seed: u64,
}

impl Default for SybilParams {
    fn default() -> Self {
        SybilParams {
            validators: 100,
            shards: 10,
            committee_size: 10,
            sybil_fraction: 0.3,
            epochs: 1000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SybilReport {
    pub params: SybilParams,
    pub sybils: usize,
    /// Largest adversarial count a committee may hold without losing safety.
    pub f_threshold: usize,
    pub captured_epochs: u64,
    pub captured_fraction: f64,
    /// Committee-epochs over the threshold, over all shards.
    pub captured_committees: u64,
    pub max_adversarial: usize,
    pub beacon_failures: u64,
}

/// Rotates committees every epoch from a fresh commit-reveal beacon in
/// which every validator, Sybil or not, takes part, and counts epochs in
/// which some committee holds more than `f` Sybils.
pub fn sybil_experiment(p: &SybilParams) -> Result<SybilReport> {
    if !(0.0..1.0).contains(&p.sybil_fraction) {
        return Err(Error::config("sybil_fraction must be in [0, 1)"));
    }
    let sybils = (p.sybil_fraction * p.validators as f64).round() as usize;
    let pool: Vec<NodeId> = (0..p.validators as u32).map(NodeId).collect();
    let shards: Vec<ShardId> = (0..p.shards as u32).map(ShardId).collect();
    let cfg = EpochConfig {
        committee_size: p.committee_size,
        v_min: p.committee_size.min(4),
        ..EpochConfig::default()
    };
    cfg.validate()?;
    // Sybil identities are the first `sybils` ids of a seeded shuffle.
    let mut order = pool.clone();
    let mut prf = Prf::new(p.seed);
    let mut pick = prf.fork("sybil");
    for i in 0..order.len() {
        let j = i + (pick.next_u64() % (order.len() - i) as u64) as usize;
        order.swap(i, j);
    }
    let mut is_sybil = vec![false; p.validators];
    for n in &order[..sybils] {
        is_sybil[n.0 as usize] = true;
    }
    let participants: Vec<(NodeId, BeaconStrategy)> = pool.iter().map(|n| (*n, BeaconStrategy::Honest)).collect();
    let net = NetworkModel::fixed(5);
    let f_threshold = quorum_threshold(p.committee_size)?.f;

    let mut captured_epochs = 0;
    let mut captured_committees = 0;
    let mut max_adversarial = 0;
    let mut beacon_failures = 0;
    for epoch in 1..=p.epochs {
        let t = run_round(epoch, &participants, AggregationMode::Xor, &net, &mut prf)?;
        let seed = match t.outcome {
            Ok(o) => o.randomness,
            Err(_) => {
                beacon_failures += 1;
                Randomness::from_value(prf.next_u64())
            }
        };
        let committees = rotate_committees(&pool, &shards, &seed, &cfg, epoch)?;
        let mut captured = false;
        for vs in committees.values() {
            let bad = vs.members.iter().filter(|m| is_sybil[m.0 as usize]).count();
            max_adversarial = max_adversarial.max(bad);
            if bad > f_threshold {
                captured = true;
                captured_committees += 1;
            }
        }
        captured_epochs += captured as u64;
    }
    Ok(SybilReport {
        params: *p,
        sybils,
        f_threshold,
        captured_epochs,
        captured_fraction: captured_epochs as f64 / p.epochs.max(1) as f64,
        captured_committees,
        max_adversarial,
        beacon_failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeaconUniformity {
    pub rounds: u64,
    /// Histogram of the low 8 bits of each output.
    pub counts: Vec<u64>,
    /// Pearson statistic against the uniform distribution, 255 d.o.f.
    pub chi_square: f64,
}

/// All-honest beacon rounds with `participants` members.
pub fn beacon_uniformity(rounds: u64, participants: usize, seed: u64) -> Result<BeaconUniformity> {
    let parts: Vec<(NodeId, BeaconStrategy)> = (0..participants as u32)
        .map(|i| (NodeId(i), BeaconStrategy::Honest))
        .collect();
    let net = NetworkModel::fixed(5);
    let mut rng = Prf::new(seed).fork("beacon-uniformity");
    let mut counts = vec![0u64; 256];
    for r in 0..rounds {
        let t = run_round(r, &parts, AggregationMode::Xor, &net, &mut rng)?;
        let o = t.outcome?;
        counts[(o.randomness.value & 0xff) as usize] += 1;
    }
    let expected = rounds as f64 / 256.0;
    let chi_square = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    Ok(BeaconUniformity {
        rounds,
        counts,
        chi_square,
    })
}

/// Fraction of rounds in which a single last revealer lands the output in
/// its target half (top bit set), against `honest` honest members.
pub fn last_revealer_bias(trials: u64, honest: usize, seed: u64) -> Result<f64> {
    let mut parts: Vec<(NodeId, BeaconStrategy)> = (0..honest as u32)
        .map(|i| (NodeId(i), BeaconStrategy::Honest))
        .collect();
    parts.push((
        NodeId(honest as u32),
        BeaconStrategy::LastRevealer { target_high: true },
    ));
    let net = NetworkModel::fixed(5);
    let mut rng = Prf::new(seed).fork("last-revealer");
    let mut hits = 0u64;
    for r in 0..trials {
        let t = run_round(r, &parts, AggregationMode::Xor, &net, &mut rng)?;
        if t.outcome?.randomness.value >> 63 == 1 {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosReport {
    pub clean_tps: f64,
    pub attacked_tps: f64,
    pub static_tps: f64,
    pub adaptive_tps: f64,
    /// `1 - attacked/clean` for each defense.
    pub degradation_none: f64,
    pub degradation_static: f64,
    pub degradation_adaptive: f64,
    pub refused_static: u64,
    pub refused_adaptive: u64,
}

pub fn dos_configs(base: &ScenarioConfig) -> [ScenarioConfig; 4] {
    let mut attacked = base.clone();
    if attacked.dos_multiplier == 0.0 {
        attacked.dos_multiplier = 50.0;
    }
    let clean = ScenarioConfig {
        dos_multiplier: 0.0,
        dos_defense: DosDefense::None,
        ..attacked.clone()
    };
    let none = ScenarioConfig {
        dos_defense: DosDefense::None,
        ..attacked.clone()
    };
    let stat = ScenarioConfig {
        dos_defense: DosDefense::Static,
        ..attacked.clone()
    };
    let adaptive = ScenarioConfig {
        dos_defense: DosDefense::Adaptive,
        ..attacked
    };
    [clean, none, stat, adaptive]
}

/// Same seed with no attack, no defense, the static baseline and the
/// adaptive limiter.
pub fn dos_experiment(base: &ScenarioConfig) -> Result<DosReport> {
    let runs = dos_configs(base).iter().map(run_scenario).collect::<Result<Vec<_>>>()?;
    Ok(dos_summary(&[
        (runs[0].throughput_tps, 0),
        (runs[1].throughput_tps, 0),
        (runs[2].throughput_tps, runs[2].refused),
        (runs[3].throughput_tps, runs[3].refused),
    ]))
}

/// Builds the summary from `(tps, refused)` for clean, none, static and
/// adaptive runs.
pub fn dos_summary(runs: &[(f64, u64); 4]) -> DosReport {
    let clean = runs[0].0;
    let deg = |t: f64| if clean > 0.0 { 1.0 - t / clean } else { 0.0 };
    DosReport {
        clean_tps: clean,
        attacked_tps: runs[1].0,
        static_tps: runs[2].0,
        adaptive_tps: runs[3].0,
        degradation_none: deg(runs[1].0),
        degradation_static: deg(runs[2].0),
        degradation_adaptive: deg(runs[3].0),
        refused_static: runs[2].1,
        refused_adaptive: runs[3].1,
    }
}
