//! Fixtures shared by the benchmarks.

use rbs_core::config::ScenarioConfig;

/// A short, moderately loaded run used to time the whole engine.
pub fn small_scenario(n_shards: usize) -> ScenarioConfig {
    ScenarioConfig {
        n_nodes: 8 * n_shards,
        n_shards,
        duration: 500,
        tx_rate: 2.0,
        cross_fraction: 0.2,
        ..ScenarioConfig::default()
    }
}

/// `n` distinct leaf payloads.
pub fn leaves(n: usize) -> Vec<Vec<u8>> {
    (0..n as u64).map(|i| i.to_be_bytes().repeat(4)).collect()
}
