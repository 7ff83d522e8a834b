//! Genesis construction, one simulated run, and the measured report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::models::{eval, Model};
use super::workload::{generate_workload, layout_accounts};
use crate::config::ScenarioConfig;
use crate::error::Result;
use crate::model::Tick;
use crate::partition::init_ranges;
use crate::prf::Prf;
use crate::sim::{EpochSummary, Genesis, SimFailure, SimOutput, Simulator, TxStatus};

/// Width of the finalization timeline buckets, in ticks.
pub const TIMELINE_BUCKET: Tick = 100;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles.
    pub fn from_samples(mut xs: Vec<Tick>) -> Self {
        if xs.is_empty() {
            return LatencyStats::default();
        }
        xs.sort_unstable();
        let n = xs.len();
        let rank = |q: f64| xs[((q * n as f64).ceil() as usize).clamp(1, n) - 1] as f64;
        LatencyStats {
            count: n as u64,
            mean: xs.iter().map(|x| *x as f64).sum::<f64>() / n as f64,
            p50: rank(0.5),
            p99: rank(0.99),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelValue {
    pub model: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub n_nodes: usize,
    pub n_shards: usize,
    pub duration: Tick,
    pub ticks_per_second: u64,
    /// Honest transactions submitted.
    pub submitted: u64,
    /// Honest transactions finalized before `duration`; the throughput numerator.
    pub finalized_in_window: u64,
    /// Every finalized transaction, spam included, over the whole run.
    pub finalized_total: u64,
    pub aborted: u64,
    pub refused: u64,
    pub throughput_per_tick: f64,
    pub throughput_tps: f64,
    pub latency_all: LatencyStats,
    pub latency_intra: LatencyStats,
    pub latency_cross: LatencyStats,
    pub blocks: u64,
    pub rounds_per_block: f64,
    pub round_changes: u64,
    pub messages: u64,
    pub escalations: u64,
    pub invalid_proposals: u64,
    pub lock_wait_mean: f64,
    pub retries: u64,
    pub abort_rate: f64,
    pub aborts_by_reason: BTreeMap<String, u64>,
    pub epochs: Vec<EpochSummary>,
    /// Honest finalizations per bucket of `TIMELINE_BUCKET` ticks.
    pub timeline: Vec<u64>,
    pub models: Vec<ModelValue>,
    pub trace_digest: String,
    pub quiescent: bool,
    pub end_tick: Tick,
}

/// Builds genesis from the configuration and runs the simulator.
pub fn simulate(cfg: &ScenarioConfig) -> Result<SimOutput> {
    simulate_traced(cfg).map_err(|f| f.error)
}

/// Like [`simulate`], but a failed run still hands back its partial trace.
pub fn simulate_traced(cfg: &ScenarioConfig) -> std::result::Result<SimOutput, Box<SimFailure>> {
    let fail = |error| Box::new(SimFailure { error, trace: None });
    cfg.validate().map_err(fail)?;
    let table = init_ranges(cfg.n_shards).map_err(fail)?;
    let layout = layout_accounts(cfg, &table).map_err(fail)?;
    let stream = generate_workload(cfg, &layout, &table, &Prf::new(cfg.seed)).map_err(fail)?;
    let genesis = Genesis {
        table,
        keys: layout.keys,
        balance: layout.balance,
        txs: stream.into_iter().map(|w| (w.tx, w.spam)).collect(),
    };
    Simulator::new(cfg, genesis).map_err(fail)?.run_traced()
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<MetricsReport> {
    let out = simulate(cfg)?;
    Ok(measure(cfg, &out))
}

/// Derives the report from raw run output.
pub fn measure(cfg: &ScenarioConfig, out: &SimOutput) -> MetricsReport {
    let honest: Vec<_> = out.txs.iter().filter(|t| !t.spam).collect();
    let in_window = honest
        .iter()
        .filter(|t| t.finalized_at().is_some_and(|f| f < cfg.duration))
        .count() as u64;
    let lat = |pred: &dyn Fn(bool) -> bool| {
        LatencyStats::from_samples(
            honest
                .iter()
                .filter(|t| pred(t.cross))
                .filter_map(|t| t.finalized_at().map(|f| f - t.submitted))
                .collect(),
        )
    };
    let mut aborts_by_reason = BTreeMap::new();
    let mut aborted = 0;
    for t in &honest {
        if let TxStatus::Aborted(_, r) = t.status {
            aborted += 1;
            *aborts_by_reason.entry(format!("{r:?}")).or_insert(0) += 1;
        }
    }
    let cross: Vec<_> = honest.iter().filter(|t| t.cross).collect();
    let lock_wait_mean = if cross.is_empty() {
        0.0
    } else {
        cross.iter().map(|t| t.lock_wait as f64).sum::<f64>() / cross.len() as f64
    };
    let n_buckets = cfg.duration.div_ceil(TIMELINE_BUCKET) as usize;
    let mut timeline = vec![0u64; n_buckets];
    for t in &honest {
        if let Some(f) = t.finalized_at() {
            if f < cfg.duration {
                timeline[(f / TIMELINE_BUCKET) as usize] += 1;
            }
        }
    }
    let per_tick = if cfg.duration == 0 {
        0.0
    } else {
        in_window as f64 / cfg.duration as f64
    };

    // Per-shard capacity: one full block per interval.
    let t_s = cfg.block_capacity() as f64 / cfg.block_interval.max(1) as f64;
    let mut models = Vec::new();
    let mut push = |m: Model, p: &[(&str, f64)]| {
        if let Ok(v) = eval(m, p) {
            models.push(ModelValue {
                model: m.name().to_string(),
                value: v,
            });
        }
    };
    push(Model::ShardedThroughput, &[("n_s", cfg.n_shards as f64), ("t_s", t_s)]);
    push(
        Model::BlockThroughputConsistent,
        &[
            ("B", cfg.block_size as f64),
            ("t_avg", cfg.tx_bytes as f64),
            ("t_block", cfg.block_interval.max(1) as f64),
        ],
    );
    push(
        Model::BlockThroughputPaper,
        &[
            ("B", cfg.block_size as f64),
            ("t_avg", cfg.tx_bytes as f64),
            ("t_block", cfg.block_interval.max(1) as f64),
        ],
    );
    push(
        Model::MaliciousThroughput,
        &[
            ("T_ideal", cfg.n_shards as f64 * t_s),
            ("f", cfg.malicious_count() as f64),
            ("N", cfg.n_nodes as f64),
        ],
    );
    let m = cfg.malicious_count() as f64;
    push(
        Model::HonestQuorumProb,
        &[
            ("n_h", cfg.n_nodes as f64 - m),
            ("N", cfg.n_nodes as f64),
            ("k", cfg.committee_size as f64),
        ],
    );
    push(
        Model::FaultProb,
        &[
            ("m", ((cfg.committee_size as f64 - 1.0) / 3.0).floor()),
            ("t", cfg.committee_size as f64),
        ],
    );

    MetricsReport {
        seed: cfg.seed,
        n_nodes: cfg.n_nodes,
        n_shards: cfg.n_shards,
        duration: cfg.duration,
        ticks_per_second: cfg.ticks_per_second,
        submitted: honest.len() as u64,
        finalized_in_window: in_window,
        finalized_total: out.txs.iter().filter(|t| t.finalized_at().is_some()).count() as u64,
        aborted,
        refused: out.refused,
        throughput_per_tick: per_tick,
        throughput_tps: per_tick * cfg.ticks_per_second as f64,
        latency_all: lat(&|_| true),
        latency_intra: lat(&|c| !c),
        latency_cross: lat(&|c| c),
        blocks: out.blocks,
        rounds_per_block: if out.blocks == 0 {
            0.0
        } else {
            out.rounds_total as f64 / out.blocks as f64
        },
        round_changes: out.round_changes,
        messages: out.messages,
        escalations: out.escalations,
        invalid_proposals: out.invalid_proposals,
        lock_wait_mean,
        retries: honest.iter().map(|t| t.attempts.saturating_sub(1) as u64).sum(),
        abort_rate: if honest.is_empty() {
            0.0
        } else {
            aborted as f64 / honest.len() as f64
        },
        aborts_by_reason,
        epochs: out.epochs.clone(),
        timeline,
        models,
        trace_digest: out.trace.digest().to_hex(),
        quiescent: out.quiescent,
        end_tick: out.end_tick,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_nearest_rank() {
        let s = LatencyStats::from_samples((1..=100).collect());
        assert_eq!((s.p50, s.p99, s.mean), (50.0, 99.0, 50.5));
        assert_eq!(LatencyStats::from_samples(vec![]).count, 0);
    }

    #[test]
    fn small_run_finalizes_and_conserves() {
        let cfg = ScenarioConfig {
            duration: 1000,
            tx_rate: 0.5,
            cross_fraction: 0.3,
            ..ScenarioConfig::default()
        };
        let out = simulate(&cfg).unwrap();
        assert_eq!(out.final_total, out.genesis_total);
        assert!(out.quiescent, "not quiescent");
        let r = measure(&cfg, &out);
        assert!(r.finalized_in_window as f64 > 0.8 * r.submitted as f64, "{r:?}");
        assert!(r.latency_cross.p50 > r.latency_intra.p50);
        assert_eq!(r.latency_all.count + r.aborted, r.submitted);
    }
}
