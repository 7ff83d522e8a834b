//! Named experiment sweeps. Each preset overrides a handful of fields of a
//! base configuration and runs every point independently, in parallel.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiments::{dos_configs, dos_summary, sybil_experiment, SybilParams};
use super::scenario::{measure, simulate, MetricsReport};
use crate::config::{LockModeCfg, ScenarioConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Scaling,
    Blocksize,
    Malicious,
    Latency,
    Locking,
    Sybil,
    Dos,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Scaling,
        Preset::Blocksize,
        Preset::Malicious,
        Preset::Latency,
        Preset::Locking,
        Preset::Sybil,
        Preset::Dos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Scaling => "scaling",
            Preset::Blocksize => "blocksize",
            Preset::Malicious => "malicious",
            Preset::Latency => "latency",
            Preset::Locking => "locking",
            Preset::Sybil => "sybil",
            Preset::Dos => "dos",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown preset `{s}`")))
    }
}

/// One configuration of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetPoint {
    pub series: String,
    pub x: f64,
    pub cfg: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub series: String,
    pub x: f64,
    /// The plotted quantity for this preset.
    pub y: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: Preset,
    pub y_label: String,
    pub points: Vec<PointResult>,
    /// Scalar outcomes (ratios, fractions) derived from the points.
    pub summary: BTreeMap<String, f64>,
}

/// Saturating load for `shards` shards: about twice their block capacity.
fn saturating_rate(cfg: &ScenarioConfig, shards: usize) -> f64 {
    let per_shard = cfg.block_capacity() as f64 / cfg.block_interval.max(1) as f64;
    (2.0 * per_shard * shards as f64).max(0.1)
}

fn point(series: &str, x: f64, cfg: ScenarioConfig) -> PresetPoint {
    PresetPoint {
        series: series.into(),
        x,
        cfg,
    }
}

/// The sweep for `preset` on top of `base`. Empty for presets that are not
/// simulator sweeps.
pub fn preset_points(preset: Preset, base: &ScenarioConfig) -> Vec<PresetPoint> {
    match preset {
        Preset::Scaling => [2usize, 4, 8, 14]
            .into_iter()
            .map(|s| {
                let mut c = ScenarioConfig {
                    n_nodes: 100,
                    committee_size: 7,
                    n_shards: s,
                    cross_fraction: 0.1,
                    n_accounts: base.n_accounts.max(5000),
                    duration: 1000,
                    drain: 20_000,
                    ..base.clone()
                };
                c.tx_rate = saturating_rate(&c, 14) * 0.9;
                point("throughput", s as f64, c)
            })
            .collect(),
        Preset::Blocksize => [4096u64, 8192, 16384, 32768]
            .into_iter()
            .map(|b| {
                let mut c = ScenarioConfig {
                    block_size: b,
                    duration: 1000,
                    drain: 20_000,
                    ..base.clone()
                };
                c.tx_rate = saturating_rate(
                    &ScenarioConfig {
                        block_size: 32768,
                        ..c.clone()
                    },
                    c.n_shards,
                );
                point("throughput", b as f64 / 1024.0, c)
            })
            .collect(),
        Preset::Malicious => [0.0, 0.06, 0.10]
            .into_iter()
            .map(|f| {
                let mut c = ScenarioConfig {
                    n_nodes: 100,
                    n_shards: 10,
                    committee_size: 10,
                    malicious_fraction: f,
                    n_accounts: base.n_accounts.max(5000),
                    duration: 2000,
                    drain: 20_000,
                    ..base.clone()
                };
                c.tx_rate = saturating_rate(&c, c.n_shards) * 0.6;
                point("throughput", f, c)
            })
            .collect(),
        Preset::Latency => [2usize, 4, 8, 14]
            .into_iter()
            .flat_map(|s| {
                let c = ScenarioConfig {
                    n_nodes: 100,
                    committee_size: 7,
                    n_shards: s,
                    tx_rate: 2.0,
                    cross_fraction: 0.3,
                    n_accounts: base.n_accounts.max(5000),
                    duration: 2000,
                    drain: 20_000,
                    ..base.clone()
                };
                [point("intra_p50", s as f64, c.clone()), point("cross_p50", s as f64, c)]
            })
            .collect(),
        Preset::Locking => [(LockModeCfg::Fine, 0.0), (LockModeCfg::Full, 1.0)]
            .into_iter()
            .map(|(mode, x)| {
                let c = ScenarioConfig {
                    lock_mode: mode,
                    zipf: 1.0,
                    cross_fraction: 0.3,
                    tx_rate: 2.0,
                    duration: 2000,
                    drain: 20_000,
                    ..base.clone()
                };
                let label = if mode == LockModeCfg::Fine { "fine" } else { "full" };
                point(label, x, c)
            })
            .collect(),
        Preset::Dos => {
            let b = ScenarioConfig {
                dos_multiplier: 50.0,
                duration: 3000,
                drain: 20_000,
                ..base.clone()
            };
            let labels = ["clean", "none", "static", "adaptive"];
            dos_configs(&b)
                .into_iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (c, l))| point(l, i as f64, c))
                .collect()
        }
        Preset::Sybil => Vec::new(),
    }
}

fn y_of(preset: Preset, series: &str, r: &MetricsReport) -> f64 {
    match (preset, series) {
        (Preset::Latency, "intra_p50") => r.latency_intra.p50,
        (Preset::Latency, _) | (Preset::Locking, _) => r.latency_cross.p50,
        _ => r.throughput_tps,
    }
}

fn y_label(preset: Preset) -> &'static str {
    match preset {
        Preset::Latency | Preset::Locking => "latency_p50_ticks",
        Preset::Sybil => "captured_fraction",
        _ => "throughput_tps",
    }
}

/// Runs every point of `preset`. Results keep sweep order regardless of
/// scheduling, so reports are identical across thread counts.
pub fn run_preset(preset: Preset, base: &ScenarioConfig) -> Result<PresetReport> {
    base.validate()?;
    let pts = preset_points(preset, base);
    // Series that share a configuration share one run.
    let mut unique: Vec<&ScenarioConfig> = Vec::new();
    let slot: Vec<usize> = pts
        .iter()
        .map(|p| match unique.iter().position(|c| **c == p.cfg) {
            Some(i) => i,
            None => {
                unique.push(&p.cfg);
                unique.len() - 1
            }
        })
        .collect();
    let reports = unique
        .par_iter()
        .map(|c| simulate(c).map(|out| measure(c, &out)))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<PointResult> = pts
        .iter()
        .zip(slot)
        .map(|(p, i)| PointResult {
            series: p.series.clone(),
            x: p.x,
            y: y_of(preset, &p.series, &reports[i]),
            report: reports[i].clone(),
        })
        .collect();

    let mut summary = BTreeMap::new();
    let y = |s: &str, x: f64| points.iter().find(|p| p.series == s && p.x == x).map(|p| p.y);
    match preset {
        Preset::Scaling => {
            if let (Some(a), Some(b)) = (y("throughput", 2.0), y("throughput", 14.0)) {
                summary.insert("ratio_14_over_2".into(), if a > 0.0 { b / a } else { 0.0 });
            }
            let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
            summary.insert("monotone".into(), ys.windows(2).all(|w| w[0] < w[1]) as u8 as f64);
        }
        Preset::Malicious => {
            if let (Some(a), Some(b)) = (y("throughput", 0.0), y("throughput", 0.10)) {
                summary.insert("ratio_10pct".into(), if a > 0.0 { b / a } else { 0.0 });
            }
            let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
            summary.insert(
                "non_increasing".into(),
                ys.windows(2).all(|w| w[0] >= w[1]) as u8 as f64,
            );
        }
        Preset::Locking => {
            if let (Some(f), Some(u)) = (y("fine", 0.0), y("full", 1.0)) {
                summary.insert("fine_over_full_p50".into(), if u > 0.0 { f / u } else { f64::INFINITY });
            }
        }
        Preset::Dos => {
            let get = |i: usize| (points[i].report.throughput_tps, points[i].report.refused);
            let d = dos_summary(&[get(0), get(1), get(2), get(3)]);
            summary.insert("degradation_none".into(), d.degradation_none);
            summary.insert("degradation_static".into(), d.degradation_static);
            summary.insert("degradation_adaptive".into(), d.degradation_adaptive);
        }
        Preset::Sybil => {
            let r = sybil_experiment(&SybilParams {
                seed: base.seed,
                ..SybilParams::default()
            })?;
            summary.insert("captured_fraction".into(), r.captured_fraction);
            summary.insert("captured_epochs".into(), r.captured_epochs as f64);
            summary.insert("max_adversarial".into(), r.max_adversarial as f64);
            summary.insert("f_threshold".into(), r.f_threshold as f64);
        }
        Preset::Blocksize | Preset::Latency => {}
    }
    Ok(PresetReport {
        preset,
        y_label: y_label(preset).into(),
        points,
        summary,
    })
}
