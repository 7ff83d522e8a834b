//! Stable text renderings of results: a human table, long-format rows and
//! `(x, y, series)` plot triples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::presets::PointResult;
use super::scenario::{MetricsReport, TIMELINE_BUCKET};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Table,
    Rows,
    Plot,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Format::Table),
            "rows" => Ok(Format::Rows),
            "plot" => Ok(Format::Plot),
            _ => Err(Error::config(format!("unknown format `{s}`"))),
        }
    }
}

impl Format {
    pub fn file_name(self) -> &'static str {
        match self {
            Format::Table => "report.txt",
            Format::Rows => "rows.csv",
            Format::Plot => "plot.csv",
        }
    }
}

/// Wraps a single run as a one-point result set.
pub fn single(report: MetricsReport) -> PointResult {
    PointResult {
        series: "run".into(),
        x: 0.0,
        y: report.throughput_tps,
        report,
    }
}

fn scalars(r: &MetricsReport) -> Vec<(&'static str, f64)> {
    vec![
        ("submitted", r.submitted as f64),
        ("finalized_in_window", r.finalized_in_window as f64),
        ("finalized_total", r.finalized_total as f64),
        ("aborted", r.aborted as f64),
        ("refused", r.refused as f64),
        ("throughput_per_tick", r.throughput_per_tick),
        ("throughput_tps", r.throughput_tps),
        ("latency_mean", r.latency_all.mean),
        ("latency_p50", r.latency_all.p50),
        ("latency_p99", r.latency_all.p99),
        ("latency_intra_p50", r.latency_intra.p50),
        ("latency_intra_p99", r.latency_intra.p99),
        ("latency_cross_p50", r.latency_cross.p50),
        ("latency_cross_p99", r.latency_cross.p99),
        ("blocks", r.blocks as f64),
        ("rounds_per_block", r.rounds_per_block),
        ("round_changes", r.round_changes as f64),
        ("messages", r.messages as f64),
        ("lock_wait_mean", r.lock_wait_mean),
        ("retries", r.retries as f64),
        ("abort_rate", r.abort_rate),
        ("epochs", r.epochs.len() as f64),
        ("quiescent", r.quiescent as u8 as f64),
    ]
}

pub const ROWS_HEADER: &str = "series,x,record,key,value";

/// One record per line: metrics, aborts by reason, epoch skews, timeline
/// buckets and model values.
pub fn render_rows(points: &[PointResult]) -> String {
    let mut s = String::from(ROWS_HEADER);
    s.push('\n');
    for p in points {
        let r = &p.report;
        let mut line = |record: &str, key: &str, value: f64| {
            let _ = writeln!(s, "{},{},{record},{key},{value}", p.series, p.x);
        };
        for (k, v) in scalars(r) {
            line("metric", k, v);
        }
        for (k, v) in &r.aborts_by_reason {
            line("abort", k, *v as f64);
        }
        for e in &r.epochs {
            line("sigma_before", &e.epoch.to_string(), e.sigma_before);
            line("sigma_after", &e.epoch.to_string(), e.sigma_after);
        }
        for (i, c) in r.timeline.iter().enumerate() {
            line("timeline", &(i as u64 * TIMELINE_BUCKET).to_string(), *c as f64);
        }
        for m in &r.models {
            line("model", &m.model, m.value);
        }
    }
    s
}

pub const PLOT_HEADER: &str = "x,y,series";

pub fn render_plot(points: &[PointResult]) -> String {
    let mut s = String::from(PLOT_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.x, p.y, p.series);
    }
    s
}

pub const TABLE_HEADER: &str =
    "series         x   submitted  finalized   tput/s   p50 intra  p50 cross  rounds/blk  aborts  digest";

pub fn render_table(points: &[PointResult], summary: &BTreeMap<String, f64>) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for p in points {
        let r = &p.report;
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>11} {:>10} {:>8.1} {:>11.1} {:>10.1} {:>11.3} {:>7}  {}",
            p.series,
            p.x,
            r.submitted,
            r.finalized_in_window,
            r.throughput_tps,
            r.latency_intra.p50,
            r.latency_cross.p50,
            r.rounds_per_block,
            r.aborted,
            &r.trace_digest[..16.min(r.trace_digest.len())],
        );
    }
    for (k, v) in summary {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

pub fn render(format: Format, points: &[PointResult], summary: &BTreeMap<String, f64>) -> String {
    match format {
        Format::Table => render_table(points, summary),
        Format::Rows => render_rows(points),
        Format::Plot => render_plot(points),
    }
}

/// Writes the rendering into `dir`, creating it if needed.
pub fn report_emit(
    dir: &Path,
    format: Format,
    points: &[PointResult],
    summary: &BTreeMap<String, f64>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format.file_name());
    fs::write(&path, render(format, points, summary))?;
    Ok(path)
}

/// Sums the timeline records of `series` back out of rendered rows.
pub fn resum_timeline(rows: &str, series: &str) -> Result<f64> {
    let mut total = 0.0;
    for line in rows.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::domain(format!("malformed row `{line}`")));
        }
        if cols[0] == series && cols[2] == "timeline" {
            total += cols[4]
                .parse::<f64>()
                .map_err(|_| Error::domain(format!("bad value in `{line}`")))?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioConfig;
    use crate::harness::run_scenario;

    #[test]
    fn empty_run_is_header_only() {
        let none = BTreeMap::new();
        for f in [Format::Table, Format::Rows, Format::Plot] {
            assert_eq!(render(f, &[], &none).lines().count(), 1);
        }
    }

    #[test]
    fn rows_resum_to_the_report_and_are_stable() {
        let cfg = ScenarioConfig {
            duration: 600,
            ..ScenarioConfig::default()
        };
        let r = run_scenario(&cfg).unwrap();
        let total = r.finalized_in_window as f64;
        let pts = [single(r)];
        let rows = render_rows(&pts);
        assert_eq!(resum_timeline(&rows, "run").unwrap(), total);

        let dir = tempfile::tempdir().unwrap();
        let none = BTreeMap::new();
        let a = fs::read(report_emit(dir.path(), Format::Rows, &pts, &none).unwrap()).unwrap();
        let b = fs::read(report_emit(dir.path(), Format::Rows, &pts, &none).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_format_is_rejected() {
        assert!("svg".parse::<Format>().is_err());
    }
}
