//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line, then
//! asserts it. Tolerances and runtime budgets are fixed here.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::{Duration, Instant};

use rbs_core::config::ScenarioConfig;
use rbs_core::consensus::{explore_exhaustive, run_committee, ByzantineMode, ExploreConfig, Timing};
use rbs_core::harness::experiments::{beacon_uniformity, last_revealer_bias, sybil_experiment, SybilParams};
use rbs_core::harness::models::{eval, Model};
use rbs_core::harness::presets::{run_preset, Preset};
use rbs_core::harness::report::render_rows;
use rbs_core::harness::{measure, simulate};
use rbs_core::sim::{replay, NetworkModel};
use rbs_core::NodeId;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn verdict(id: u32, name: &str, pass: bool, started: Instant, budget: Duration, detail: String) {
    let took = started.elapsed();
    let ok = pass && took <= budget;
    // Straight to the handle: the test harness captures `println!`.
    let _ = writeln!(
        std::io::stderr(),
        "{} [{id:>2}] {name}: {detail} ({:.1}s of {}s)",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        budget.as_secs()
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
    assert!(took <= budget, "criterion {id} ({name}) over its runtime budget");
}

fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

#[test]
fn c01_analytic_models_exact() {
    let t = Instant::now();
    // Expected values computed by hand, outside the crate.
    type Case<'a> = (Model, &'a [(&'a str, f64)], f64);
    let cases: [Case; 6] = [
        (
            Model::HonestQuorumProb,
            &[("n_h", 70.0), ("N", 100.0), ("k", 3.0)],
            0.657,
        ),
        (
            Model::MaliciousThroughput,
            &[("T_ideal", 5000.0), ("f", 10.0), ("N", 100.0)],
            4500.0,
        ),
        (Model::FaultProb, &[("m", 3.0), ("t", 10.0)], 0.3),
        (
            Model::LockOverhead,
            &[("T_cross", 3.0), ("L_account", 5.0), ("T_intra", 2.0)],
            7.5,
        ),
        (
            Model::DoSProb,
            &[
                ("T_attack", 10.0),
                ("T_threshold", 5.0),
                ("M_malicious", 10.0),
                ("N", 100.0),
            ],
            0.08646647167633872,
        ),
        (
            Model::AdversaryTakeover,
            &[("f", 0.3), ("n", 100.0), ("s", 10.0)],
            1.1160227928062509e-43,
        ),
    ];
    let mut worst = 0.0f64;
    for (m, p, want) in cases {
        worst = worst.max(rel_err(eval(m, p).unwrap(), want));
    }
    let fault_domain = eval(Model::FaultProb, &[("m", 4.0), ("t", 10.0)]).is_err();
    verdict(
        1,
        "analytic models",
        worst <= 1e-12 && fault_domain,
        t,
        Duration::from_secs(1),
        format!("max relative error {worst:.2e}, m > (t-1)/3 rejected: {fault_domain}"),
    );
}

#[test]
fn c02_throughput_scaling() {
    let t = Instant::now();
    let r = run_preset(Preset::Scaling, &ScenarioConfig::default()).unwrap();
    let tput: Vec<(f64, f64)> = r.points.iter().map(|p| (p.x, p.y)).collect();
    let submitted = r.points[0].report.submitted;
    let ratio = r.summary["ratio_14_over_2"];
    verdict(
        2,
        "throughput scaling",
        ratio >= 4.0 && submitted >= 10_000 && r.points.iter().all(|p| p.report.n_nodes == 100),
        t,
        Duration::from_secs(300),
        format!("ratio {ratio:.2} (>= 4.0), {submitted} txs per point, series {tput:?}"),
    );
}

#[test]
fn c03_malicious_resilience() {
    let t = Instant::now();
    let r = run_preset(Preset::Malicious, &ScenarioConfig::default()).unwrap();
    let ratio = r.summary["ratio_10pct"];
    verdict(
        3,
        "malicious-node resilience",
        ratio >= 0.75,
        t,
        Duration::from_secs(300),
        format!(
            "10% silent+equivocate keeps {ratio:.3} of throughput (>= 0.75; model predicts 0.90), non-increasing: {}",
            r.summary["non_increasing"] == 1.0
        ),
    );
}

#[test]
fn c04_fine_vs_full_locking() {
    let t = Instant::now();
    let r = run_preset(Preset::Locking, &ScenarioConfig::default()).unwrap();
    let ratio = r.summary["fine_over_full_p50"];
    let fine = &r.points[0].report;
    let full = &r.points[1].report;
    verdict(
        4,
        "fine-grained vs full-shard locking",
        ratio <= 0.8 && fine.latency_cross.count > 0 && full.latency_cross.count > 0,
        t,
        Duration::from_secs(300),
        format!(
            "p50 cross {} vs {} ticks, ratio {ratio:.3} (<= 0.8)",
            fine.latency_cross.p50, full.latency_cross.p50
        ),
    );
}

#[test]
fn c05_atomicity_and_conservation() {
    let t = Instant::now();
    let cfg = ScenarioConfig {
        duration: 2000,
        drain: 20_000,
        tx_rate: 5.2,
        cross_fraction: 1.0,
        inject_reject_rate: 0.05,
        inject_delay_rate: 0.02,
        record_trace: true,
        ..ScenarioConfig::default()
    };
    let out = simulate(&cfg).unwrap();
    let cross = out.txs.iter().filter(|x| x.cross).count();
    // Independent re-execution of every recorded entry from genesis.
    let rep = replay(out.trace.rows().unwrap()).unwrap();
    let final_sum: u128 = out.final_balances.values().map(|b| *b as u128).sum();
    let conserved = final_sum + rep.burned as u128 == out.genesis_total;
    let timeouts = measure(&cfg, &out)
        .aborts_by_reason
        .get("Timeout")
        .copied()
        .unwrap_or(0);
    verdict(
        5,
        "atomicity and conservation",
        cross >= 10_000
            && conserved
            && rep.balances_ok
            && out.quiescent
            && out.live_locks == 0
            && out.staged_credits == 0
            && timeouts > 0,
        t,
        Duration::from_secs(120),
        format!(
            "{cross} cross txs, balances+burned = genesis: {conserved}, replay ok: {}, live locks {}, staged {}, lock expiries {timeouts}",
            rep.balances_ok, out.live_locks, out.staged_credits
        ),
    );
}

#[test]
fn c06_ibft_safety_exhaustive() {
    let t = Instant::now();
    let silent = explore_exhaustive(ExploreConfig {
        mode: ByzantineMode::Silent,
        max_round: 1,
        delay_bound: 5,
        ..ExploreConfig::default()
    });
    let equiv = explore_exhaustive(ExploreConfig {
        mode: ByzantineMode::Equivocate,
        max_round: 0,
        delay_bound: 4,
        ..ExploreConfig::default()
    });
    let equiv_rc = explore_exhaustive(ExploreConfig {
        mode: ByzantineMode::Equivocate,
        max_round: 1,
        delay_bound: 2,
        ..ExploreConfig::default()
    });
    let violations = silent.violations + equiv.violations + equiv_rc.violations;
    verdict(
        6,
        "IBFT safety (bounded exhaustive)",
        violations == 0
            && silent.complete_schedules >= 100_000
            && equiv.complete_schedules >= 100_000
            && silent.decisions > 0
            && equiv.decisions > 0,
        t,
        Duration::from_secs(600),
        format!(
            "silent {} / equivocate {} / equivocate with round change {} schedules, {violations} conflicting finalizations",
            silent.complete_schedules, equiv.complete_schedules, equiv_rc.complete_schedules
        ),
    );
}

#[test]
fn c07_ibft_liveness() {
    let t = Instant::now();
    let timing = Timing {
        tau: 8,
        round0_offset: 0,
        r_max: 8,
    };
    let mut worst = 0;
    let mut schedule_ok = true;
    let mut seen: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for n in [4u32, 7, 10] {
        let f = (n - 1) / 3;
        let silent: Vec<NodeId> = (0..f).map(NodeId).collect();
        let r = run_committee(
            n,
            &silent,
            3 * n as u64,
            timing,
            &NetworkModel::fixed(1),
            n as u64,
            1_000_000,
        )
        .unwrap();
        assert_eq!(r.rounds_per_height.len() as u64, 3 * n as u64);
        worst = worst.max(r.max_rounds());
        for (round, durations) in &r.timer_durations {
            schedule_ok &= *durations == BTreeSet::from([8u64 << round]);
            seen.entry(*round).or_default().extend(durations);
        }
    }
    let doubling = [0u64, 1, 2]
        .iter()
        .all(|r| seen.get(r) == Some(&BTreeSet::from([8u64 << r])));
    verdict(
        7,
        "IBFT liveness",
        worst <= 8 && schedule_ok && doubling,
        t,
        Duration::from_secs(120),
        format!("worst height took {worst} rounds (<= 8), round timeouts {seen:?}"),
    );
}

#[test]
fn c08_commit_reveal_integrity() {
    let t = Instant::now();
    let u = beacon_uniformity(10_000, 8, 8).unwrap();
    let critical = ChiSquared::new(255.0).unwrap().inverse_cdf(0.99);
    let bias = last_revealer_bias(10_000, 7, 8).unwrap();
    verdict(
        8,
        "commit-reveal integrity",
        u.chi_square < critical && bias <= 0.76,
        t,
        Duration::from_secs(60),
        format!(
            "chi-square {:.1} < {critical:.1}; last revealer hits target half in {:.2}% (<= 76%)",
            u.chi_square,
            bias * 100.0
        ),
    );
}

#[test]
fn c09_sybil_takeover() {
    let t = Instant::now();
    let r = sybil_experiment(&SybilParams::default()).unwrap();
    // Exact chance that a disjoint split of 30 Sybils into ten committees
    // of ten leaves every committee at or below 3: 120^10 / C(100, 30).
    let c_100_30: f64 = (1..=30).map(|i| (70 + i) as f64 / i as f64).product();
    let clean = 120f64.powi(10) / c_100_30;
    verdict(
        9,
        "Sybil takeover",
        r.captured_fraction < 0.02,
        t,
        Duration::from_secs(120),
        format!(
            "{} of {} epochs had a committee above f = {} (fraction {:.3}, < 0.02 required; analytic {:.5})",
            r.captured_epochs,
            r.params.epochs,
            r.f_threshold,
            r.captured_fraction,
            1.0 - clean
        ),
    );
}

#[test]
fn c10_dos_mitigation() {
    let t = Instant::now();
    let r = run_preset(Preset::Dos, &ScenarioConfig::default()).unwrap();
    let (s, a) = (r.summary["degradation_static"], r.summary["degradation_adaptive"]);
    verdict(
        10,
        "DoS mitigation",
        s > 0.0 && a <= 0.6 * s,
        t,
        Duration::from_secs(180),
        format!(
            "degradation static {s:.3}, adaptive {a:.3} (<= 0.6 x static), undefended {:.3}",
            r.summary["degradation_none"]
        ),
    );
}

#[test]
fn c11_reconfiguration() {
    let t = Instant::now();
    let cfg = ScenarioConfig {
        duration: 1500,
        drain: 20_000,
        zipf: 1.0,
        zipf_by_key: true,
        epoch_length: 1000,
        record_trace: true,
        ..ScenarioConfig::default()
    };
    let a = simulate(&cfg).unwrap();
    let b = simulate(&cfg).unwrap();
    let e = &a.epochs[0];
    let rep = replay(a.trace.rows().unwrap()).unwrap();
    let partition_ok = a.table.validate().is_ok() && a.table.len() != cfg.n_shards;
    let identical = a.trace.rows() == b.trace.rows() && a.trace.digest() == b.trace.digest();
    verdict(
        11,
        "reconfiguration",
        e.sigma_before >= 2.0
            && e.sigma_after < e.sigma_before
            && partition_ok
            && rep.balances_ok
            && rep.digest_ok
            && a.final_total == a.genesis_total
            && identical,
        t,
        Duration::from_secs(120),
        format!(
            "sigma {:.3} -> {:.3}, actions {:?}, replayed balances match: {}, same-seed runs identical: {identical}",
            e.sigma_before,
            e.sigma_after,
            e.actions
                .iter()
                .filter(|x| !x.starts_with("rotate"))
                .collect::<Vec<_>>(),
            rep.balances_ok
        ),
    );
}

#[test]
fn c12_determinism() {
    let t = Instant::now();
    let base = ScenarioConfig::default();
    let mut mismatches = Vec::new();
    let mut budget = Duration::ZERO;
    for p in Preset::ALL {
        let s = Instant::now();
        let a = run_preset(p, &base).unwrap();
        budget += s.elapsed() * 2;
        let b = run_preset(p, &base).unwrap();
        let digests = |r: &rbs_core::harness::PresetReport| {
            r.points
                .iter()
                .map(|x| x.report.trace_digest.clone())
                .collect::<Vec<_>>()
        };
        if digests(&a) != digests(&b) || render_rows(&a.points) != render_rows(&b.points) || a.summary != b.summary {
            mismatches.push(p.name());
        }
    }
    verdict(
        12,
        "determinism",
        mismatches.is_empty(),
        t,
        budget + Duration::from_secs(5),
        format!("{} presets run twice, mismatched: {mismatches:?}", Preset::ALL.len()),
    );
}
