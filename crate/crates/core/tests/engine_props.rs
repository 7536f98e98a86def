use std::sync::Arc;

use blocksim::chaindag::Policy;
use blocksim::netgraph::{generate, PeerGraph, Topology};
use blocksim::simengine::{
    clearing_time, run, run_with_observer, ArrivalSource, CommMode, Scheduling, SimConfig, StopCondition,
    TimeSeriesRecorder,
};
use blocksim::traceio::{load_config, read_report, report_to_json, to_sim_config, write_report};
use proptest::prelude::*;

fn config(n: usize, lambda: f64, stop: StopCondition, seed: u64, policy: Policy) -> SimConfig {
    let graph = Arc::new(PeerGraph::complete(n).unwrap());
    let mut c = SimConfig::new(graph, ArrivalSource::Poisson { rate: lambda }, CommMode::stochastic(1.0), stop);
    c.master_seed = seed;
    c.policy = policy;
    c.check_invariants = true;
    c
}

/// Riemann sums of the piecewise-constant state on a fine grid.
fn sampled_fractions(rows: &TimeSeriesRecorder, n: usize, horizon: f64, dt: f64) -> (f64, f64) {
    let (mut consistent, mut aoi) = (0.0, 0.0);
    let mut idx = 0;
    let (mut cp, mut sum) = (n, 0u64);
    let steps = (horizon / dt).round() as usize;
    for k in 0..steps {
        let t = (k as f64 + 0.5) * dt;
        while idx < rows.rows.len() && rows.rows[idx].time <= t {
            cp = rows.rows[idx].consistent_peers;
            sum = rows.rows[idx].aoi_sum;
            idx += 1;
        }
        consistent += cp as f64 / n as f64 * dt;
        aoi += sum as f64 / n as f64 * dt;
    }
    (consistent / horizon, aoi / horizon)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_integrals_agree_with_dense_sampling(
        n in 2usize..7,
        lambda in 0.05f64..0.6,
        seed in any::<u64>(),
        tree in any::<bool>(),
    ) {
        let horizon = 200.0;
        let policy = if tree { Policy::Tree } else { Policy::ThroughputOptimal };
        let cfg = config(n, lambda, StopCondition::SimTime(horizon), seed, policy);
        let mut rec = TimeSeriesRecorder::default();
        let report = run_with_observer(&cfg, &mut rec).unwrap();
        let dt = 1e-3;
        let (fraction, aoi) = sampled_fractions(&rec, n, horizon, dt);
        // Each state change shifts the midpoint sum by at most one cell.
        let changes = rec.rows.len() as f64 + 1.0;
        let max_aoi = rec.rows.iter().map(|r| r.aoi_sum).max().unwrap_or(0) as f64 / n as f64;
        prop_assert!((report.consistency_fraction.mean - fraction).abs() <= changes * dt / horizon + 1e-9);
        prop_assert!((report.age_of_information.mean - aoi).abs() <= changes * dt * max_aoi.max(1.0) / horizon + 1e-9);
    }

    #[test]
    fn reports_are_byte_identical_for_equal_seeds(seed in any::<u64>(), n in 2usize..6) {
        let cfg = config(n, 0.3, StopCondition::Cycles(20), seed, Policy::Tree);
        let a = report_to_json(&run(&cfg).unwrap()).unwrap();
        let b = report_to_json(&run(&cfg).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    // Dense scheduling makes each peer's epochs and targets independent of
    // the state, so equal seeds give the same schedule for every batch.
    #[test]
    fn batch_clearing_grows_with_batch_size(seed in any::<u64>(), n in 2usize..8, origins in proptest::collection::vec(0usize..8, 1..12)) {
        let graph = Arc::new(PeerGraph::complete(n).unwrap());
        let batch: Vec<usize> = origins.into_iter().map(|p| p % n).collect();
        let comm = CommMode::Stochastic { rate: 1.0, scheduling: Scheduling::Dense };
        let mut last = 0.0;
        for k in 1..=batch.len() {
            let x = clearing_time(&graph, &comm, &batch[..k], seed).unwrap().unwrap();
            prop_assert!(x >= last, "X_{} = {} < X_{} = {}", k, x, k - 1, last);
            last = x;
        }
    }

    #[test]
    fn consistency_fraction_is_a_fraction(seed in any::<u64>(), lambda in 0.01f64..2.0) {
        let cfg = config(4, lambda, StopCondition::SimTime(100.0), seed, Policy::Tree);
        let r = run(&cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.consistency_fraction.mean));
        prop_assert!(r.age_of_information.mean >= 0.0);
    }
}

#[test]
fn sparse_topology_runs_with_invariants() {
    let graph = Arc::new(generate(&Topology::Torus { n: 16, dim: 2, k: 1 }, 0).unwrap());
    let mut cfg = SimConfig::new(
        graph,
        ArrivalSource::Poisson { rate: 0.1 },
        CommMode::stochastic(1.0),
        StopCondition::Cycles(50),
    );
    cfg.check_invariants = true;
    cfg.master_seed = 9;
    let r = run(&cfg).unwrap();
    assert_eq!(r.counts.cycles, 50);
    assert_eq!(r.final_consistent, Some(true));
}

#[test]
fn config_and_report_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(
        &cfg_path,
        r#"
policy = "throughput_optimal"
master_seed = 11
replications = 2
[topology]
family = "star"
n = 6
[arrivals]
kind = "poisson"
rate = 0.1
[comm]
mode = "stochastic"
rate = 2.0
scheduling = "dense"
[stop]
kind = "blocks"
value = 30
"#,
    )
    .unwrap();
    let exp = load_config(&cfg_path).unwrap();
    let prepared = to_sim_config(&exp, dir.path()).unwrap();
    assert_eq!(prepared.replications, 2);
    let report = run(&prepared.sim).unwrap();
    assert!(report.counts.blocks >= 30);

    let path = dir.path().join("report.json");
    write_report(&report, &path).unwrap();
    let back = read_report(&path).unwrap();
    assert_eq!(report_to_json(&back).unwrap(), report_to_json(&report).unwrap());
}
