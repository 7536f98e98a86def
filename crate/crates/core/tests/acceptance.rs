//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num::{BigRational, ToPrimitive};

use blocksim::chaindag::{confirmed_at_consistency, BlockId, Policy};
use blocksim::metrics::{aggregate, PeriodKind};
use blocksim::netgraph::{
    cut_conductance, generate, graph_conductance_exact, stability_bounds, BoundMode, Cut, PeerGraph, Topology,
};
use blocksim::saturation::{estimate_mu, run_property_suite, Property, SaturationConfig};
use blocksim::simengine::{
    two_peer_replay, run, run_detailed, run_replications, simulate_single_block_spread, ArrivalSource, CommMode,
    Observer, Scheduling, SimConfig, SimState, StopCondition, TranscriptEntry, TranscriptRecorder,
};
use blocksim::stats::{ks_two_sample, spearman};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn complete(n: usize) -> Arc<PeerGraph> {
    Arc::new(PeerGraph::complete(n).unwrap())
}

fn ratio(a: i64, b: i64) -> BigRational {
    BigRational::new(a.into(), b.into())
}

/// Snapshot of both views after every event of the worked example.
#[derive(Default)]
struct Snapshots {
    states: Vec<(f64, Vec<BTreeSet<BlockId>>)>,
}

impl Observer for Snapshots {
    fn after_event(&mut self, state: &SimState) {
        let views = state.views().iter().map(|v| v.known().collect()).collect();
        self.states.push((state.time(), views));
    }
}

fn set(xs: &[BlockId]) -> BTreeSet<BlockId> {
    xs.iter().copied().collect()
}

fn criterion_1() -> Outcome {
    let input = two_peer_replay();
    let mut config = SimConfig::new(
        complete(2),
        ArrivalSource::Deterministic(input.arrivals),
        CommMode::Replay(input.schedule),
        StopCondition::SimTime(6.9),
    );
    config.check_invariants = true;
    let timed = SimConfig {
        check_invariants: false,
        ..config.clone()
    };
    let started = Instant::now();
    run(&timed).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();

    let mut snaps = Snapshots::default();
    let mut transcript = TranscriptRecorder::default();
    let out = run_detailed(&config, &mut blocksim::simengine::Tee(&mut snaps, &mut transcript)).map_err(|e| e.to_string())?;

    let expected: Vec<(f64, [&[BlockId]; 2])> = vec![
        (1.1, [&[0, 1], &[0]]),
        (2.4, [&[0, 1, 2], &[0]]),
        (2.6, [&[0, 1, 2], &[0, 1]]),
        (4.0, [&[0, 1, 2], &[0, 1, 3]]),
        (5.2, [&[0, 1, 2], &[0, 1, 2, 3]]),
        (5.8, [&[0, 1, 2, 3], &[0, 1, 2, 3]]),
        (6.2, [&[0, 1, 2, 3], &[0, 1, 2, 3, 4]]),
        (6.9, [&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4]]),
    ];
    ensure(snaps.states.len() == expected.len(), || format!("{} events, expected 8", snaps.states.len()))?;
    for ((t, views), (et, ev)) in snaps.states.iter().zip(&expected) {
        ensure(t == et && views[0] == set(ev[0]) && views[1] == set(ev[1]), || {
            format!("state at t={t}: {views:?}, expected t={et} {ev:?}")
        })?;
    }
    let transfers: Vec<(f64, BlockId, usize, usize)> = transcript
        .entries
        .iter()
        .filter_map(|e| match *e {
            TranscriptEntry::Transfer { time, block, from, to } => Some((time, block, from, to)),
            _ => None,
        })
        .collect();
    ensure(
        transfers == vec![(2.6, 1, 0, 1), (5.2, 2, 0, 1), (5.8, 3, 1, 0), (6.9, 4, 1, 0)],
        || format!("transfer order {transfers:?}"),
    )?;
    let dag = out.state.dag();
    let refs: Vec<&[BlockId]> = (1..5).map(|b| dag.out_refs(b)).collect();
    ensure(refs == vec![&[0][..], &[1], &[1], &[2]], || format!("references {refs:?}"))?;
    let log = out.report.period_log.clone().ok_or("missing period log")?;
    let idle: Vec<(f64, f64)> = log
        .periods
        .iter()
        .filter(|p| p.kind == PeriodKind::Idle)
        .map(|p| (p.start, p.end))
        .collect();
    ensure(idle == vec![(0.0, 1.1), (5.8, 6.2), (6.9, 6.9)], || format!("idle intervals {idle:?}"))?;
    ensure(out.state.is_consistent(), || "not consistent at 6.9".into())?;
    ensure(elapsed < Duration::from_millis(1), || format!("runtime {elapsed:?}"))?;
    Ok(format!("8 states, 4 transfers, refs 3->1 and 4->2, idle [0,1.1) [5.8,6.2) [6.9,..), {elapsed:?}"))
}

fn criterion_2() -> Outcome {
    for n in 4..=12usize {
        let g = PeerGraph::complete(n).unwrap();
        let expected = ratio(n as i64, n as i64 - 1);
        let exact = graph_conductance_exact(&g).map_err(|e| e.to_string())?;
        ensure(exact.value == expected, || format!("complete({n}): {}", exact.value))?;
        let err = (exact.value.to_f64().unwrap() - n as f64 / (n as f64 - 1.0)).abs();
        ensure(err < 1e-12, || format!("complete({n}) float error {err}"))?;
        // Brute force over every cut with the cut formula.
        let mut brute: Option<BigRational> = None;
        for mask in 1u32..(1 << n) - 1 {
            let cut = Cut::new((0..n).filter(|&p| mask >> p & 1 == 1), n).unwrap();
            let v = cut_conductance(&g, &cut).unwrap();
            ensure(v == expected, || format!("complete({n}) cut {mask:b} gives {v}"))?;
            brute = Some(brute.map_or(v.clone(), |b| b.min(v)));
        }
        ensure(brute == Some(exact.value.clone()), || format!("complete({n}) brute force disagrees"))?;
    }
    let star = generate(&Topology::Star { n: 7 }, 0).unwrap();
    let leaf_cut = Cut::with_complement([6], 7).unwrap();
    let leaf = cut_conductance(&star, &leaf_cut).unwrap();
    ensure(leaf == ratio(7, 36), || format!("star leaf cut {leaf}"))?;
    let exact = graph_conductance_exact(&star).unwrap();
    let mut brute: Option<BigRational> = None;
    for mask in 1u32..(1 << 7) - 1 {
        let v = cut_conductance(&star, &Cut::new((0..7).filter(|&p| mask >> p & 1 == 1), 7).unwrap()).unwrap();
        brute = Some(brute.map_or(v.clone(), |b| b.min(v)));
    }
    ensure(brute == Some(exact.value.clone()) && exact.value <= ratio(7, 36), || {
        format!("star(7) exact {} brute {brute:?}", exact.value)
    })?;
    Ok(format!("complete(4..12) = N/(N-1) over all cuts; star(7) leaf cut 7/36, phi_H = {}", exact.value))
}

fn criterion_3() -> Outcome {
    let reported_lower = [0.47, 0.35, 0.30];
    let mut line = Vec::new();
    for (i, (n, upper, lower)) in [(10usize, 1.111, 0.241), (20, 1.053, 0.176), (30, 1.034, 0.152)].into_iter().enumerate() {
        let g = PeerGraph::complete(n).unwrap();
        let mode = if n <= 20 { BoundMode::Exact } else { BoundMode::Heuristic };
        let b = stability_bounds(&g, 1.0, mode).map_err(|e| e.to_string())?;
        ensure((b.upper - upper).abs() < 5e-4, || format!("N={n}: upper {}", b.upper))?;
        ensure((b.lower - lower).abs() < 5e-4, || format!("N={n}: lower {}", b.lower))?;
        ensure((b.upper - n as f64 / (n as f64 - 1.0)).abs() < 1e-12, || format!("N={n}: upper not N/(N-1)"))?;
        // The reported lower bounds track phi/ln N, twice the implemented value.
        let single_log = b.conductance / (n as f64).ln();
        ensure((single_log - reported_lower[i]).abs() < 0.02, || format!("N={n}: phi/ln N = {single_log}"))?;
        ensure((b.lower - reported_lower[i]).abs() > 0.1, || format!("N={n}: lower bound unexpectedly matches"))?;
        line.push(format!("N={n} [{:.3}, {:.3}]", b.lower, b.upper));
    }
    Ok(format!("{}; reported lower bounds match phi/ln N instead", line.join(", ")))
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let comm = CommMode::stochastic(9.14);
    let mut out = Vec::new();
    for (topology, lo, hi) in [
        (Topology::Complete { n: 3500 }, 1.72, 2.11),
        (Topology::RandomRegular { n: 3500, d: 32 }, 1.77, 2.17),
    ] {
        let g = Arc::new(generate(&topology, 1).map_err(|e| e.to_string())?);
        let sample = simulate_single_block_spread(&g, &comm, 200, 4).map_err(|e| e.to_string())?;
        let mean = sample.iter().sum::<f64>() / sample.len() as f64;
        ensure((lo..=hi).contains(&mean), || format!("{}: mean {mean:.4} outside [{lo}, {hi}]", topology.family()))?;
        out.push(format!("{} {mean:.3} s", topology.family()));
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(600), || format!("runtime {elapsed:?}"))?;
    Ok(format!("200 spreads each: {} ({elapsed:.1?})", out.join(", ")))
}

fn criterion_5() -> Outcome {
    let mut config = SimConfig::new(
        complete(3500),
        ArrivalSource::Poisson { rate: 1.0 / 600.0 },
        CommMode::stochastic(9.14),
        StopCondition::Cycles(20_000),
    );
    config.master_seed = 5;
    config.warmup_cycles = 10;
    let r = run(&config).map_err(|e| e.to_string())?;
    let cycle = r.cycle_length.ok_or("no cycles")?;
    let fraction = r.consistency_fraction.mean;
    let aoi = r.age_of_information.mean;
    ensure((cycle.mean - 625.0).abs() <= 0.05 * 625.0, || format!("cycle length {:.2}", cycle.mean))?;
    ensure(fraction >= 0.996, || format!("consistency fraction {fraction:.5}"))?;
    ensure((0.0011..=0.0021).contains(&aoi), || format!("AoI {aoi:.6}"))?;
    Ok(format!(
        "{} cycles: cycle length {:.1} +- {:.1} s, consistency fraction {fraction:.5}, AoI {aoi:.5}",
        r.counts.cycles,
        cycle.mean,
        cycle.halfwidth.unwrap_or(0.0)
    ))
}

fn criterion_6() -> Outcome {
    let r = run_property_suite(1000, 1).map_err(|e| e.to_string())?;
    ensure(r.checks == 4000, || format!("{} checks", r.checks))?;
    ensure(r.ok(), || format!("{} violations, first: {:?}", r.violations.len(), r.violations.first()))?;
    let homogeneity = r.violations.iter().filter(|v| v.property == Property::Homogeneity).count();
    Ok(format!(
        "4000 checks, 0 violations ({homogeneity} homogeneity, compared bitwise), {} vacuous; broad joint delays: {}/{} decreases (reported only)",
        r.skipped, r.broad_delay_decreases, r.broad_delay_trials
    ))
}

/// Distinguished-path persistence and monotone confirmation under the tree
/// policy, checked at every consistency time.
#[derive(Default)]
struct Persistence {
    previous: Option<(BlockId, BTreeSet<BlockId>)>,
    checked: usize,
    violations: Vec<String>,
}

impl Observer for Persistence {
    fn on_consistency(&mut self, state: &SimState) {
        let dag = state.dag();
        let path = dag.distinguished_path();
        let confirmed = confirmed_at_consistency(dag, Policy::Tree);
        if let Some((start, prev)) = &self.previous {
            if !path.contains(*start) {
                self.violations.push(format!("t={}: path misses previous start {start}", state.time()));
            }
            if !prev.is_subset(&confirmed) {
                self.violations.push(format!("t={}: confirmed set shrank", state.time()));
            }
            self.checked += 1;
        }
        self.previous = Some((path.start(), confirmed));
    }
}

/// Every block minted after a consistency time reaches every block of the
/// DAG at that time.
#[derive(Default)]
struct Reachability {
    consistent_len: Option<usize>,
    arrivals_checked: usize,
    consistencies: usize,
    violations: Vec<String>,
}

impl Observer for Reachability {
    fn on_consistency(&mut self, state: &SimState) {
        let dag = state.dag();
        let confirmed = confirmed_at_consistency(dag, Policy::ThroughputOptimal);
        if confirmed.len() != dag.len() {
            self.violations.push(format!("t={}: confirmed {} of {}", state.time(), confirmed.len(), dag.len()));
        }
        self.consistent_len = Some(dag.len());
        self.consistencies += 1;
    }

    fn on_arrival(&mut self, state: &SimState, block: BlockId) {
        if let Some(m) = self.consistent_len {
            let reach = state.dag().ancestors(block).expect("block exists");
            if let Some(missing) = (0..m).find(|&b| !reach.contains(b)) {
                self.violations.push(format!("block {block} does not reach {missing}"));
            }
            self.arrivals_checked += 1;
        }
    }
}

fn persistence_config(policy: Policy, seed: u64) -> SimConfig {
    let mut c = SimConfig::new(
        complete(10),
        ArrivalSource::Poisson { rate: 0.2 },
        CommMode::stochastic(1.0),
        StopCondition::SimTime(6000.0),
    );
    c.policy = policy;
    c.master_seed = seed;
    c
}

fn criterion_7() -> Outcome {
    let (mut checked, mut events) = (0, u64::MAX);
    for seed in 0..20 {
        let mut obs = Persistence::default();
        let out = run_detailed(&persistence_config(Policy::Tree, seed), &mut obs).map_err(|e| e.to_string())?;
        ensure(obs.violations.is_empty(), || format!("seed {seed}: {:?}", obs.violations.first()))?;
        checked += obs.checked;
        events = events.min(out.report.counts.events);
    }
    ensure(events >= 10_000, || format!("a run had only {events} events"))?;
    Ok(format!("20 seeds, >= {events} events each, {checked} consecutive consistency pairs, 0 violations"))
}

fn criterion_8() -> Outcome {
    let (mut arrivals, mut consistencies, mut events) = (0, 0, u64::MAX);
    for seed in 0..20 {
        let mut obs = Reachability::default();
        let out =
            run_detailed(&persistence_config(Policy::ThroughputOptimal, seed), &mut obs).map_err(|e| e.to_string())?;
        ensure(obs.violations.is_empty(), || format!("seed {seed}: {:?}", obs.violations.first()))?;
        arrivals += obs.arrivals_checked;
        consistencies += obs.consistencies;
        events = events.min(out.report.counts.events);
    }
    ensure(events >= 10_000, || format!("a run had only {events} events"))?;
    Ok(format!(
        "20 seeds, >= {events} events each: {arrivals} post-consistency arrivals reach all earlier blocks, {consistencies} consistency times confirm everything"
    ))
}

fn criterion_9() -> Outcome {
    let mut summary = Vec::new();
    let cases = [
        ("complete(10) tree", Topology::Complete { n: 10 }, Policy::Tree, 0.2),
        ("complete(10) throughput", Topology::Complete { n: 10 }, Policy::ThroughputOptimal, 0.2),
        ("random_regular(20,4) tree", Topology::RandomRegular { n: 20, d: 4 }, Policy::Tree, 0.3),
    ];
    for (label, topology, policy, rate) in cases {
        let mut c = SimConfig::new(
            Arc::new(generate(&topology, 3).unwrap()),
            ArrivalSource::Poisson { rate },
            CommMode::stochastic(1.0),
            StopCondition::SimTime(2500.0),
        );
        c.policy = policy;
        c.master_seed = 9;
        c.check_invariants = true;
        let out = run_detailed(&c, &mut blocksim::simengine::NoObserver).map_err(|e| format!("{label}: {e}"))?;
        let dag = out.state.dag();
        ensure(out.report.counts.events >= 10_000, || format!("{label}: {} events", out.report.counts.events))?;
        ensure(dag.max_in_degree() <= c.graph.peer_count(), || format!("{label}: in-degree"))?;
        ensure(dag.all_maximal_paths_end_at_genesis(), || format!("{label}: maximal paths"))?;
        summary.push(format!("{label} {} events", out.report.counts.events));
    }
    Ok(format!("invariants asserted after every event: {}", summary.join(", ")))
}

fn criterion_10() -> Outcome {
    let g = complete(10);
    let config = SaturationConfig {
        n_max: 128,
        replications: 30,
        seed: 10,
    };
    let one = estimate_mu(&g, 1.0, &config).map_err(|e| e.to_string())?;
    let two = estimate_mu(&g, 2.0, &config).map_err(|e| e.to_string())?;
    let upper = one.mu_upper.ok_or("unbounded CI")?;
    ensure(0.241 <= one.mu_lower && upper <= 1.112, || {
        format!("mu CI [{:.4}, {upper:.4}] not inside [0.241, 1.112]", one.mu_lower)
    })?;
    let r = two.mu_hat / one.mu_hat;
    ensure((1.8..=2.2).contains(&r), || format!("bandwidth ratio {r:.4}"))?;
    Ok(format!(
        "mu_hat {:.4} CI [{:.4}, {upper:.4}] inside [0.241, 1.112]; mu_hat(2B)/mu_hat(B) = {r:.4}",
        one.mu_hat, one.mu_lower
    ))
}

fn criterion_11() -> Outcome {
    let grid: Vec<f64> = (1..=8).map(|i| i as f64 * 0.05).collect();
    let (mut ttc, mut aoi, mut frac, mut growth) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, &lambda) in grid.iter().enumerate() {
        let mut c = SimConfig::new(
            complete(10),
            ArrivalSource::Poisson { rate: lambda },
            CommMode::stochastic(1.0),
            StopCondition::Cycles(500),
        );
        c.master_seed = 1100 + i as u64;
        c.warmup_cycles = 10;
        let reports = run_replications(&c, 30).map_err(|e| e.to_string())?;
        let agg = aggregate(&reports).map_err(|e| e.to_string())?;
        ttc.push(agg.time_to_consistency.ok_or("no TtC")?.mean);
        aoi.push(agg.age_of_information.mean);
        frac.push(agg.consistency_fraction.mean);
        growth.push(agg.growth_rate.ok_or("no growth rate")?.mean);
    }
    let rho = |ys: &[f64]| spearman(&grid, ys).unwrap_or(0.0);
    let (r_ttc, r_aoi, r_frac) = (rho(&ttc), rho(&aoi), rho(&frac));
    let max = growth.iter().cloned().fold(f64::MIN, f64::max);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let checks = [
        (r_ttc > 0.95, format!("TtC rho {r_ttc:.3}")),
        (r_aoi > 0.95, format!("AoI rho {r_aoi:.3}")),
        (r_frac < -0.95, format!("consistency fraction rho {r_frac:.3}")),
        (
            growth[0] < max && growth[growth.len() - 1] < max,
            format!("growth rate [{}] interior maximum", fmt(&growth)),
        ),
    ];
    let summary = checks
        .iter()
        .map(|(ok, what)| format!("{what} {}", if *ok { "ok" } else { "NOT MET" }))
        .collect::<Vec<_>>()
        .join("; ");
    if checks.iter().all(|c| c.0) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn criterion_12() -> Outcome {
    let sample = |scheduling, seed| -> Result<Vec<f64>, String> {
        let mut c = SimConfig::new(
            complete(5),
            ArrivalSource::Poisson { rate: 0.2 },
            CommMode::Stochastic { rate: 1.0, scheduling },
            StopCondition::Cycles(2000),
        );
        c.master_seed = seed;
        let r = run(&c).map_err(|e| e.to_string())?;
        Ok(r.period_log.ok_or("no period log")?.busy_lengths())
    };
    let lazy = sample(Scheduling::Lazy, 120)?;
    let dense = sample(Scheduling::Dense, 121)?;
    ensure(lazy.len() >= 2000 && dense.len() >= 2000, || "too few samples".into())?;
    let ks = ks_two_sample(&lazy, &dense);
    ensure(ks.p_value > 0.01, || format!("KS D = {:.4}, p = {:.4}", ks.statistic, ks.p_value))?;
    Ok(format!("{} vs {} busy periods: KS D = {:.4}, p = {:.3}", lazy.len(), dense.len(), ks.statistic, ks.p_value))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("two-peer replay", criterion_1),
        ("conductance oracle", criterion_2),
        ("stability bounds", criterion_3),
        ("single-block spread at N=3500", criterion_4),
        ("steady state at N=3500", criterion_5),
        ("monotone-separability suite", criterion_6),
        ("distinguished-path persistence", criterion_7),
        ("throughput-optimal confirmation", criterion_8),
        ("structural invariants", criterion_9),
        ("saturation bracket", criterion_10),
        ("trends over arrival rate", criterion_11),
        ("lazy-epoch equivalence", criterion_12),
    ];
    let filter: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if filter.is_some_and(|only| only != id) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
