use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use blocksim::chaindag::{confirmed_at_consistency, BlockDag, DagError, Policy};
use blocksim::metrics::{aggregate, MetricValue, MetricsError, SimReport};
use blocksim::netgraph::{
    generate, per_peer_rate_cap, stability_bounds, BoundMode, GraphError, PeerGraph, StabilityBounds, Topology,
    EXACT_CUT_LIMIT,
};
use blocksim::rng::replication_seed;
use blocksim::saturation::{estimate_mu, run_property_suite, SaturationConfig};
use blocksim::simengine::{
    run, run_detailed, CommMode, EngineError, SimConfig, Tee, TimeSeriesRecorder, TranscriptRecorder,
};
use blocksim::traceio::{
    load_config, report_to_json, to_sim_config, write_report, ArrivalsConfig, ConfigError, ExperimentConfig,
    PreparedExperiment, ReportError,
};

use crate::{AnalyzeArgs, Family, GraphArgs, PolicyArg, PropertiesArgs, SaturateArgs, SimulateArgs, TopologyArgs};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input files. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failures while running or writing artifacts. Exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Graph(_) | EngineError::Config { .. } | EngineError::NotNeighbor { .. } | EngineError::Parse { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Graph(g) => g.into(),
            ConfigError::Engine(g) => g.into(),
            ConfigError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DagError> for CliError {
    fn from(e: DagError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let v = serde_json::to_value(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    serde_json::to_string_pretty(&v).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Runs `f` on a pool of `jobs` threads, or on the global pool.
fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(CliError::Validation("--jobs must be at least 1".into())),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| CliError::Runtime(e.to_string())),
    }
}

fn build_topology(g: &GraphArgs) -> Result<Topology, CliError> {
    fn need<T>(value: Option<T>, flag: &str, family: &str) -> Result<T, CliError> {
        value.ok_or_else(|| CliError::Validation(format!("--{flag} is required for family {family}")))
    }
    let name = match g.family {
        Family::Complete => "complete",
        Family::Star => "star",
        Family::Torus => "torus",
        Family::Btree => "btree",
        Family::ErdosRenyi => "erdos-renyi",
        Family::RandomRegular => "random-regular",
        Family::PrefAttach => "pref-attach",
        Family::Geometric => "geometric",
    };
    let n = || need(g.n, "n", name);
    Ok(match g.family {
        Family::Complete => Topology::Complete { n: n()? },
        Family::Star => Topology::Star { n: n()? },
        Family::Torus => Topology::Torus {
            n: n()?,
            dim: g.dim,
            k: g.k,
        },
        Family::Btree => Topology::Btree {
            branching: need(g.branching, "branching", name)?,
            depth: need(g.depth, "depth", name)?,
        },
        Family::ErdosRenyi => Topology::ErdosRenyi {
            n: n()?,
            p: need(g.p, "p", name)?,
        },
        Family::RandomRegular => Topology::RandomRegular {
            n: n()?,
            d: need(g.d, "d", name)?,
        },
        Family::PrefAttach => Topology::PrefAttach {
            n: n()?,
            d: need(g.d, "d", name)?,
        },
        Family::Geometric => Topology::Geometric {
            n: n()?,
            c: need(g.c, "c", name)?,
        },
    })
}

fn default_mode(graph: &PeerGraph) -> BoundMode {
    if graph.peer_count() <= EXACT_CUT_LIMIT {
        BoundMode::Exact
    } else {
        BoundMode::Heuristic
    }
}

pub fn topology(a: TopologyArgs) -> Result<(), CliError> {
    let topology = build_topology(&a.graph)?;
    let graph = generate(&topology, a.graph.seed)?;
    let mode = if a.exact {
        BoundMode::Exact
    } else if a.heuristic {
        BoundMode::Heuristic
    } else {
        default_mode(&graph)
    };
    let bounds = stability_bounds(&graph, a.bandwidth, mode)?;
    let cap = per_peer_rate_cap(graph.peer_count())?;
    if let Some(path) = &a.edge_list {
        write_file(path, &graph.to_edge_list())?;
    }
    let argmin_size = bounds.argmin_cut.as_ref().map(|c| c.len());
    if a.json {
        let out = json!({
            "topology": topology,
            "seed": a.graph.seed,
            "peers": graph.peer_count(),
            "requested_peers": graph.requested_peers(),
            "links": graph.link_count(),
            "connected": graph.is_connected(),
            "bounds": bounds,
            "rate_cap": cap,
        });
        println!("{}", to_json(&out)?);
        return Ok(());
    }
    let label = if bounds.estimated { " (estimate)" } else { "" };
    println!("family       {}", graph.family());
    println!("peers        {} (requested {})", graph.peer_count(), graph.requested_peers());
    println!("links        {}", graph.link_count());
    println!("conductance  {:.6}{label}", bounds.conductance);
    println!("bandwidth    {}", bounds.bandwidth);
    println!("lower bound  {:.4}{label}", bounds.lower);
    println!("upper bound  {:.4}{label}", bounds.upper);
    if let Some(size) = argmin_size {
        println!("argmin cut   |S| = {size}");
    }
    println!("rate cap     global {:.4}, per peer {:.6}", cap.global, cap.per_peer);
    Ok(())
}

fn fmt_metric(m: Option<&MetricValue>) -> String {
    match m {
        None => format!("{:>14} {:>12}", "-", "-"),
        Some(m) => {
            let hw = m.halfwidth.map_or("-".to_string(), |h| format!("{h:.6}"));
            format!("{:>14.6} {:>12}", m.mean, hw)
        }
    }
}

fn print_report(r: &SimReport) {
    println!("{:<26} {:>14} {:>12}", "metric", "mean", "95% +-");
    let rows: [(&str, Option<&MetricValue>); 6] = [
        ("time_to_consistency", r.time_to_consistency.as_ref()),
        ("cycle_length", r.cycle_length.as_ref()),
        ("consistency_fraction", Some(&r.consistency_fraction)),
        ("growth_rate", r.growth_rate.as_ref()),
        ("age_of_information", Some(&r.age_of_information)),
        ("per_block_dissemination", r.per_block_dissemination.as_ref()),
    ];
    for (name, m) in rows {
        println!("{name:<26} {}", fmt_metric(m));
    }
    println!(
        "replications {}, cycles {}, blocks {}, events {}",
        r.replications, r.counts.cycles, r.counts.blocks, r.counts.events
    );
    if let Some(b) = &r.bounds {
        let label = if b.estimated { " (estimate)" } else { "" };
        println!("stability bounds [{:.4}, {:.4}]{label}", b.lower, b.upper);
    }
}

fn with_seed(sim: &SimConfig, seed: u64) -> SimConfig {
    SimConfig {
        master_seed: seed,
        ..sim.clone()
    }
}

fn bounds_for(sim: &SimConfig) -> Result<Option<StabilityBounds>, CliError> {
    Ok(match sim.comm {
        CommMode::Stochastic { rate, .. } => Some(stability_bounds(&sim.graph, rate, default_mode(&sim.graph))?),
        CommMode::Replay(_) => None,
    })
}

struct Artifacts<'a> {
    out_dir: &'a Path,
    config: &'a ExperimentConfig,
    transcript: Option<&'a Path>,
    dag: Option<&'a Path>,
}

/// Runs every replication. The first one carries the observers for the
/// time series, transcript and DAG export.
fn run_experiment(prepared: &PreparedExperiment, art: &Artifacts, jobs: Option<usize>) -> Result<SimReport, CliError> {
    let sim = &prepared.sim;
    let seeds: Vec<u64> = (0..prepared.replications as u64).map(|r| replication_seed(sim.master_seed, r)).collect();
    let mut series = TimeSeriesRecorder::default();
    let mut transcript = TranscriptRecorder::default();
    let first = run_detailed(&with_seed(sim, seeds[0]), &mut Tee(&mut series, &mut transcript))?;
    let rest: Vec<SimReport> = with_jobs(jobs, || {
        seeds[1..]
            .par_iter()
            .map(|&s| run(&with_seed(sim, s)))
            .collect::<Result<Vec<_>, EngineError>>()
    })??;

    if art.config.metrics.timeseries {
        let name = art.config.output.timeseries.as_deref().unwrap_or("timeseries.csv");
        let path = art.out_dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        for row in &series.rows {
            w.serialize(row).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    let transcript_path = art
        .transcript
        .map(Path::to_path_buf)
        .or_else(|| art.config.output.transcript.as_ref().map(|t| art.out_dir.join(t)));
    if let Some(path) = transcript_path {
        let text: String = transcript.entries.iter().map(|e| format!("{e}\n")).collect();
        if path.as_os_str() == "-" {
            print!("{text}");
        } else {
            write_file(&path, &text)?;
        }
    }
    if let Some(path) = art.dag {
        write_file(path, &first.state.dag().export())?;
    }

    let mut report = if rest.is_empty() {
        first.report
    } else {
        let mut all = vec![first.report];
        all.extend(rest);
        aggregate(&all)?
    };
    report.seeds.master_seed = sim.master_seed;
    report.seeds.replication_seeds = seeds;
    if let Some(run) = report.run.as_mut() {
        run.master_seed = sim.master_seed;
    }
    if !art.config.metrics.period_log {
        report.period_log = None;
    }
    if art.config.metrics.bounds {
        report.bounds = bounds_for(sim)?;
    }
    report.trace = prepared.trace.clone();
    report.experiment = Some(serde_json::to_value(art.config).map_err(|e| CliError::Runtime(e.to_string()))?);
    Ok(report)
}

fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Validation(format!("--lambda-grid expects start:stop:step, got {text:?}"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(start > 0.0 && step > 0.0 && stop >= start) {
        return Err(bad());
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    // Round to suppress accumulated float noise in the printed rates.
    Ok((0..count).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect())
}

#[derive(Serialize)]
struct SweepRow {
    lambda: f64,
    time_to_consistency: Option<f64>,
    time_to_consistency_hw: Option<f64>,
    cycle_length: Option<f64>,
    cycle_length_hw: Option<f64>,
    consistency_fraction: f64,
    consistency_fraction_hw: Option<f64>,
    growth_rate: Option<f64>,
    growth_rate_hw: Option<f64>,
    age_of_information: f64,
    age_of_information_hw: Option<f64>,
    cycles: u64,
    blocks: u64,
}

impl SweepRow {
    fn new(lambda: f64, r: &SimReport) -> Self {
        let mean = |m: &Option<MetricValue>| m.map(|m| m.mean);
        let hw = |m: &Option<MetricValue>| m.and_then(|m| m.halfwidth);
        SweepRow {
            lambda,
            time_to_consistency: mean(&r.time_to_consistency),
            time_to_consistency_hw: hw(&r.time_to_consistency),
            cycle_length: mean(&r.cycle_length),
            cycle_length_hw: hw(&r.cycle_length),
            consistency_fraction: r.consistency_fraction.mean,
            consistency_fraction_hw: r.consistency_fraction.halfwidth,
            growth_rate: mean(&r.growth_rate),
            growth_rate_hw: hw(&r.growth_rate),
            age_of_information: r.age_of_information.mean,
            age_of_information_hw: r.age_of_information.halfwidth,
            cycles: r.counts.cycles,
            blocks: r.counts.blocks,
        }
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.5}"))
}

pub fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut config = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.master_seed = seed;
    }
    if let Some(r) = a.replications {
        config.replications = r;
    }
    let base = a.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out_dir: PathBuf = a.out_dir.clone().or_else(|| config.output.dir.clone()).unwrap_or_else(|| ".".into());
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;

    let Some(grid) = &a.lambda_grid else {
        let prepared = to_sim_config(&config, &base)?;
        let art = Artifacts {
            out_dir: &out_dir,
            config: &config,
            transcript: a.transcript.as_deref(),
            dag: a.dag.as_deref(),
        };
        let report = run_experiment(&prepared, &art, a.jobs)?;
        let path = out_dir.join(&config.output.report);
        write_report(&report, &path)?;
        if a.json {
            print!("{}", report_to_json(&report).map_err(|e| CliError::Runtime(e.to_string()))?);
        } else {
            print_report(&report);
            if let Some(t) = &report.trace {
                let source = t.path.as_deref().unwrap_or("synthetic");
                println!("trace {source}: {} arrivals, rate {:.6}/s", t.original_count, t.summary.rate);
            }
            println!("report written to {}", path.display());
        }
        return Ok(());
    };

    if !matches!(config.arrivals, ArrivalsConfig::Poisson { .. }) {
        return Err(CliError::Validation("--lambda-grid needs Poisson arrivals in the config".into()));
    }
    let rates = parse_grid(grid)?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for &lambda in &rates {
        let mut c = config.clone();
        c.arrivals = ArrivalsConfig::Poisson { rate: lambda };
        let prepared = to_sim_config(&c, &base)?;
        let art = Artifacts {
            out_dir: &out_dir,
            config: &c,
            transcript: None,
            dag: None,
        };
        let mut quiet = c.clone();
        quiet.metrics.timeseries = false;
        let art = Artifacts { config: &quiet, ..art };
        let report = run_experiment(&prepared, &art, a.jobs)?;
        rows.push(SweepRow::new(lambda, &report));
        reports.push(report);
    }
    let csv_path = out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    for row in &rows {
        w.serialize(row).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    let json_path = out_dir.join("sweep.json");
    let text = to_json(&reports)? + "\n";
    write_file(&json_path, &text)?;
    if a.json {
        print!("{text}");
        return Ok(());
    }
    println!(
        "{:>8} {:>12} {:>12} {:>10} {:>10} {:>10}",
        "lambda", "ttc", "cycle", "fraction", "growth", "aoi"
    );
    for r in &rows {
        println!(
            "{:>8.4} {:>12} {:>12} {:>10.5} {:>10} {:>10.5}",
            r.lambda,
            opt(r.time_to_consistency),
            opt(r.cycle_length),
            r.consistency_fraction,
            opt(r.growth_rate),
            r.age_of_information
        );
    }
    println!("sweep written to {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

pub fn saturate(a: SaturateArgs) -> Result<(), CliError> {
    let topology = build_topology(&a.graph)?;
    let graph = Arc::new(generate(&topology, a.graph.seed)?);
    let config = SaturationConfig {
        n_max: a.n_max,
        replications: a.replications,
        seed: a.graph.seed,
    };
    let sweep = with_jobs(a.jobs, || estimate_mu(&graph, a.bandwidth, &config))??;
    if a.json {
        let out = json!({
            "schema_version": blocksim::metrics::REPORT_SCHEMA_VERSION,
            "topology": topology,
            "saturation": sweep,
        });
        println!("{}", to_json(&out)?);
        return Ok(());
    }
    println!("{:>6} {:>14} {:>12}", "n", "E[X_n]", "95% +-");
    for p in &sweep.ladder {
        println!("{}", format_args!("{:>6} {}", p.n, fmt_metric(Some(&p.clearing_time))));
    }
    let upper = sweep.mu_upper.map_or("inf".into(), |u| format!("{u:.4}"));
    println!("mu_hat {:.4}, 95% CI [{:.4}, {upper}]", sweep.mu_hat, sweep.mu_lower);
    if let Some(b) = &sweep.bounds {
        let label = if b.estimated { " (estimate)" } else { "" };
        println!("stability bounds [{:.4}, {:.4}]{label}", b.lower, b.upper);
    }
    println!(
        "within bounds: point {}, interval {}",
        sweep.within_bounds.unwrap_or(false),
        sweep.ci_within_bounds.unwrap_or(false)
    );
    Ok(())
}

pub fn properties(a: PropertiesArgs) -> Result<(), CliError> {
    let report = with_jobs(a.jobs, || run_property_suite(a.instances, a.seed))??;
    if a.json {
        println!("{}", to_json(&report)?);
    } else {
        println!(
            "{} instances, {} checks: {} passed, {} vacuous, {} violations",
            report.instances,
            report.checks,
            report.passed,
            report.skipped,
            report.violations.len()
        );
        println!(
            "joint delays outside the checked class: {} of {} decreased the clearing time (informational)",
            report.broad_delay_decreases, report.broad_delay_trials
        );
        for v in &report.violations {
            println!("violation {:?} on instance {}: {}", v.property, v.instance_index, v.detail);
        }
    }
    if report.ok() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{} property violations", report.violations.len())))
    }
}

pub fn analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.dag).map_err(io_err(&a.dag))?;
    let dag = BlockDag::parse(&text)?;
    let policy = match a.policy {
        PolicyArg::Tree => Policy::Tree,
        PolicyArg::ThroughputOptimal => Policy::ThroughputOptimal,
    };
    let path = dag.distinguished_path();
    let confirmed = confirmed_at_consistency(&dag, policy);
    let orphaned: Vec<usize> = (0..dag.len()).filter(|b| !confirmed.contains(b)).collect();
    if a.json {
        let out = json!({
            "blocks": dag.len(),
            "distinguished_path": path.blocks(),
            "confirmed": confirmed,
            "orphaned": orphaned,
            "max_in_degree": dag.max_in_degree(),
            "max_out_degree": dag.max_out_degree(),
        });
        println!("{}", to_json(&out)?);
        return Ok(());
    }
    let list = |xs: &mut dyn Iterator<Item = usize>| xs.map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
    println!("blocks              {}", dag.len());
    println!("distinguished path  [{}]", list(&mut path.blocks().iter().copied()));
    println!("confirmed           {{{}}}", list(&mut confirmed.iter().copied()));
    println!("orphaned            {{{}}} ({})", list(&mut orphaned.iter().copied()), orphaned.len());
    println!("max in-degree       {}", dag.max_in_degree());
    println!("max out-degree      {}", dag.max_out_degree());
    let _ = std::io::stdout().flush();
    Ok(())
}
