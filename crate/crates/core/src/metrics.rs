//! Performance metrics of a run and their aggregation over replications.
//!
//! * time to consistency: mean busy-period length;
//! * cycle length: mean busy plus mean idle period;
//! * consistency fraction: time average of the fraction of consistent peers;
//! * growth rate of the distinguished path (tree policy only);
//! * age of information: time average of the blocks a peer is missing.
//!
//! The two time averages are integrated exactly over the piecewise-constant
//! trajectory between events.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaindag::Policy;
use crate::netgraph::StabilityBounds;
use crate::saturation::SaturationSweep;
use crate::simengine::RunDescriptor;
pub use crate::stats::{ci95, MetricValue};
use crate::traceio::TraceProvenance;

pub const REPORT_SCHEMA_VERSION: &str = "blocksim.report/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("cannot aggregate an empty list of reports")]
    NoReports,
    #[error("report {index} was produced by a different configuration")]
    MismatchedConfig { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodKind {
    Idle,
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Period {
    pub kind: PeriodKind,
    pub start: f64,
    pub end: f64,
    /// False for the trailing period cut off by the end of the run.
    pub complete: bool,
}

impl Period {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Alternating idle and busy intervals over the measurement window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodLog {
    pub periods: Vec<Period>,
}

impl PeriodLog {
    fn completed(&self, kind: PeriodKind) -> impl Iterator<Item = f64> + '_ {
        self.periods
            .iter()
            .filter(move |p| p.kind == kind && p.complete)
            .map(Period::length)
    }

    pub fn busy_lengths(&self) -> Vec<f64> {
        self.completed(PeriodKind::Busy).collect()
    }

    pub fn idle_lengths(&self) -> Vec<f64> {
        self.completed(PeriodKind::Idle).collect()
    }

    /// Idle period followed by the busy period that ends it, for each
    /// completed busy period.
    pub fn cycle_lengths(&self) -> Vec<f64> {
        self.periods
            .windows(2)
            .filter(|w| {
                w[0].kind == PeriodKind::Idle && w[1].kind == PeriodKind::Busy && w[0].complete && w[1].complete
            })
            .map(|w| w[0].length() + w[1].length())
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    /// Completed cycles (consistency onsets) inside the window.
    pub cycles: u64,
    /// Blocks that arrived inside the window.
    pub blocks: u64,
    /// Events processed over the whole run, warmup included.
    pub events: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

/// Echo of the seeds a report was produced from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master_seed: u64,
    /// Per-replication master seeds, in replication order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replication_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: String,
    pub replications: usize,
    pub run: Option<RunDescriptor>,
    pub seeds: Seeds,
    pub time_to_consistency: Option<MetricValue>,
    pub cycle_length: Option<MetricValue>,
    pub consistency_fraction: MetricValue,
    pub growth_rate: Option<MetricValue>,
    pub age_of_information: MetricValue,
    pub per_block_dissemination: Option<MetricValue>,
    pub counts: Counts,
    pub window: Option<Window>,
    /// True when the run ended in a consistent state.
    pub final_consistent: Option<bool>,
    pub period_log: Option<PeriodLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<StabilityBounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saturation: Option<SaturationSweep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceProvenance>,
    /// Verbatim experiment configuration, when run from a config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<serde_json::Value>,
}

impl SimReport {
    fn empty(replications: usize) -> Self {
        SimReport {
            schema_version: REPORT_SCHEMA_VERSION.to_string(),
            replications,
            run: None,
            seeds: Seeds::default(),
            time_to_consistency: None,
            cycle_length: None,
            consistency_fraction: MetricValue::exact(1.0),
            growth_rate: None,
            age_of_information: MetricValue::exact(0.0),
            per_block_dissemination: None,
            counts: Counts::default(),
            window: None,
            final_consistent: None,
            period_log: None,
            bounds: None,
            saturation: None,
            trace: None,
            experiment: None,
        }
    }
}

/// Online accumulator fed by the engine. Inactive until the warmup ends.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    peers: usize,
    policy: Policy,
    active: bool,
    window_start: f64,
    last_t: f64,
    consistent_peers: usize,
    aoi_sum: u64,
    consistent_integral: f64,
    aoi_integral: f64,
    log: PeriodLog,
    open: Option<(PeriodKind, f64)>,
    dissemination: Vec<f64>,
    first_consistency: Option<(f64, usize)>,
    last_consistency: Option<(f64, usize)>,
    cycles: u64,
    blocks: u64,
}

impl MetricsAccumulator {
    pub fn new(peers: usize, policy: Policy) -> Self {
        MetricsAccumulator {
            peers,
            policy,
            active: false,
            window_start: 0.0,
            last_t: 0.0,
            consistent_peers: peers,
            aoi_sum: 0,
            consistent_integral: 0.0,
            aoi_integral: 0.0,
            log: PeriodLog::default(),
            open: None,
            dissemination: Vec::new(),
            first_consistency: None,
            last_consistency: None,
            cycles: 0,
            blocks: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Opens the measurement window at time `t`, which must be a time of
    /// consistency; `depth` is the distinguished-path length there.
    pub fn start_window(&mut self, t: f64, depth: usize) {
        self.active = true;
        self.window_start = t;
        self.last_t = t;
        self.open = Some((PeriodKind::Idle, t));
        self.first_consistency = Some((t, depth));
        self.last_consistency = Some((t, depth));
    }

    /// Integrates the current state up to `t`.
    pub fn advance(&mut self, t: f64) {
        if self.active && t > self.last_t {
            let dt = t - self.last_t;
            self.consistent_integral += dt * self.consistent_peers as f64;
            self.aoi_integral += dt * self.aoi_sum as f64;
            self.last_t = t;
        }
    }

    /// Records the state holding from now until the next event.
    pub fn set_state(&mut self, consistent_peers: usize, aoi_sum: u64) {
        self.consistent_peers = consistent_peers;
        self.aoi_sum = aoi_sum;
    }

    pub fn block_arrived(&mut self) {
        if self.active {
            self.blocks += 1;
        }
    }

    pub fn consistency_break(&mut self, t: f64) {
        if self.active {
            self.close_open(t);
            self.open = Some((PeriodKind::Busy, t));
        }
    }

    pub fn consistency_onset(&mut self, t: f64, depth: usize) {
        if self.active {
            self.close_open(t);
            self.open = Some((PeriodKind::Idle, t));
            self.cycles += 1;
            self.last_consistency = Some((t, depth));
        }
    }

    /// A block that arrived at `arrival` became known to every peer at `t`.
    pub fn block_disseminated(&mut self, arrival: f64, t: f64) {
        if self.active && arrival >= self.window_start {
            self.dissemination.push(t - arrival);
        }
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    fn close_open(&mut self, t: f64) {
        if let Some((kind, start)) = self.open.take() {
            self.log.periods.push(Period {
                kind,
                start,
                end: t,
                complete: true,
            });
        }
    }

    /// Closes the window at `end` and produces the metric fragment of a
    /// single-run report.
    pub fn finish(mut self, end: f64) -> SimReport {
        let mut report = SimReport::empty(1);
        if !self.active {
            return report;
        }
        self.advance(end);
        if let Some((kind, start)) = self.open.take() {
            self.log.periods.push(Period {
                kind,
                start,
                end,
                complete: false,
            });
        }
        let span = end - self.window_start;
        let peers = self.peers as f64;
        let (fraction, aoi) = if span > 0.0 {
            (
                self.consistent_integral / (span * peers),
                self.aoi_integral / (span * peers),
            )
        } else {
            (self.consistent_peers as f64 / peers, self.aoi_sum as f64 / peers)
        };
        let busy = self.log.busy_lengths();
        let idle = self.log.idle_lengths();
        let cycles = self.log.cycle_lengths();
        report.time_to_consistency = ci95(&busy);
        report.cycle_length = match (ci95(&busy), ci95(&idle)) {
            (Some(b), Some(i)) => Some(MetricValue {
                mean: b.mean + i.mean,
                halfwidth: ci95(&cycles).and_then(|c| c.halfwidth),
                samples: cycles.len(),
            }),
            _ => None,
        };
        report.consistency_fraction = MetricValue::exact(fraction.clamp(0.0, 1.0));
        report.age_of_information = MetricValue::exact(aoi.max(0.0));
        report.per_block_dissemination = ci95(&self.dissemination);
        if self.policy == Policy::Tree {
            if let (Some((t0, d0)), Some((t1, d1))) = (self.first_consistency, self.last_consistency) {
                if t1 > t0 {
                    report.growth_rate = Some(MetricValue::exact((d1 - d0) as f64 / (t1 - t0)));
                }
            }
        }
        report.counts = Counts {
            cycles: self.cycles,
            blocks: self.blocks,
            events: 0,
        };
        report.window = Some(Window {
            start: self.window_start,
            end,
        });
        report.period_log = Some(self.log);
        report
    }
}

/// Strips the replication seed so runs of one experiment compare equal.
fn config_key(run: &Option<RunDescriptor>) -> Option<RunDescriptor> {
    run.clone().map(|mut r| {
        r.master_seed = 0;
        r
    })
}

/// Across-replication means and 95% intervals. Inputs are taken in the
/// given order so the result is deterministic.
pub fn aggregate(reports: &[SimReport]) -> Result<SimReport, MetricsError> {
    let first = reports.first().ok_or(MetricsError::NoReports)?;
    let key = config_key(&first.run);
    if let Some(index) = reports.iter().position(|r| config_key(&r.run) != key) {
        return Err(MetricsError::MismatchedConfig { index });
    }
    let over = |f: &dyn Fn(&SimReport) -> Option<MetricValue>| {
        let means: Vec<f64> = reports.iter().filter_map(f).map(|m| m.mean).collect();
        ci95(&means)
    };
    let mut out = SimReport::empty(reports.len());
    out.run = key.map(|mut r| {
        r.master_seed = first.seeds.master_seed;
        r
    });
    out.seeds = Seeds {
        master_seed: first.seeds.master_seed,
        replication_seeds: reports
            .iter()
            .flat_map(|r| {
                if r.seeds.replication_seeds.is_empty() {
                    vec![r.run.as_ref().map_or(r.seeds.master_seed, |d| d.master_seed)]
                } else {
                    r.seeds.replication_seeds.clone()
                }
            })
            .collect(),
    };
    out.time_to_consistency = over(&|r| r.time_to_consistency);
    out.cycle_length = over(&|r| r.cycle_length);
    out.consistency_fraction = over(&|r| Some(r.consistency_fraction)).expect("nonempty");
    out.growth_rate = over(&|r| r.growth_rate);
    out.age_of_information = over(&|r| Some(r.age_of_information)).expect("nonempty");
    out.per_block_dissemination = over(&|r| r.per_block_dissemination);
    for r in reports {
        out.counts.cycles += r.counts.cycles;
        out.counts.blocks += r.counts.blocks;
        out.counts.events += r.counts.events;
    }
    out.bounds = first.bounds.clone();
    out.trace = first.trace.clone();
    out.experiment = first.experiment.clone();
    Ok(out)
}
