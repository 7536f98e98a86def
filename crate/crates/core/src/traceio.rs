//! Arrival traces, experiment configuration files and report serialization.

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaindag::Policy;
use crate::metrics::SimReport;
use crate::netgraph::{generate, GraphError, Topology};
use crate::rng;
use crate::simengine::{
    parse_replay, ArrivalSource, CommMode, EngineError, ReplayInput, Scheduling, SimConfig, StopCondition,
};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: cannot parse {content:?} as a timestamp")]
    Parse { line: usize, content: String },
    #[error("trace line {line}: timestamp {value} does not exceed the previous one")]
    NonMonotone { line: usize, value: f64 },
    #[error("trace needs at least 2 timestamps, found {count}")]
    TooFew { count: usize },
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    /// Decimal seconds.
    #[default]
    Seconds,
    /// Unix timestamps.
    EpochSeconds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mean_interarrival: f64,
    pub variance_interarrival: f64,
    /// Blocks per second, `(count - 1) / span`.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalTrace {
    /// Arrival times relative to the first one, which is 0.
    pub times: Vec<f64>,
    pub original_count: usize,
    pub original_first: f64,
    pub summary: TraceSummary,
}

impl ArrivalTrace {
    pub fn from_times(raw: &[f64]) -> Result<Self, TraceError> {
        if raw.len() < 2 {
            return Err(TraceError::TooFew { count: raw.len() });
        }
        if let Some(i) = raw.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(TraceError::NonMonotone {
                line: i + 2,
                value: raw[i + 1],
            });
        }
        let first = raw[0];
        let times: Vec<f64> = raw.iter().map(|t| t - first).collect();
        let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let m = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / m;
        let variance = if gaps.len() > 1 {
            gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        Ok(ArrivalTrace {
            summary: TraceSummary {
                mean_interarrival: mean,
                variance_interarrival: variance,
                rate: m / times[times.len() - 1],
            },
            original_count: raw.len(),
            original_first: first,
            times,
        })
    }
}

/// Reads one timestamp per line. Blank lines and lines starting with `#`
/// are skipped; timestamps must be strictly increasing.
pub fn parse_trace(input: impl BufRead, format: TraceFormat) -> Result<ArrivalTrace, TraceError> {
    let mut raw = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let content = line.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let value = match format {
            TraceFormat::EpochSeconds => content.parse::<i64>().map(|v| v as f64).or_else(|_| content.parse::<f64>()),
            TraceFormat::Seconds => content.parse::<f64>(),
        }
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| TraceError::Parse {
            line: line_no,
            content: content.to_string(),
        })?;
        if let Some(&prev) = raw.last() {
            if !(value > prev) {
                return Err(TraceError::NonMonotone { line: line_no, value });
            }
        }
        raw.push(value);
        lines.push(line_no);
    }
    ArrivalTrace::from_times(&raw)
}

/// Exponential inter-arrival times at `rate`, starting at 0. Stands in for
/// recorded block timestamps, which are not shipped.
pub fn synthetic_trace(count: usize, rate: f64, seed: u64) -> Vec<f64> {
    let exp = Exp::new(rate).expect("positive rate");
    let mut rng = rng::stream(seed, rng::ARRIVAL_TIMES, 0xF00D);
    let mut t = 0.0;
    (0..count)
        .map(|i| {
            if i > 0 {
                t += exp.sample(&mut rng);
            }
            t
        })
        .collect()
}

/// Trace metadata carried into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceProvenance {
    /// File the trace was read from; absent for synthetic traces.
    pub path: Option<String>,
    pub synthetic: bool,
    pub format: TraceFormat,
    pub original_count: usize,
    pub original_first: f64,
    pub summary: TraceSummary,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config key `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("trace {path}: {source}")]
    Trace {
        path: PathBuf,
        #[source]
        source: TraceError,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalsConfig {
    Poisson {
        rate: f64,
    },
    /// Timestamps from a file, peers drawn uniformly.
    Trace {
        path: PathBuf,
        #[serde(default)]
        format: TraceFormat,
    },
    /// Generated exponential trace.
    SyntheticTrace {
        count: usize,
        rate: f64,
    },
    /// `arrival <time> <peer>` lines of a replay file.
    Replay {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CommConfig {
    Stochastic {
        rate: f64,
        #[serde(default = "lazy")]
        scheduling: Scheduling,
    },
    /// `epoch <peer> <time> <target>` lines of a replay file.
    Replay {
        schedule_path: PathBuf,
    },
}

fn lazy() -> Scheduling {
    Scheduling::Lazy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for artifacts, relative to the working directory.
    pub dir: Option<PathBuf>,
    #[serde(default = "default_report")]
    pub report: String,
    /// Per-event CSV of the first replication.
    #[serde(default)]
    pub timeseries: Option<String>,
    /// Event transcript of the first replication.
    #[serde(default)]
    pub transcript: Option<String>,
}

fn default_report() -> String {
    "report.json".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            report: default_report(),
            timeseries: None,
            transcript: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricToggles {
    #[serde(default = "yes")]
    pub period_log: bool,
    #[serde(default = "yes")]
    pub bounds: bool,
    /// Write the per-event time series of the first replication.
    #[serde(default = "yes")]
    pub timeseries: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        MetricToggles {
            period_log: true,
            bounds: true,
            timeseries: true,
        }
    }
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: Topology,
    /// Seed for random topologies; defaults to `master_seed`.
    #[serde(default)]
    pub topology_seed: Option<u64>,
    pub policy: Policy,
    pub arrivals: ArrivalsConfig,
    pub comm: CommConfig,
    pub stop: StopCondition,
    #[serde(default)]
    pub warmup_cycles: u64,
    #[serde(default = "one")]
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub metrics: MetricToggles,
}

/// Parses TOML text. Errors name the offending key path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Invalid {
        path: e.path().to_string(),
        message: e.inner().message().to_string(),
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// A config resolved into an engine configuration.
#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub sim: SimConfig,
    pub replications: usize,
    pub trace: Option<TraceProvenance>,
}

fn read_file(base: &Path, path: &Path) -> Result<(PathBuf, String), ConfigError> {
    let full = base.join(path);
    let text = std::fs::read_to_string(&full).map_err(|source| ConfigError::Io {
        path: full.clone(),
        source,
    })?;
    Ok((full, text))
}

fn read_replay(base: &Path, path: &Path) -> Result<ReplayInput, ConfigError> {
    let (_, text) = read_file(base, path)?;
    Ok(parse_replay(&text)?)
}

/// Builds the graph and engine configuration. Relative paths inside the
/// config resolve against `base_dir`.
pub fn to_sim_config(config: &ExperimentConfig, base_dir: &Path) -> Result<PreparedExperiment, ConfigError> {
    if config.replications == 0 {
        return Err(ConfigError::Invalid {
            path: "replications".into(),
            message: "must be at least 1".into(),
        });
    }
    let graph = Arc::new(generate(&config.topology, config.topology_seed.unwrap_or(config.master_seed))?);
    let mut trace = None;
    let arrivals = match &config.arrivals {
        ArrivalsConfig::Poisson { rate } => ArrivalSource::Poisson { rate: *rate },
        ArrivalsConfig::Trace { path, format } => {
            let (full, text) = read_file(base_dir, path)?;
            let t = parse_trace(text.as_bytes(), *format).map_err(|source| ConfigError::Trace {
                path: full.clone(),
                source,
            })?;
            trace = Some(TraceProvenance {
                path: Some(full.display().to_string()),
                synthetic: false,
                format: *format,
                original_count: t.original_count,
                original_first: t.original_first,
                summary: t.summary,
            });
            ArrivalSource::Trace { times: t.times }
        }
        ArrivalsConfig::SyntheticTrace { count, rate } => {
            let t = ArrivalTrace::from_times(&synthetic_trace(*count, *rate, config.master_seed)).map_err(|source| {
                ConfigError::Trace {
                    path: PathBuf::from("<synthetic>"),
                    source,
                }
            })?;
            trace = Some(TraceProvenance {
                path: None,
                synthetic: true,
                format: TraceFormat::Seconds,
                original_count: t.original_count,
                original_first: t.original_first,
                summary: t.summary,
            });
            ArrivalSource::Trace { times: t.times }
        }
        ArrivalsConfig::Replay { path } => ArrivalSource::Deterministic(read_replay(base_dir, path)?.arrivals),
    };
    let comm = match &config.comm {
        CommConfig::Stochastic { rate, scheduling } => CommMode::Stochastic {
            rate: *rate,
            scheduling: *scheduling,
        },
        CommConfig::Replay { schedule_path } => CommMode::Replay(read_replay(base_dir, schedule_path)?.schedule),
    };
    let sim = SimConfig {
        graph,
        policy: config.policy,
        arrivals,
        comm,
        stop: config.stop,
        warmup_cycles: config.warmup_cycles,
        master_seed: config.master_seed,
        check_invariants: false,
    };
    sim.validate()?;
    Ok(PreparedExperiment {
        sim,
        replications: config.replications,
        trace,
    })
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Canonical JSON: object keys sorted, two-space indentation, trailing
/// newline.
pub fn report_to_json(report: &SimReport) -> Result<String, serde_json::Error> {
    let value = serde_json::to_value(report)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

pub fn write_report(report: &SimReport, path: &Path) -> Result<(), ReportError> {
    let text = report_to_json(report)?;
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_report(path: &Path) -> Result<SimReport, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
