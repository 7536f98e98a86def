//! Discrete-event engine for block arrivals and rate-limited gossip.
//!
//! Events are ordered by `(time, class, peer, seq)` where arrivals have class
//! 0 and communication epochs class 1, so at equal timestamps arrivals run
//! first and lower peer ids run before higher ones.
//!
//! In lazy stochastic mode only peers holding a block that some peer lacks
//! keep an epoch scheduled. Any other epoch would be a no-op, and by
//! memorylessness a fresh exponential delay can be drawn once a peer has
//! something to offer again. Dense mode keeps every peer's rate-B epoch
//! process running and exists as the reference for that equivalence.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaindag::{BlockDag, BlockId, DagError, PeerView, Policy};
use crate::metrics::{MetricsAccumulator, Seeds, SimReport};
use crate::netgraph::{GraphError, PeerGraph, PeerId};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error("invalid {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("replay epoch of peer {peer} at t={time} targets {target}, which is not a neighbor")]
    NotNeighbor { peer: PeerId, time: f64, target: PeerId },
    #[error("arrival trace exhausted after {arrivals} blocks, before the stop condition was met")]
    TraceExhausted { arrivals: u64 },
    #[error("invariant violated at t={time}: {detail}")]
    Invariant { time: f64, detail: String },
    #[error("replay line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn config_err(field: &'static str, reason: impl Into<String>) -> EngineError {
    EngineError::Config {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalSource {
    /// Poisson arrivals at `rate` blocks/s, each at a uniform peer.
    Poisson { rate: f64 },
    /// Explicit `(time, peer)` pairs in nondecreasing time order.
    Deterministic(Vec<(f64, PeerId)>),
    /// Recorded arrival times; peers drawn uniformly.
    Trace { times: Vec<f64> },
    /// All blocks present at time 0, one per listed peer.
    Batch(Vec<PeerId>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduling {
    Lazy,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommMode {
    /// Each peer contacts a uniformly chosen link endpoint at the epochs of
    /// a Poisson process of `rate` per second.
    Stochastic { rate: f64, scheduling: Scheduling },
    Replay(ReplaySchedule),
}

impl CommMode {
    pub fn stochastic(rate: f64) -> Self {
        CommMode::Stochastic {
            rate,
            scheduling: Scheduling::Lazy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum StopCondition {
    /// Stop at the n-th consistency onset after the warmup.
    Cycles(u64),
    /// Mint n blocks in total, then stop at the next consistency.
    Blocks(u64),
    /// Stop at simulated time T.
    SimTime(f64),
}

/// Explicit communication epochs: for each peer, `(time, target)` pairs in
/// nondecreasing time order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplaySchedule {
    epochs: Vec<Vec<(f64, PeerId)>>,
}

impl ReplaySchedule {
    pub fn new(peer_count: usize) -> Self {
        ReplaySchedule {
            epochs: vec![Vec::new(); peer_count],
        }
    }

    pub fn push(&mut self, peer: PeerId, time: f64, target: PeerId) {
        if peer >= self.epochs.len() {
            self.epochs.resize(peer + 1, Vec::new());
        }
        self.epochs[peer].push((time, target));
    }

    pub fn peer_count(&self) -> usize {
        self.epochs.len()
    }

    pub fn epochs(&self, peer: PeerId) -> &[(f64, PeerId)] {
        self.epochs.get(peer).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.epochs.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Latest epoch time, if any.
    pub fn horizon(&self) -> Option<f64> {
        self.epochs.iter().flatten().map(|e| e.0).max_by(f64::total_cmp)
    }

    pub fn shifted(&self, c: f64) -> Self {
        ReplaySchedule {
            epochs: self
                .epochs
                .iter()
                .map(|v| v.iter().map(|&(t, q)| (t + c, q)).collect())
                .collect(),
        }
    }

    pub fn validate(&self, graph: &PeerGraph) -> Result<(), EngineError> {
        if self.epochs.len() > graph.peer_count() {
            return Err(config_err(
                "replay",
                format!("schedule names peer {} but the graph has {}", self.epochs.len() - 1, graph.peer_count()),
            ));
        }
        for (p, list) in self.epochs.iter().enumerate() {
            let mut last = f64::NEG_INFINITY;
            for &(time, target) in list {
                if !time.is_finite() || time < last {
                    return Err(config_err(
                        "replay",
                        format!("epochs of peer {p} must be finite and nondecreasing (t={time})"),
                    ));
                }
                last = time;
                if !graph.is_neighbor(p, target) {
                    return Err(EngineError::NotNeighbor { peer: p, time, target });
                }
            }
        }
        Ok(())
    }
}

/// Deterministic arrivals and epochs read from replay text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayInput {
    pub arrivals: Vec<(f64, PeerId)>,
    pub schedule: ReplaySchedule,
}

/// Parses `arrival <time> <peer>` and `epoch <peer> <time> <target>` lines.
/// Blank lines and `#` comments are ignored.
pub fn parse_replay(text: &str) -> Result<ReplayInput, EngineError> {
    let mut out = ReplayInput::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let err = |reason: String| EngineError::Parse { line, reason };
        let time = |s: &str| -> Result<f64, EngineError> {
            s.parse::<f64>()
                .ok()
                .filter(|t| t.is_finite())
                .ok_or_else(|| err(format!("bad time {s:?}")))
        };
        let peer = |s: &str| -> Result<PeerId, EngineError> { s.parse().map_err(|_| err(format!("bad peer {s:?}"))) };
        match fields.as_slice() {
            ["arrival", t, p] => out.arrivals.push((time(t)?, peer(p)?)),
            ["epoch", p, t, q] => out.schedule.push(peer(p)?, time(t)?, peer(q)?),
            _ => return Err(err(format!("expected `arrival <time> <peer>` or `epoch <peer> <time> <target>`, got {content:?}"))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub graph: Arc<PeerGraph>,
    pub policy: Policy,
    pub arrivals: ArrivalSource,
    pub comm: CommMode,
    pub stop: StopCondition,
    /// Consistency onsets discarded before the measurement window opens.
    pub warmup_cycles: u64,
    pub master_seed: u64,
    /// Assert the structural invariants after every event. Slow.
    pub check_invariants: bool,
}

impl SimConfig {
    pub fn new(graph: Arc<PeerGraph>, arrivals: ArrivalSource, comm: CommMode, stop: StopCondition) -> Self {
        SimConfig {
            graph,
            policy: Policy::Tree,
            arrivals,
            comm,
            stop,
            warmup_cycles: 0,
            master_seed: 0,
            check_invariants: false,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let g = &self.graph;
        let n = g.peer_count();
        if !g.is_connected() {
            return Err(GraphError::Disconnected.into());
        }
        let positive = |field, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(config_err(field, format!("must be positive and finite, got {x}")))
            }
        };
        match &self.arrivals {
            ArrivalSource::Poisson { rate } => positive("arrivals.rate", *rate)?,
            ArrivalSource::Deterministic(list) => {
                let mut last = f64::NEG_INFINITY;
                for &(t, p) in list {
                    if !t.is_finite() || t < last {
                        return Err(config_err("arrivals", format!("times must be finite and nondecreasing (t={t})")));
                    }
                    if p >= n {
                        return Err(config_err("arrivals", format!("peer {p} outside 0..{n}")));
                    }
                    last = t;
                }
            }
            ArrivalSource::Trace { times } => {
                if times.windows(2).any(|w| !(w[0] < w[1])) || times.iter().any(|t| !t.is_finite()) {
                    return Err(config_err("arrivals", "trace times must be finite and strictly increasing"));
                }
            }
            ArrivalSource::Batch(peers) => {
                if let Some(p) = peers.iter().find(|&&p| p >= n) {
                    return Err(config_err("arrivals", format!("peer {p} outside 0..{n}")));
                }
            }
        }
        match &self.comm {
            CommMode::Stochastic { rate, .. } => positive("comm.rate", *rate)?,
            CommMode::Replay(s) => s.validate(g)?,
        }
        match self.stop {
            StopCondition::Cycles(0) | StopCondition::Blocks(0) => {
                return Err(config_err("stop", "must be positive"));
            }
            StopCondition::SimTime(t) => positive("stop", t)?,
            _ => {}
        }
        Ok(())
    }

    pub fn descriptor(&self) -> RunDescriptor {
        let arrivals = match &self.arrivals {
            ArrivalSource::Poisson { rate } => ArrivalDescriptor::Poisson { rate: *rate },
            ArrivalSource::Deterministic(v) => ArrivalDescriptor::Deterministic { count: v.len() },
            ArrivalSource::Trace { times } => ArrivalDescriptor::Trace { count: times.len() },
            ArrivalSource::Batch(v) => ArrivalDescriptor::Batch { count: v.len() },
        };
        let comm = match &self.comm {
            CommMode::Stochastic { rate, scheduling } => CommDescriptor::Stochastic {
                rate: *rate,
                scheduling: *scheduling,
            },
            CommMode::Replay(s) => CommDescriptor::Replay { epochs: s.len() },
        };
        RunDescriptor {
            topology: self.graph.family().to_string(),
            peers: self.graph.peer_count(),
            requested_peers: self.graph.requested_peers(),
            links: self.graph.link_count(),
            policy: self.policy,
            arrivals,
            comm,
            stop: self.stop,
            warmup_cycles: self.warmup_cycles,
            master_seed: self.master_seed,
        }
    }
}

/// Serializable summary of a `SimConfig`, echoed in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub topology: String,
    pub peers: usize,
    pub requested_peers: usize,
    pub links: usize,
    pub policy: Policy,
    pub arrivals: ArrivalDescriptor,
    pub comm: CommDescriptor,
    pub stop: StopCondition,
    pub warmup_cycles: u64,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalDescriptor {
    Poisson { rate: f64 },
    Deterministic { count: usize },
    Trace { count: usize },
    Batch { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CommDescriptor {
    Stochastic { rate: f64, scheduling: Scheduling },
    Replay { epochs: usize },
}

/// One block moving along a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub block: BlockId,
    pub from: PeerId,
    pub to: PeerId,
}

/// Hooks called by the engine. All default to no-ops.
pub trait Observer {
    fn on_arrival(&mut self, _state: &SimState, _block: BlockId) {}
    /// A communication epoch of `from` towards `to`; `block` is `None` when
    /// `to` already had everything `from` knows.
    fn on_epoch(&mut self, _state: &SimState, _from: PeerId, _to: PeerId, _block: Option<BlockId>) {}
    fn on_consistency(&mut self, _state: &SimState) {}
    fn on_inconsistency(&mut self, _state: &SimState) {}
    fn after_event(&mut self, _state: &SimState) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// The evolving system state.
#[derive(Debug, Clone)]
pub struct SimState {
    graph: Arc<PeerGraph>,
    time: f64,
    dag: BlockDag,
    views: Vec<PeerView>,
    holders: Vec<u32>,
    /// Blocks not yet known to every peer.
    pending: BTreeSet<BlockId>,
    /// Per peer, how many pending blocks it holds.
    pending_held: Vec<u32>,
    consistent_peers: usize,
    aoi_sum: u64,
    disseminated_at: Vec<Option<f64>>,
    events: u64,
    onsets: u64,
}

impl SimState {
    fn new(graph: Arc<PeerGraph>) -> Self {
        let n = graph.peer_count();
        SimState {
            time: 0.0,
            dag: BlockDag::new(),
            views: (0..n).map(PeerView::new).collect(),
            holders: vec![n as u32],
            pending: BTreeSet::new(),
            pending_held: vec![0; n],
            consistent_peers: n,
            aoi_sum: 0,
            disseminated_at: vec![Some(0.0)],
            events: 0,
            onsets: 0,
            graph,
        }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn graph(&self) -> &PeerGraph {
        &self.graph
    }

    pub fn peer_count(&self) -> usize {
        self.views.len()
    }

    pub fn dag(&self) -> &BlockDag {
        &self.dag
    }

    pub fn view(&self, p: PeerId) -> &PeerView {
        &self.views[p]
    }

    pub fn views(&self) -> &[PeerView] {
        &self.views
    }

    /// `|B(t)|`, genesis included.
    pub fn total_blocks(&self) -> usize {
        self.dag.len()
    }

    pub fn consistent_peers(&self) -> usize {
        self.consistent_peers
    }

    pub fn is_consistent(&self) -> bool {
        self.consistent_peers == self.views.len()
    }

    /// `sum_p |B(t)| - |B_p(t)|`.
    pub fn aoi_sum(&self) -> u64 {
        self.aoi_sum
    }

    /// Time at which every peer held block `b`, if that has happened.
    pub fn disseminated_at(&self, b: BlockId) -> Option<f64> {
        self.disseminated_at.get(b).copied().flatten()
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    /// Number of consistency onsets so far, warmup included.
    pub fn consistency_onsets(&self) -> u64 {
        self.onsets
    }

    /// `min(B_p \ B_q)`.
    pub fn lowest_missing(&self, p: PeerId, q: PeerId) -> Option<BlockId> {
        let (vp, vq) = (&self.views[p], &self.views[q]);
        self.pending.iter().copied().find(|&b| vp.knows(b) && !vq.knows(b))
    }
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Arrival,
    Epoch { generation: u64 },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    peer: PeerId,
    seq: u64,
    kind: EventKind,
}

impl Event {
    fn class(&self) -> u8 {
        match self.kind {
            EventKind::Arrival => 0,
            EventKind::Epoch { .. } => 1,
        }
    }

    fn key_cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.class().cmp(&other.class()))
            .then(self.peer.cmp(&other.peer))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so that `BinaryHeap` pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self)
    }
}

enum Arrivals<'a> {
    Poisson {
        exp: Exp<f64>,
        times: ChaCha8Rng,
        peers: ChaCha8Rng,
        last: f64,
    },
    List {
        items: &'a [(f64, PeerId)],
        pos: usize,
    },
    Trace {
        times: &'a [f64],
        pos: usize,
        peers: ChaCha8Rng,
    },
    Batch {
        peers: &'a [PeerId],
        pos: usize,
    },
}

impl Arrivals<'_> {
    fn next(&mut self, n: usize) -> Option<(f64, PeerId)> {
        match self {
            Arrivals::Poisson { exp, times, peers, last } => {
                *last += exp.sample(times);
                Some((*last, peers.random_range(0..n)))
            }
            Arrivals::List { items, pos } => {
                let out = items.get(*pos).copied();
                *pos += 1;
                out
            }
            Arrivals::Trace { times, pos, peers } => {
                let t = *times.get(*pos)?;
                *pos += 1;
                Some((t, peers.random_range(0..n)))
            }
            Arrivals::Batch { peers, pos } => {
                let p = *peers.get(*pos)?;
                *pos += 1;
                Some((0.0, p))
            }
        }
    }
}

enum Comm<'a> {
    Lazy {
        exp: Exp<f64>,
        rngs: Vec<ChaCha8Rng>,
        generation: Vec<u64>,
        active: Vec<bool>,
    },
    Dense {
        exp: Exp<f64>,
        rngs: Vec<ChaCha8Rng>,
    },
    Replay {
        schedule: &'a ReplaySchedule,
        cursor: Vec<usize>,
    },
}

/// Result of a run together with its final state.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: SimReport,
    pub state: SimState,
}

pub fn run(config: &SimConfig) -> Result<SimReport, EngineError> {
    run_with_observer(config, &mut NoObserver)
}

pub fn run_with_observer(config: &SimConfig, observer: &mut dyn Observer) -> Result<SimReport, EngineError> {
    run_detailed(config, observer).map(|o| o.report)
}

pub fn run_detailed(config: &SimConfig, observer: &mut dyn Observer) -> Result<RunOutput, EngineError> {
    config.validate()?;
    Engine::new(config).run(observer)
}

struct Engine<'a> {
    config: &'a SimConfig,
    state: SimState,
    queue: BinaryHeap<Event>,
    seq: u64,
    arrivals: Arrivals<'a>,
    arrivals_done: bool,
    minted: u64,
    comm: Comm<'a>,
    acc: MetricsAccumulator,
}

impl<'a> Engine<'a> {
    fn new(config: &'a SimConfig) -> Self {
        let n = config.graph.peer_count();
        let seed = config.master_seed;
        let arrivals = match &config.arrivals {
            ArrivalSource::Poisson { rate } => Arrivals::Poisson {
                exp: Exp::new(*rate).expect("validated rate"),
                times: rng::stream(seed, rng::ARRIVAL_TIMES, 0),
                peers: rng::stream(seed, rng::ARRIVAL_PEERS, 0),
                last: 0.0,
            },
            ArrivalSource::Deterministic(items) => Arrivals::List { items, pos: 0 },
            ArrivalSource::Trace { times } => Arrivals::Trace {
                times,
                pos: 0,
                peers: rng::stream(seed, rng::ARRIVAL_PEERS, 0),
            },
            ArrivalSource::Batch(peers) => Arrivals::Batch { peers, pos: 0 },
        };
        let peer_rngs = || (0..n).map(|p| rng::stream(seed, rng::PEER_COMM, p as u64)).collect();
        let comm = match &config.comm {
            CommMode::Stochastic {
                rate,
                scheduling: Scheduling::Lazy,
            } => Comm::Lazy {
                exp: Exp::new(*rate).expect("validated rate"),
                rngs: peer_rngs(),
                generation: vec![0; n],
                active: vec![false; n],
            },
            CommMode::Stochastic {
                rate,
                scheduling: Scheduling::Dense,
            } => Comm::Dense {
                exp: Exp::new(*rate).expect("validated rate"),
                rngs: peer_rngs(),
            },
            CommMode::Replay(schedule) => Comm::Replay {
                schedule,
                cursor: vec![0; n],
            },
        };
        Engine {
            config,
            state: SimState::new(config.graph.clone()),
            queue: BinaryHeap::new(),
            seq: 0,
            arrivals,
            arrivals_done: false,
            minted: 0,
            comm,
            acc: MetricsAccumulator::new(n, config.policy),
        }
    }

    fn push(&mut self, time: f64, peer: PeerId, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event {
            time,
            peer,
            seq: self.seq,
            kind,
        });
    }

    fn schedule_arrival(&mut self) {
        if let StopCondition::Blocks(limit) = self.config.stop {
            if self.minted >= limit {
                self.arrivals_done = true;
                return;
            }
        }
        match self.arrivals.next(self.state.peer_count()) {
            Some((t, p)) => self.push(t, p, EventKind::Arrival),
            None => self.arrivals_done = true,
        }
    }

    fn schedule_replay(&mut self, p: PeerId) {
        if let Comm::Replay { schedule, cursor } = &self.comm {
            if let Some(&(t, _)) = schedule.epochs(p).get(cursor[p]) {
                self.push(t, p, EventKind::Epoch { generation: 0 });
            }
        }
    }

    /// Starts the epoch process of `p` at time `now` if lazy scheduling
    /// had it dormant.
    fn activate(&mut self, p: PeerId, now: f64) {
        let next = match &mut self.comm {
            Comm::Lazy {
                exp,
                rngs,
                generation,
                active,
            } if !active[p] => {
                active[p] = true;
                generation[p] += 1;
                Some((now + exp.sample(&mut rngs[p]), generation[p]))
            }
            _ => None,
        };
        if let Some((t, generation)) = next {
            self.push(t, p, EventKind::Epoch { generation });
        }
    }

    fn deactivate(&mut self, p: PeerId) {
        if let Comm::Lazy { active, .. } = &mut self.comm {
            active[p] = false;
        }
    }

    fn run(mut self, observer: &mut dyn Observer) -> Result<RunOutput, EngineError> {
        let n = self.state.peer_count();
        if self.config.warmup_cycles == 0 {
            self.acc.start_window(0.0, 0);
            self.acc.set_state(n, 0);
        }
        self.schedule_arrival();
        match &self.comm {
            Comm::Dense { .. } => {
                for p in 0..n {
                    let t = match &mut self.comm {
                        Comm::Dense { exp, rngs } => exp.sample(&mut rngs[p]),
                        _ => unreachable!(),
                    };
                    self.push(t, p, EventKind::Epoch { generation: 0 });
                }
            }
            Comm::Replay { .. } => {
                for p in 0..n {
                    self.schedule_replay(p);
                }
            }
            Comm::Lazy { .. } => {}
        }

        let end = loop {
            let Some(event) = self.queue.pop() else {
                if matches!(self.config.arrivals, ArrivalSource::Trace { .. }) && !self.stop_reached() {
                    return Err(EngineError::TraceExhausted { arrivals: self.minted });
                }
                break match self.config.stop {
                    StopCondition::SimTime(t) => t.max(self.state.time),
                    _ => self.state.time,
                };
            };
            if let StopCondition::SimTime(limit) = self.config.stop {
                if event.time > limit {
                    break limit;
                }
            }
            let handled = match event.kind {
                EventKind::Arrival => {
                    self.handle_arrival(event.time, event.peer, observer)?;
                    true
                }
                EventKind::Epoch { generation } => self.handle_epoch(event.time, event.peer, generation, observer)?,
            };
            if handled {
                self.state.events += 1;
                if self.config.check_invariants {
                    self.check_invariants()?;
                }
                observer.after_event(&self.state);
                if self.stop_reached() {
                    break self.state.time;
                }
            }
        };

        let mut report = self.acc.finish(end);
        report.run = Some(self.config.descriptor());
        report.seeds = Seeds {
            master_seed: self.config.master_seed,
            replication_seeds: Vec::new(),
        };
        report.counts.events = self.state.events;
        report.final_consistent = Some(self.state.is_consistent());
        Ok(RunOutput {
            report,
            state: self.state,
        })
    }

    fn stop_reached(&self) -> bool {
        match self.config.stop {
            StopCondition::Cycles(n) => self.acc.is_active() && self.acc.cycles() >= n,
            StopCondition::Blocks(n) => self.minted >= n && self.state.is_consistent(),
            StopCondition::SimTime(_) => false,
        }
    }

    fn handle_arrival(&mut self, t: f64, miner: PeerId, observer: &mut dyn Observer) -> Result<(), EngineError> {
        let n = self.state.peer_count();
        self.acc.advance(t);
        let st = &mut self.state;
        st.time = t;
        let was_consistent = st.is_consistent();
        let miner_consistent = st.views[miner].len() == st.dag.len();
        let refs = st.views[miner].select_refs(self.config.policy);
        let b = st.dag.push(Some(miner), t, refs)?;
        st.views[miner].insert(&st.dag, b)?;
        st.holders.push(1);
        st.disseminated_at.push(None);
        st.pending.insert(b);
        st.pending_held[miner] += 1;
        st.aoi_sum += (n - 1) as u64;
        st.consistent_peers = usize::from(miner_consistent);
        self.minted += 1;
        let activate = st.pending_held[miner] == 1;
        self.acc.block_arrived();
        self.acc.set_state(self.state.consistent_peers, self.state.aoi_sum);
        if was_consistent {
            self.acc.consistency_break(t);
        }
        if activate {
            self.activate(miner, t);
        }
        if self.config.check_invariants {
            self.check_arrival(b)?;
        }
        observer.on_arrival(&self.state, b);
        if was_consistent {
            observer.on_inconsistency(&self.state);
        }
        self.schedule_arrival();
        Ok(())
    }

    /// Returns false for stale lazy epochs, which are discarded unseen.
    fn handle_epoch(
        &mut self,
        t: f64,
        p: PeerId,
        generation: u64,
        observer: &mut dyn Observer,
    ) -> Result<bool, EngineError> {
        let target = match &mut self.comm {
            Comm::Lazy {
                rngs,
                generation: current,
                active,
                ..
            } => {
                if !active[p] || current[p] != generation {
                    return Ok(false);
                }
                let d = self.state.graph.degree(p);
                self.state.graph.neighbor_at(p, rngs[p].random_range(0..d))
            }
            Comm::Dense { rngs, .. } => {
                let d = self.state.graph.degree(p);
                self.state.graph.neighbor_at(p, rngs[p].random_range(0..d))
            }
            Comm::Replay { schedule, cursor } => {
                let (_, q) = schedule.epochs(p)[cursor[p]];
                cursor[p] += 1;
                q
            }
        };
        self.acc.advance(t);
        self.state.time = t;
        let block = self.state.lowest_missing(p, target);
        if let Some(b) = block {
            if self.config.check_invariants {
                self.check_lowest(p, target, b)?;
            }
            self.transfer(t, b, target)?;
        }
        // Keep this peer's epoch process going.
        match &mut self.comm {
            Comm::Lazy {
                exp,
                rngs,
                active,
                ..
            } => {
                if active[p] {
                    let next = t + exp.sample(&mut rngs[p]);
                    self.push(next, p, EventKind::Epoch { generation });
                }
            }
            Comm::Dense { exp, rngs } => {
                let next = t + exp.sample(&mut rngs[p]);
                self.push(next, p, EventKind::Epoch { generation: 0 });
            }
            Comm::Replay { .. } => self.schedule_replay(p),
        }
        observer.on_epoch(&self.state, p, target, block);
        if block.is_some() && self.state.is_consistent() {
            observer.on_consistency(&self.state);
        }
        Ok(true)
    }

    fn transfer(&mut self, t: f64, b: BlockId, q: PeerId) -> Result<(), EngineError> {
        let n = self.state.peer_count();
        let st = &mut self.state;
        st.views[q].insert(&st.dag, b)?;
        st.aoi_sum -= 1;
        if st.views[q].len() == st.dag.len() {
            st.consistent_peers += 1;
        }
        st.holders[b] += 1;
        st.pending_held[q] += 1;
        let newly_active = st.pending_held[q] == 1;
        let mut dormant = Vec::new();
        if st.holders[b] as usize == n {
            st.pending.remove(&b);
            st.disseminated_at[b] = Some(t);
            for p in 0..n {
                st.pending_held[p] -= 1;
                if st.pending_held[p] == 0 {
                    dormant.push(p);
                }
            }
        }
        let arrival = st.dag.blocks()[b].arrival_time;
        let consistent = st.is_consistent();
        if newly_active && st.pending_held[q] > 0 {
            self.activate(q, t);
        }
        for p in dormant {
            self.deactivate(p);
        }
        self.acc.set_state(self.state.consistent_peers, self.state.aoi_sum);
        if self.state.disseminated_at[b].is_some() {
            self.acc.block_disseminated(arrival, t);
        }
        if consistent {
            self.state.onsets += 1;
            let depth = self.state.dag.max_depth();
            if self.acc.is_active() {
                self.acc.consistency_onset(t, depth);
            } else if self.state.onsets == self.config.warmup_cycles {
                self.acc.start_window(t, depth);
                self.acc.set_state(n, 0);
            }
        }
        Ok(())
    }

    fn invariant(&self, detail: String) -> EngineError {
        EngineError::Invariant {
            time: self.state.time,
            detail,
        }
    }

    /// Brute-force check that `b` is the least block `p` has and `q` lacks.
    fn check_lowest(&self, p: PeerId, q: PeerId, b: BlockId) -> Result<(), EngineError> {
        let (vp, vq) = (&self.state.views[p], &self.state.views[q]);
        let brute = (0..self.state.dag.len()).find(|&x| vp.knows(x) && !vq.knows(x));
        if brute != Some(b) {
            return Err(self.invariant(format!("transfer {p}->{q} moved {b}, lowest missing is {brute:?}")));
        }
        Ok(())
    }

    fn check_arrival(&self, b: BlockId) -> Result<(), EngineError> {
        let st = &self.state;
        let n = st.peer_count();
        for &r in st.dag.out_refs(b) {
            if st.dag.in_refs(r).len() > n {
                return Err(self.invariant(format!("block {r} has in-degree above {n}")));
            }
        }
        if !st.dag.all_maximal_paths_end_at_genesis() {
            return Err(self.invariant("a maximal path does not end at genesis".into()));
        }
        Ok(())
    }

    fn check_invariants(&self) -> Result<(), EngineError> {
        let st = &self.state;
        let total = st.dag.len();
        let mut consistent = 0;
        let mut aoi = 0u64;
        for v in &st.views {
            v.check_closure(&st.dag)
                .map_err(|e| self.invariant(format!("reference closure: {e}")))?;
            let full = (0..total).all(|b| v.knows(b));
            if full != (v.len() == total) || v.known().count() != v.len() {
                return Err(self.invariant(format!("cardinality shortcut unsound for peer {}", v.peer())));
            }
            consistent += usize::from(full);
            aoi += (total - v.len()) as u64;
        }
        if consistent != st.consistent_peers {
            return Err(self.invariant(format!(
                "consistent-peer count {} but {consistent} peers hold every block",
                st.consistent_peers
            )));
        }
        if aoi != st.aoi_sum {
            return Err(self.invariant(format!("aoi sum {} but views say {aoi}", st.aoi_sum)));
        }
        Ok(())
    }
}

fn clearing_config(graph: &Arc<PeerGraph>, arrivals: ArrivalSource, comm: CommMode, blocks: usize, seed: u64) -> SimConfig {
    SimConfig {
        master_seed: seed,
        ..SimConfig::new(graph.clone(), arrivals, comm, StopCondition::Blocks(blocks as u64))
    }
}

fn cleared(out: &RunOutput) -> Option<f64> {
    out.state.is_consistent().then_some(out.state.time)
}

/// Maximal dater: the time at which every peer holds all blocks of `batch`,
/// which are present at their peers at time 0. `None` when a replay
/// schedule runs out first.
pub fn clearing_time(graph: &Arc<PeerGraph>, comm: &CommMode, batch: &[PeerId], seed: u64) -> Result<Option<f64>, EngineError> {
    if batch.is_empty() {
        return Ok(Some(0.0));
    }
    let config = clearing_config(graph, ArrivalSource::Batch(batch.to_vec()), comm.clone(), batch.len(), seed);
    Ok(cleared(&run_detailed(&config, &mut NoObserver)?))
}

/// Clearing time of the system fed only the given arrivals, starting from
/// the genesis-only state. `None` when the schedule runs out first.
pub fn clearing_time_with_arrivals(
    graph: &Arc<PeerGraph>,
    schedule: &ReplaySchedule,
    arrivals: &[(f64, PeerId)],
) -> Result<Option<f64>, EngineError> {
    if arrivals.is_empty() {
        return Ok(Some(0.0));
    }
    let config = clearing_config(
        graph,
        ArrivalSource::Deterministic(arrivals.to_vec()),
        CommMode::Replay(schedule.clone()),
        arrivals.len(),
        0,
    );
    Ok(cleared(&run_detailed(&config, &mut NoObserver)?))
}

/// Time for one block placed at `origin` at time 0 to reach every peer.
pub fn single_block_spread_time(
    graph: &Arc<PeerGraph>,
    comm: &CommMode,
    origin: PeerId,
    seed: u64,
) -> Result<Option<f64>, EngineError> {
    clearing_time(graph, comm, &[origin], seed)
}

/// Full-dissemination times of `replications` independent single blocks,
/// each starting at a uniformly chosen peer.
pub fn simulate_single_block_spread(
    graph: &Arc<PeerGraph>,
    comm: &CommMode,
    replications: usize,
    seed: u64,
) -> Result<Vec<f64>, EngineError> {
    if replications == 0 {
        return Err(config_err("replications", "must be at least 1"));
    }
    let n = graph.peer_count();
    (0..replications)
        .into_par_iter()
        .map(|r| {
            let s = rng::replication_seed(seed, r as u64);
            let origin = rng::stream(s, rng::BATCH, 0).random_range(0..n);
            single_block_spread_time(graph, comm, origin, s)?
                .ok_or_else(|| config_err("comm", "replay schedule ended before the block reached every peer"))
        })
        .collect()
}

/// Runs `replications` copies of `config` with derived seeds, in parallel,
/// returning reports in replication order.
pub fn run_replications(config: &SimConfig, replications: usize) -> Result<Vec<SimReport>, EngineError> {
    if replications == 0 {
        return Err(config_err("replications", "must be at least 1"));
    }
    config.validate()?;
    (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut c = config.clone();
            c.master_seed = rng::replication_seed(config.master_seed, r as u64);
            run(&c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Arrival {
        time: f64,
        block: BlockId,
        peer: PeerId,
        refs: Vec<BlockId>,
    },
    Transfer {
        time: f64,
        block: BlockId,
        from: PeerId,
        to: PeerId,
    },
    Idle {
        time: f64,
        from: PeerId,
        to: PeerId,
    },
    Consistent {
        time: f64,
    },
    Inconsistent {
        time: f64,
    },
}

impl std::fmt::Display for TranscriptEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TranscriptEntry::Arrival { time, block, peer, refs } => {
                write!(f, "t={time} arrival block {block} at peer {peer} refs {refs:?}")
            }
            TranscriptEntry::Transfer { time, block, from, to } => {
                write!(f, "t={time} transfer block {block} {from}->{to}")
            }
            TranscriptEntry::Idle { time, from, to } => write!(f, "t={time} epoch {from}->{to} no-op"),
            TranscriptEntry::Consistent { time } => write!(f, "t={time} consistent"),
            TranscriptEntry::Inconsistent { time } => write!(f, "t={time} inconsistent"),
        }
    }
}

/// Records every event for replay debugging.
#[derive(Debug, Clone, Default)]
pub struct TranscriptRecorder {
    pub entries: Vec<TranscriptEntry>,
}

impl Observer for TranscriptRecorder {
    fn on_arrival(&mut self, state: &SimState, block: BlockId) {
        let b = &state.dag().blocks()[block];
        self.entries.push(TranscriptEntry::Arrival {
            time: state.time(),
            block,
            peer: b.miner.unwrap_or_default(),
            refs: b.out_refs().to_vec(),
        });
    }

    fn on_epoch(&mut self, state: &SimState, from: PeerId, to: PeerId, block: Option<BlockId>) {
        let time = state.time();
        self.entries.push(match block {
            Some(block) => TranscriptEntry::Transfer { time, block, from, to },
            None => TranscriptEntry::Idle { time, from, to },
        });
    }

    fn on_consistency(&mut self, state: &SimState) {
        self.entries.push(TranscriptEntry::Consistent { time: state.time() });
    }

    fn on_inconsistency(&mut self, state: &SimState) {
        self.entries.push(TranscriptEntry::Inconsistent { time: state.time() });
    }
}

/// One row per event: `time,consistent_peers,total_blocks,aoi_sum`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesRow {
    pub time: f64,
    pub consistent_peers: usize,
    pub total_blocks: usize,
    pub aoi_sum: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TimeSeriesRecorder {
    pub rows: Vec<TimeSeriesRow>,
}

impl Observer for TimeSeriesRecorder {
    fn after_event(&mut self, state: &SimState) {
        self.rows.push(TimeSeriesRow {
            time: state.time(),
            consistent_peers: state.consistent_peers(),
            total_blocks: state.total_blocks(),
            aoi_sum: state.aoi_sum(),
        });
    }
}

/// Fans hooks out to two observers.
pub struct Tee<'a>(pub &'a mut dyn Observer, pub &'a mut dyn Observer);

impl Observer for Tee<'_> {
    fn on_arrival(&mut self, s: &SimState, b: BlockId) {
        self.0.on_arrival(s, b);
        self.1.on_arrival(s, b);
    }
    fn on_epoch(&mut self, s: &SimState, from: PeerId, to: PeerId, b: Option<BlockId>) {
        self.0.on_epoch(s, from, to, b);
        self.1.on_epoch(s, from, to, b);
    }
    fn on_consistency(&mut self, s: &SimState) {
        self.0.on_consistency(s);
        self.1.on_consistency(s);
    }
    fn on_inconsistency(&mut self, s: &SimState) {
        self.0.on_inconsistency(s);
        self.1.on_inconsistency(s);
    }
    fn after_event(&mut self, s: &SimState) {
        self.0.after_event(s);
        self.1.after_event(s);
    }
}

/// The two-peer scenario of the worked example: arrivals at 1.1 and 2.4 on
/// peer 0 and at 4.0 and 6.2 on peer 1, with hand-placed epochs.
pub fn two_peer_replay() -> ReplayInput {
    let mut schedule = ReplaySchedule::new(2);
    schedule.push(0, 2.6, 1);
    schedule.push(0, 5.2, 1);
    schedule.push(1, 5.8, 0);
    schedule.push(1, 6.9, 0);
    ReplayInput {
        arrivals: vec![(1.1, 0), (2.4, 0), (4.0, 1), (6.2, 1)],
        schedule,
    }
}
