//! Peer-to-peer topologies, cut conductance and stability bounds.
//!
//! The conductance of a cut `S` is the degree-normalised crossing rate
//!
//! ```text
//! phi(S) = sum_{p in S, q in S^C} 1_{pq} / d(p)  /  (|S| |S^C| / N)
//! ```
//!
//! which is asymmetric in `S`. Parallel links count with multiplicity and
//! self-loops add 2 to the degree but never cross a cut.

use std::cmp::Ordering;
use std::collections::{HashSet, VecDeque};
use std::fmt::Write as _;

use num::{BigInt, BigRational, One, ToPrimitive, Zero};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub type PeerId = usize;

/// Largest peer count for which all `2^N - 2` cuts are enumerated.
pub const EXACT_CUT_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("invalid topology parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("invalid cut: {0}")]
    InvalidCut(String),
    #[error(
        "exact cut enumeration supports at most {limit} peers, graph has {n}; \
         use heuristic mode (singleton, sweep and structural cuts) instead"
    )]
    TooLarge { n: usize, limit: usize },
    #[error("graph is disconnected")]
    Disconnected,
    #[error("edge list line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("random regular generation failed after {attempts} restarts")]
    GenerationFailed { attempts: usize },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> GraphError {
    GraphError::InvalidParameter {
        field,
        reason: reason.into(),
    }
}

/// Topology descriptor, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Topology {
    Complete { n: usize },
    Star { n: usize },
    /// `dim`-dimensional torus of side `floor(n^(1/dim))`, linking peers at
    /// wrap-around L1 grid distance at most `k`.
    Torus { n: usize, dim: u32, k: usize },
    /// Complete `branching`-ary tree with `depth` layers below the root.
    Btree { branching: usize, depth: u32 },
    ErdosRenyi { n: usize, p: f64 },
    RandomRegular { n: usize, d: usize },
    PrefAttach { n: usize, d: usize },
    /// Unit-square geometric graph with radius `c * sqrt(ln n / n)`.
    Geometric { n: usize, c: f64 },
}

impl Topology {
    pub fn family(&self) -> &'static str {
        match self {
            Topology::Complete { .. } => "complete",
            Topology::Star { .. } => "star",
            Topology::Torus { .. } => "torus",
            Topology::Btree { .. } => "btree",
            Topology::ErdosRenyi { .. } => "erdos_renyi",
            Topology::RandomRegular { .. } => "random_regular",
            Topology::PrefAttach { .. } => "pref_attach",
            Topology::Geometric { .. } => "geometric",
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let need_n = |n: usize| {
            if n < 2 {
                Err(invalid("n", format!("need at least 2 peers, got {n}")))
            } else {
                Ok(())
            }
        };
        match *self {
            Topology::Complete { n } | Topology::Star { n } => need_n(n),
            Topology::Torus { n, dim, k } => {
                need_n(n)?;
                if dim == 0 {
                    return Err(invalid("dim", "dimension must be at least 1"));
                }
                if k == 0 {
                    return Err(invalid("k", "grid distance must be at least 1"));
                }
                if integer_root(n, dim) < 2 {
                    return Err(invalid(
                        "n",
                        format!("floor(n^(1/{dim})) must be at least 2, got n = {n}"),
                    ));
                }
                Ok(())
            }
            Topology::Btree { branching, depth } => {
                if branching < 2 {
                    return Err(invalid("branching", format!("need b >= 2, got {branching}")));
                }
                if depth == 0 {
                    return Err(invalid("depth", "need depth >= 1"));
                }
                tree_size(branching, depth)
                    .ok_or_else(|| invalid("depth", "tree size overflows"))?;
                Ok(())
            }
            Topology::ErdosRenyi { n, p } => {
                need_n(n)?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(invalid("p", format!("edge probability must lie in (0, 1], got {p}")));
                }
                Ok(())
            }
            Topology::RandomRegular { n, d } => {
                need_n(n)?;
                if d == 0 || d >= n {
                    return Err(invalid("d", format!("degree must satisfy 1 <= d < n, got d = {d}, n = {n}")));
                }
                if (n * d) % 2 == 1 {
                    return Err(invalid("d", format!("d * n must be even, got d = {d}, n = {n}")));
                }
                Ok(())
            }
            Topology::PrefAttach { n, d } => {
                need_n(n)?;
                if d == 0 {
                    return Err(invalid("d", "need d >= 1"));
                }
                Ok(())
            }
            Topology::Geometric { n, c } => {
                need_n(n)?;
                if !(c > 0.0 && c.is_finite()) {
                    return Err(invalid("c", format!("radius constant must be positive, got {c}")));
                }
                Ok(())
            }
        }
    }
}

/// Layout information kept for structural heuristic cuts.
#[derive(Debug, Clone, PartialEq)]
enum Structure {
    None,
    Tree { branching: usize },
    Torus { side: usize, dim: u32 },
}

#[derive(Debug, Clone, PartialEq)]
enum Adjacency {
    /// Implicit complete graph; avoids materialising `N^2` links.
    Complete,
    Lists {
        links: Vec<(PeerId, PeerId)>,
        /// Link endpoints per peer, repeated with multiplicity. A self-loop
        /// appears twice in its own list.
        neighbors: Vec<Vec<PeerId>>,
    },
}

/// Undirected (multi)graph of peers.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerGraph {
    peer_count: usize,
    requested_peers: usize,
    family: String,
    adjacency: Adjacency,
    degree: Vec<usize>,
    connected: bool,
    simple: bool,
    structure: Structure,
}

impl PeerGraph {
    pub fn complete(n: usize) -> Result<Self, GraphError> {
        Topology::Complete { n }.validate()?;
        Ok(PeerGraph {
            peer_count: n,
            requested_peers: n,
            family: "complete".into(),
            adjacency: Adjacency::Complete,
            degree: vec![n - 1; n],
            connected: true,
            simple: true,
            structure: Structure::None,
        })
    }

    /// Builds a graph from an explicit link list. Self-loops and parallel
    /// links are accepted; every peer must have at least one link.
    pub fn from_links(
        n: usize,
        links: Vec<(PeerId, PeerId)>,
        family: impl Into<String>,
    ) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(invalid("n", format!("need at least 2 peers, got {n}")));
        }
        let mut neighbors = vec![Vec::new(); n];
        let mut seen = HashSet::with_capacity(links.len());
        let mut simple = true;
        for &(u, v) in &links {
            if u >= n || v >= n {
                return Err(invalid("links", format!("link ({u}, {v}) names a peer outside 0..{n}")));
            }
            if u == v || !seen.insert((u.min(v), u.max(v))) {
                simple = false;
            }
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        let degree: Vec<usize> = neighbors.iter().map(Vec::len).collect();
        if let Some(p) = degree.iter().position(|&d| d == 0) {
            return Err(invalid("links", format!("peer {p} has no links")));
        }
        let mut graph = PeerGraph {
            peer_count: n,
            requested_peers: n,
            family: family.into(),
            adjacency: Adjacency::Lists { links, neighbors },
            degree,
            connected: false,
            simple,
            structure: Structure::None,
        };
        graph.connected = graph.reachable_from(0).iter().all(|&r| r);
        Ok(graph)
    }

    pub fn peer_count(&self) -> usize {
        self.peer_count
    }

    /// Peer count the generator was asked for; differs from `peer_count`
    /// when only the largest component was kept.
    pub fn requested_peers(&self) -> usize {
        self.requested_peers
    }

    pub fn family(&self) -> &str {
        &self.family
    }

    pub fn degree(&self, p: PeerId) -> usize {
        self.degree[p]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degree
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    /// True when there are no self-loops and no parallel links.
    pub fn is_simple(&self) -> bool {
        self.simple
    }

    pub fn link_count(&self) -> usize {
        match &self.adjacency {
            Adjacency::Complete => self.peer_count * (self.peer_count - 1) / 2,
            Adjacency::Lists { links, .. } => links.len(),
        }
    }

    pub fn links(&self) -> Vec<(PeerId, PeerId)> {
        match &self.adjacency {
            Adjacency::Complete => {
                let n = self.peer_count;
                (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect()
            }
            Adjacency::Lists { links, .. } => links.clone(),
        }
    }

    /// The `i`-th link endpoint of `p`, for `i < degree(p)`.
    #[inline]
    pub fn neighbor_at(&self, p: PeerId, i: usize) -> PeerId {
        match &self.adjacency {
            Adjacency::Complete => {
                if i < p {
                    i
                } else {
                    i + 1
                }
            }
            Adjacency::Lists { neighbors, .. } => neighbors[p][i],
        }
    }

    pub fn neighbors(&self, p: PeerId) -> impl Iterator<Item = PeerId> + '_ {
        (0..self.degree[p]).map(move |i| self.neighbor_at(p, i))
    }

    pub fn is_neighbor(&self, p: PeerId, q: PeerId) -> bool {
        if p >= self.peer_count || q >= self.peer_count {
            return false;
        }
        match &self.adjacency {
            Adjacency::Complete => p != q,
            Adjacency::Lists { neighbors, .. } => neighbors[p].contains(&q),
        }
    }

    fn reachable_from(&self, start: PeerId) -> Vec<bool> {
        let mut seen = vec![false; self.peer_count];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    /// Edge-list text: `N <count>` then one `u v` line per link.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("N {}\n", self.peer_count);
        for (u, v) in self.links() {
            let _ = writeln!(out, "{u} {v}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (line, header) = lines.next().ok_or(GraphError::Parse {
            line: 1,
            reason: "missing `N <count>` header".into(),
        })?;
        let n = header
            .strip_prefix("N ")
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| GraphError::Parse {
                line,
                reason: format!("expected `N <count>`, found `{header}`"),
            })?;
        let mut links = Vec::new();
        for (line, l) in lines {
            let mut it = l.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(u)), Some(Ok(v)), None) => links.push((u, v)),
                _ => {
                    return Err(GraphError::Parse {
                        line,
                        reason: format!("expected `u v`, found `{l}`"),
                    })
                }
            }
        }
        PeerGraph::from_links(n, links, "custom")
    }

    /// Distinct neighbours of `p` (self excluded) with link multiplicities.
    fn weighted_neighbors(&self, p: PeerId) -> Vec<(PeerId, usize)> {
        let mut nb: Vec<PeerId> = self.neighbors(p).filter(|&q| q != p).collect();
        nb.sort_unstable();
        let mut out: Vec<(PeerId, usize)> = Vec::with_capacity(nb.len());
        for q in nb {
            match out.last_mut() {
                Some((last, m)) if *last == q => *m += 1,
                _ => out.push((q, 1)),
            }
        }
        out
    }
}

fn integer_root(n: usize, dim: u32) -> usize {
    let mut s = (n as f64).powf(1.0 / dim as f64).round() as usize + 1;
    while s > 0 && s.checked_pow(dim).is_none_or(|v| v > n) {
        s -= 1;
    }
    s
}

fn tree_size(branching: usize, depth: u32) -> Option<usize> {
    let mut total: usize = 0;
    let mut layer: usize = 1;
    for _ in 0..=depth {
        total = total.checked_add(layer)?;
        layer = layer.checked_mul(branching)?;
    }
    Some(total)
}

/// Generates the described topology. Random families are deterministic in
/// `(topology, seed)`.
pub fn generate(topology: &Topology, seed: u64) -> Result<PeerGraph, GraphError> {
    topology.validate()?;
    let mut rng = rng::stream(seed, rng::TOPOLOGY, 0);
    let graph = match *topology {
        Topology::Complete { n } => return PeerGraph::complete(n),
        Topology::Star { n } => PeerGraph::from_links(n, (1..n).map(|v| (0, v)).collect(), "star")?,
        Topology::Torus { n, dim, k } => {
            let side = integer_root(n, dim);
            let count = side.pow(dim);
            let coords = |mut v: usize| {
                let mut c = Vec::with_capacity(dim as usize);
                for _ in 0..dim {
                    c.push(v % side);
                    v /= side;
                }
                c
            };
            let all: Vec<Vec<usize>> = (0..count).map(coords).collect();
            let mut links = Vec::new();
            for u in 0..count {
                for v in u + 1..count {
                    let dist: usize = all[u]
                        .iter()
                        .zip(&all[v])
                        .map(|(&a, &b)| {
                            let d = a.abs_diff(b);
                            d.min(side - d)
                        })
                        .sum();
                    if dist <= k {
                        links.push((u, v));
                    }
                }
            }
            let mut g = PeerGraph::from_links(count, links, "torus")?;
            g.requested_peers = n;
            g.structure = Structure::Torus { side, dim };
            g
        }
        Topology::Btree { branching, depth } => {
            let count = tree_size(branching, depth).expect("validated");
            let links = (1..count).map(|v| ((v - 1) / branching, v)).collect();
            let mut g = PeerGraph::from_links(count, links, "btree")?;
            g.structure = Structure::Tree { branching };
            g
        }
        Topology::ErdosRenyi { n, p } => {
            let mut links = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random_bool(p) {
                        links.push((u, v));
                    }
                }
            }
            largest_component(n, &links, "erdos_renyi")?
        }
        Topology::RandomRegular { n, d } => {
            PeerGraph::from_links(n, random_regular_links(n, d, &mut rng)?, "random_regular")?
        }
        Topology::PrefAttach { n, d } => {
            // Degree-proportional tree on d*n + 1 vertices, then consecutive
            // groups of d tree vertices are merged into one peer.
            let size = d * n + 1;
            let mut endpoints: Vec<usize> = Vec::with_capacity(2 * size);
            let mut tree_links = vec![(0usize, 0usize)];
            endpoints.extend([0, 0]);
            for j in 1..size {
                let target = endpoints[rng.random_range(0..endpoints.len())];
                tree_links.push((j, target));
                endpoints.extend([j, target]);
            }
            let group = |j: usize| if j == 0 { 0 } else { (j - 1) / d };
            let links = tree_links
                .into_iter()
                .map(|(a, b)| (group(a), group(b)))
                .collect();
            PeerGraph::from_links(n, links, "pref_attach")?
        }
        Topology::Geometric { n, c } => {
            let radius = c * ((n as f64).ln() / n as f64).sqrt();
            let points: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
            let mut links = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    let (dx, dy) = (points[u].0 - points[v].0, points[u].1 - points[v].1);
                    if (dx * dx + dy * dy).sqrt() < radius {
                        links.push((u, v));
                    }
                }
            }
            largest_component(n, &links, "geometric")?
        }
    };
    Ok(graph)
}

fn largest_component(
    n: usize,
    links: &[(PeerId, PeerId)],
    family: &str,
) -> Result<PeerGraph, GraphError> {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in links {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut label = vec![usize::MAX; n];
    let mut best: (usize, usize) = (0, 0); // (size, component id)
    let mut component = 0;
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        label[start] = component;
        while let Some(u) = queue.pop_front() {
            size += 1;
            for &v in &adj[u] {
                if label[v] == usize::MAX {
                    label[v] = component;
                    queue.push_back(v);
                }
            }
        }
        if size > best.0 {
            best = (size, component);
        }
        component += 1;
    }
    if best.0 < 2 {
        return Err(invalid("n", "largest connected component has fewer than 2 peers"));
    }
    let mut relabel = vec![usize::MAX; n];
    let mut next = 0;
    for v in 0..n {
        if label[v] == best.1 {
            relabel[v] = next;
            next += 1;
        }
    }
    let kept = links
        .iter()
        .filter(|&&(u, _)| label[u] == best.1)
        .map(|&(u, v)| (relabel[u], relabel[v]))
        .collect();
    let mut g = PeerGraph::from_links(best.0, kept, family)?;
    g.requested_peers = n;
    Ok(g)
}

/// Uniform-ish simple d-regular graph by incremental stub pairing that
/// rejects loops and repeated links, restarting when stuck.
fn random_regular_links(
    n: usize,
    d: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(PeerId, PeerId)>, GraphError> {
    const MAX_RESTARTS: usize = 1000;
    'restart: for _ in 0..MAX_RESTARTS {
        let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, d)).collect();
        let mut present: HashSet<(usize, usize)> = HashSet::with_capacity(n * d / 2);
        let mut links = Vec::with_capacity(n * d / 2);
        while !stubs.is_empty() {
            let mut paired = false;
            for _ in 0..64 {
                let i = rng.random_range(0..stubs.len());
                let j = rng.random_range(0..stubs.len());
                let (u, v) = (stubs[i], stubs[j]);
                if i != j && u != v && !present.contains(&(u.min(v), u.max(v))) {
                    present.insert((u.min(v), u.max(v)));
                    links.push((u.min(v), u.max(v)));
                    let (hi, lo) = (i.max(j), i.min(j));
                    stubs.swap_remove(hi);
                    stubs.swap_remove(lo);
                    paired = true;
                    break;
                }
            }
            if paired {
                continue;
            }
            let mut candidates = Vec::new();
            for i in 0..stubs.len() {
                for j in i + 1..stubs.len() {
                    let (u, v) = (stubs[i], stubs[j]);
                    if u != v && !present.contains(&(u.min(v), u.max(v))) {
                        candidates.push((i, j));
                    }
                }
            }
            let Some(&(i, j)) = candidates.choose(rng) else {
                continue 'restart;
            };
            let (u, v) = (stubs[i], stubs[j]);
            present.insert((u.min(v), u.max(v)));
            links.push((u.min(v), u.max(v)));
            stubs.swap_remove(j);
            stubs.swap_remove(i);
        }
        return Ok(links);
    }
    Err(GraphError::GenerationFailed {
        attempts: MAX_RESTARTS,
    })
}

/// A nonempty proper subset `S` of the peers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cut {
    members: Vec<PeerId>,
    peer_count: usize,
}

impl Cut {
    pub fn new(members: impl IntoIterator<Item = PeerId>, peer_count: usize) -> Result<Self, GraphError> {
        let mut members: Vec<PeerId> = members.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        if let Some(&p) = members.iter().find(|&&p| p >= peer_count) {
            return Err(GraphError::InvalidCut(format!("peer {p} outside 0..{peer_count}")));
        }
        if members.is_empty() || members.len() >= peer_count {
            return Err(GraphError::InvalidCut(format!(
                "cut must be a nonempty proper subset, has {} of {peer_count} peers",
                members.len()
            )));
        }
        Ok(Cut { members, peer_count })
    }

    /// The cut whose complement `S^C` is exactly `complement`.
    pub fn with_complement(
        complement: impl IntoIterator<Item = PeerId>,
        peer_count: usize,
    ) -> Result<Self, GraphError> {
        let mut out = vec![false; peer_count];
        for p in complement {
            if p >= peer_count {
                return Err(GraphError::InvalidCut(format!("peer {p} outside 0..{peer_count}")));
            }
            out[p] = true;
        }
        Cut::new((0..peer_count).filter(|&p| !out[p]), peer_count)
    }

    fn from_mask(mask: u32, peer_count: usize) -> Self {
        Cut {
            members: (0..peer_count).filter(|&p| mask >> p & 1 == 1).collect(),
            peer_count,
        }
    }

    pub fn members(&self) -> &[PeerId] {
        &self.members
    }

    pub fn complement(&self) -> Vec<PeerId> {
        let mask = self.mask();
        (0..self.peer_count).filter(|&p| !mask[p]).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn peer_count(&self) -> usize {
        self.peer_count
    }

    fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.peer_count];
        for &p in &self.members {
            m[p] = true;
        }
        m
    }
}

/// Exact conductance of `cut`.
pub fn cut_conductance(graph: &PeerGraph, cut: &Cut) -> Result<BigRational, GraphError> {
    let n = graph.peer_count();
    if cut.peer_count != n {
        return Err(GraphError::InvalidCut(format!(
            "cut is over {} peers, graph has {n}",
            cut.peer_count
        )));
    }
    let in_s = cut.mask();
    let mut numerator = BigRational::zero();
    for &p in &cut.members {
        let crossing = graph.neighbors(p).filter(|&q| !in_s[q]).count();
        if crossing > 0 {
            numerator += BigRational::new(BigInt::from(crossing), BigInt::from(graph.degree(p)));
        }
    }
    let s = cut.len();
    Ok(numerator * BigRational::new(BigInt::from(n), BigInt::from(s * (n - s))))
}

/// A minimum over cuts, with the (lexicographically least) cut attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct CutMinimum {
    pub value: BigRational,
    pub argmin: Cut,
}

/// Both minima found by one exhaustive pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactCutAnalysis {
    /// `phi_H = min_S phi(S)`.
    pub conductance: CutMinimum,
    /// `min_S |S^C| phi(S)`, the bottleneck term of the upper stability bound.
    pub bottleneck: CutMinimum,
}

pub fn graph_conductance_exact(graph: &PeerGraph) -> Result<CutMinimum, GraphError> {
    Ok(exact_cut_analysis(graph)?.conductance)
}

fn lex_less(a: u32, b: u32) -> bool {
    // Compare member lists in ascending order; a proper prefix is smaller.
    let (mut a, mut b) = (a, b);
    loop {
        match (a == 0, b == 0) {
            (true, true) => return false,
            (true, false) => return true,
            (false, true) => return false,
            _ => {}
        }
        let (ta, tb) = (a.trailing_zeros(), b.trailing_zeros());
        if ta != tb {
            return ta < tb;
        }
        a &= a - 1;
        b &= b - 1;
    }
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Enumerates all `2^N - 2` cuts with exact integer arithmetic.
pub fn exact_cut_analysis(graph: &PeerGraph) -> Result<ExactCutAnalysis, GraphError> {
    let n = graph.peer_count();
    if n > EXACT_CUT_LIMIT {
        return Err(GraphError::TooLarge {
            n,
            limit: EXACT_CUT_LIMIT,
        });
    }
    // Common denominator of 1/d(p).
    let mut lcm: u128 = 1;
    for &d in graph.degrees() {
        let d = d as u128;
        lcm = lcm / gcd(lcm, d) * d;
        if lcm > u64::MAX as u128 {
            return Ok(exact_cut_analysis_big(graph));
        }
    }
    let weight: Vec<u128> = graph.degrees().iter().map(|&d| lcm / d as u128).collect();
    let nbrs: Vec<Vec<(PeerId, usize)>> = (0..n).map(|p| graph.weighted_neighbors(p)).collect();
    let simple_masks: Option<Vec<u32>> = graph.is_simple().then(|| {
        nbrs.iter()
            .map(|list| list.iter().fold(0u32, |m, &(q, _)| m | 1 << q))
            .collect()
    });
    let full: u32 = if n == 32 { u32::MAX } else { (1u32 << n) - 1 };

    // Best (W, |S|, mask) for each objective.
    let mut best_phi: Option<(u128, u128, u32)> = None;
    let mut best_neck: Option<(u128, u128, u32)> = None;
    for mask in 1..full {
        let outside = !mask & full;
        let mut w: u128 = 0;
        let mut rest = mask;
        while rest != 0 {
            let p = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            let crossing = match &simple_masks {
                Some(m) => (m[p] & outside).count_ones() as u128,
                None => nbrs[p]
                    .iter()
                    .filter(|&&(q, _)| outside >> q & 1 == 1)
                    .map(|&(_, k)| k as u128)
                    .sum(),
            };
            w += weight[p] * crossing;
        }
        let s = mask.count_ones() as u128;
        let n128 = n as u128;
        // phi(S) ~ W / (s (n - s)); compare by cross-multiplication.
        let phi_den = s * (n128 - s);
        match best_phi {
            Some((bw, bden, bmask)) => {
                let ord = (w * bden).cmp(&(bw * phi_den));
                if ord == Ordering::Less || (ord == Ordering::Equal && lex_less(mask, bmask)) {
                    best_phi = Some((w, phi_den, mask));
                }
            }
            None => best_phi = Some((w, phi_den, mask)),
        }
        // |S^C| phi(S) ~ W / s.
        match best_neck {
            Some((bw, bs, bmask)) => {
                let ord = (w * bs).cmp(&(bw * s));
                if ord == Ordering::Less || (ord == Ordering::Equal && lex_less(mask, bmask)) {
                    best_neck = Some((w, s, mask));
                }
            }
            None => best_neck = Some((w, s, mask)),
        }
    }
    let (pw, pden, pmask) = best_phi.expect("n >= 2 gives at least one cut");
    let (nw, ns, nmask) = best_neck.expect("n >= 2 gives at least one cut");
    let n_big = BigInt::from(n);
    let lcm_big = BigInt::from(lcm);
    Ok(ExactCutAnalysis {
        conductance: CutMinimum {
            value: BigRational::new(BigInt::from(pw) * &n_big, &lcm_big * BigInt::from(pden)),
            argmin: Cut::from_mask(pmask, n),
        },
        bottleneck: CutMinimum {
            value: BigRational::new(BigInt::from(nw) * &n_big, &lcm_big * BigInt::from(ns)),
            argmin: Cut::from_mask(nmask, n),
        },
    })
}

/// Fallback for multigraphs whose degree lcm exceeds 64 bits.
fn exact_cut_analysis_big(graph: &PeerGraph) -> ExactCutAnalysis {
    let n = graph.peer_count();
    let full: u32 = (1u32 << n) - 1;
    let mut best_phi: Option<(BigRational, u32)> = None;
    let mut best_neck: Option<(BigRational, u32)> = None;
    for mask in 1..full {
        let cut = Cut::from_mask(mask, n);
        let phi = cut_conductance(graph, &cut).expect("cut matches graph");
        let neck = &phi * BigRational::from_integer(BigInt::from(n - cut.len()));
        let better = |best: &Option<(BigRational, u32)>, v: &BigRational| match best {
            None => true,
            Some((b, bm)) => v < b || (v == b && lex_less(mask, *bm)),
        };
        if better(&best_phi, &phi) {
            best_phi = Some((phi, mask));
        }
        if better(&best_neck, &neck) {
            best_neck = Some((neck, mask));
        }
    }
    let (pv, pm) = best_phi.expect("nonempty");
    let (nv, nm) = best_neck.expect("nonempty");
    ExactCutAnalysis {
        conductance: CutMinimum {
            value: pv,
            argmin: Cut::from_mask(pm, n),
        },
        bottleneck: CutMinimum {
            value: nv,
            argmin: Cut::from_mask(nm, n),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    Exact,
    Heuristic,
}

/// Bounds on the critical arrival rate, in blocks per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityBounds {
    /// `B phi_H / (2 ln N)`.
    pub lower: f64,
    /// `B min_S |S^C| phi(S)`.
    pub upper: f64,
    pub bandwidth: f64,
    pub conductance: f64,
    pub argmin_cut: Option<Cut>,
    pub mode: BoundMode,
    /// Set in heuristic mode: the minima were taken over a subfamily of cuts,
    /// so `conductance` and `upper` are over-estimates.
    pub estimated: bool,
}

pub fn stability_bounds(
    graph: &PeerGraph,
    bandwidth: f64,
    mode: BoundMode,
) -> Result<StabilityBounds, GraphError> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(invalid("bandwidth", format!("must be positive, got {bandwidth}")));
    }
    if !graph.is_connected() {
        return Err(GraphError::Disconnected);
    }
    let log_n = (graph.peer_count() as f64).ln();
    let (conductance, bottleneck, argmin) = match mode {
        BoundMode::Exact => {
            let exact = exact_cut_analysis(graph)?;
            (
                exact.conductance.value.to_f64().unwrap_or(f64::NAN),
                exact.bottleneck.value.to_f64().unwrap_or(f64::NAN),
                exact.bottleneck.argmin,
            )
        }
        BoundMode::Heuristic => {
            let h = heuristic_cut_analysis(graph);
            (h.conductance, h.bottleneck, h.bottleneck_cut)
        }
    };
    Ok(StabilityBounds {
        lower: bandwidth * conductance / (2.0 * log_n),
        upper: bandwidth * bottleneck,
        bandwidth,
        conductance,
        argmin_cut: Some(argmin),
        mode,
        estimated: mode == BoundMode::Heuristic,
    })
}

/// Minima over the heuristic cut family.
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicCutAnalysis {
    pub conductance: f64,
    pub bottleneck: f64,
    pub bottleneck_cut: Cut,
    pub cuts_evaluated: usize,
}

struct FamilyMin {
    n: usize,
    phi: f64,
    neck: f64,
    neck_side: Vec<PeerId>,
    neck_side_is_member: bool,
    evaluated: usize,
}

impl FamilyMin {
    /// `w` is the crossing numerator, `s` the size of `S`.
    fn offer(&mut self, w: f64, s: usize, side: impl FnOnce() -> (Vec<PeerId>, bool)) {
        if s == 0 || s >= self.n {
            return;
        }
        self.evaluated += 1;
        let n = self.n as f64;
        let phi = w * n / (s as f64 * (self.n - s) as f64);
        let neck = w * n / s as f64;
        self.phi = self.phi.min(phi);
        if neck < self.neck {
            self.neck = neck;
            let (side, is_member) = side();
            self.neck_side = side;
            self.neck_side_is_member = is_member;
        }
    }
}

/// Evaluates the documented heuristic cut family: every singleton in both
/// orientations, prefix sweeps in ascending-degree order and in BFS order
/// from a minimum-degree peer, all subtree cuts of trees and the half-space
/// cuts of tori. When `N <= 20` the exact bottleneck cut is added, which
/// makes the result exact.
pub fn heuristic_cut_analysis(graph: &PeerGraph) -> HeuristicCutAnalysis {
    let n = graph.peer_count();
    let inv_deg: Vec<f64> = graph.degrees().iter().map(|&d| 1.0 / d as f64).collect();
    let mut fam = FamilyMin {
        n,
        phi: f64::INFINITY,
        neck: f64::INFINITY,
        neck_side: Vec::new(),
        neck_side_is_member: true,
        evaluated: 0,
    };

    for v in 0..n {
        // S^C = {v}
        let w: f64 = graph.neighbors(v).filter(|&p| p != v).map(|p| inv_deg[p]).sum();
        fam.offer(w, n - 1, || (vec![v], false));
        // S = {v}
        let crossing = graph.neighbors(v).filter(|&p| p != v).count();
        fam.offer(crossing as f64 * inv_deg[v], 1, || (vec![v], true));
    }

    let mut by_degree: Vec<PeerId> = (0..n).collect();
    by_degree.sort_by_key(|&p| (graph.degree(p), p));
    sweep(graph, &inv_deg, &by_degree, &mut fam);

    let start = by_degree[0];
    let mut bfs = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(u) = queue.pop_front() {
        bfs.push(u);
        for v in graph.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if bfs.len() == n {
        sweep(graph, &inv_deg, &bfs, &mut fam);
    }

    match graph.structure {
        Structure::Tree { branching } => {
            for root in 1..n {
                let mut side = vec![root];
                let mut i = 0;
                while i < side.len() {
                    let v = side[i];
                    side.extend((1..=branching).map(|c| v * branching + c).filter(|&c| c < n));
                    i += 1;
                }
                offer_side(graph, &inv_deg, side, &mut fam);
            }
        }
        Structure::Torus { side, dim } => {
            for axis in 0..dim {
                let stride = side.pow(axis);
                let half: Vec<PeerId> = (0..n).filter(|&v| (v / stride) % side < side / 2).collect();
                offer_side(graph, &inv_deg, half, &mut fam);
            }
        }
        Structure::None => {}
    }

    if n <= EXACT_CUT_LIMIT {
        if let Ok(exact) = exact_cut_analysis(graph) {
            let cut = exact.bottleneck.argmin;
            let side = cut.members().to_vec();
            offer_side(graph, &inv_deg, side, &mut fam);
            let phi_cut = exact.conductance.argmin;
            offer_side(graph, &inv_deg, phi_cut.members().to_vec(), &mut fam);
        }
    }

    let bottleneck_cut = if fam.neck_side_is_member {
        Cut::new(fam.neck_side.iter().copied(), n)
    } else {
        Cut::with_complement(fam.neck_side.iter().copied(), n)
    }
    .expect("family cuts are proper");
    HeuristicCutAnalysis {
        conductance: fam.phi,
        bottleneck: fam.neck,
        bottleneck_cut,
        cuts_evaluated: fam.evaluated,
    }
}

/// Offers the cut with `S = side` and the one with `S^C = side`.
fn offer_side(graph: &PeerGraph, inv_deg: &[f64], side: Vec<PeerId>, fam: &mut FamilyMin) {
    let n = graph.peer_count();
    let mut member = vec![false; n];
    for &v in &side {
        member[v] = true;
    }
    let mut out_w = 0.0; // S = side
    let mut in_w = 0.0; // S^C = side
    for &q in &side {
        for p in graph.neighbors(q) {
            if !member[p] {
                out_w += inv_deg[q];
                in_w += inv_deg[p];
            }
        }
    }
    let k = side.len();
    fam.offer(in_w, n - k, || (side.clone(), false));
    fam.offer(out_w, k, || (side, true));
}

/// Prefix cuts of `order`, in both orientations, with incremental updates.
fn sweep(graph: &PeerGraph, inv_deg: &[f64], order: &[PeerId], fam: &mut FamilyMin) {
    let n = graph.peer_count();
    let mut in_prefix = vec![false; n];
    // into_prefix: sum over p outside, q inside; out_of_prefix: p inside, q outside.
    let mut into_prefix = 0.0;
    let mut out_of_prefix = 0.0;
    for (k, &v) in order.iter().enumerate().take(n - 1) {
        for u in graph.neighbors(v) {
            if u == v {
                continue;
            }
            if in_prefix[u] {
                into_prefix -= inv_deg[v];
                out_of_prefix -= inv_deg[u];
            } else {
                into_prefix += inv_deg[u];
                out_of_prefix += inv_deg[v];
            }
        }
        in_prefix[v] = true;
        let size = k + 1;
        fam.offer(into_prefix.max(0.0), n - size, || (order[..size].to_vec(), false));
        fam.offer(out_of_prefix.max(0.0), size, || (order[..size].to_vec(), true));
    }
}

/// Caps implied by singleton cuts on any `N`-peer network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCap {
    /// `N / (N - 1)` blocks per second.
    pub global: f64,
    /// `1 / (N - 1)` blocks per second per peer.
    pub per_peer: f64,
}

pub fn per_peer_rate_cap(peer_count: usize) -> Result<RateCap, GraphError> {
    if peer_count < 2 {
        return Err(invalid("n", format!("need at least 2 peers, got {peer_count}")));
    }
    let n = peer_count as f64;
    Ok(RateCap {
        global: n / (n - 1.0),
        per_peer: 1.0 / (n - 1.0),
    })
}

/// The root-side cut of a `b`-ary tree: the root and every subtree except
/// that of the root's first child.
pub fn tree_root_cut(branching: usize, depth: u32) -> Result<Cut, GraphError> {
    Topology::Btree { branching, depth }.validate()?;
    let n = tree_size(branching, depth).expect("validated");
    let mut excluded = vec![1usize];
    let mut i = 0;
    while i < excluded.len() {
        let v = excluded[i];
        excluded.extend((1..=branching).map(|c| v * branching + c).filter(|&c| c < n));
        i += 1;
    }
    Cut::with_complement(excluded, n)
}

/// Closed form for the conductance of [`tree_root_cut`]:
/// `(1/b) / ((1/N) (1 + (b-1)/b (N-1)) ((N-1)/b))`.
pub fn tree_cut_conductance(branching: usize, depth: u32) -> Result<BigRational, GraphError> {
    Topology::Btree { branching, depth }.validate()?;
    let n = BigInt::from(tree_size(branching, depth).expect("validated"));
    let b = BigInt::from(branching);
    let one = BigRational::one();
    let r = |x: &BigInt| BigRational::from_integer(x.clone());
    let n_minus_1 = r(&n) - &one;
    let inside = &one + (r(&b) - &one) / r(&b) * &n_minus_1;
    let outside = &n_minus_1 / r(&b);
    Ok((&one / r(&b)) / (inside * outside / r(&n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ratio(a: i64, b: i64) -> BigRational {
        BigRational::new(BigInt::from(a), BigInt::from(b))
    }

    #[test]
    fn complete_four() {
        let g = generate(&Topology::Complete { n: 4 }, 9).unwrap();
        assert_eq!(g.link_count(), 6);
        assert!(g.degrees().iter().all(|&d| d == 3));
    }

    #[test]
    fn star_seven() {
        let g = generate(&Topology::Star { n: 7 }, 0).unwrap();
        assert_eq!(g.degree(0), 6);
        assert_eq!((1..7).filter(|&p| g.degree(p) == 1).count(), 6);
    }

    #[test]
    fn torus_six_k2_is_cycle_power() {
        let g = generate(&Topology::Torus { n: 6, dim: 1, k: 2 }, 0).unwrap();
        assert_eq!(g.link_count(), 12);
        assert!(g.degrees().iter().all(|&d| d == 4));
        assert!(g.is_simple());
    }

    #[test]
    fn torus_two_dimensional_side() {
        let g = generate(&Topology::Torus { n: 30, dim: 2, k: 1 }, 0).unwrap();
        assert_eq!(g.peer_count(), 25);
        assert_eq!(g.requested_peers(), 30);
        assert!(g.degrees().iter().all(|&d| d == 4));
    }

    #[test]
    fn invalid_parameters_name_the_field() {
        let err = generate(&Topology::Complete { n: 1 }, 0).unwrap_err();
        assert!(matches!(err, GraphError::InvalidParameter { field: "n", .. }));
        let err = generate(&Topology::ErdosRenyi { n: 10, p: 0.0 }, 0).unwrap_err();
        assert!(matches!(err, GraphError::InvalidParameter { field: "p", .. }));
        let err = generate(&Topology::Btree { branching: 1, depth: 3 }, 0).unwrap_err();
        assert!(matches!(err, GraphError::InvalidParameter { field: "branching", .. }));
        let err = generate(&Topology::RandomRegular { n: 5, d: 3 }, 0).unwrap_err();
        assert!(matches!(err, GraphError::InvalidParameter { field: "d", .. }));
    }

    #[test]
    fn random_families_are_simple_and_deterministic() {
        for topo in [
            Topology::ErdosRenyi { n: 40, p: 0.1 },
            Topology::RandomRegular { n: 30, d: 4 },
            Topology::Geometric { n: 40, c: 1.5 },
        ] {
            let a = generate(&topo, 3).unwrap();
            let b = generate(&topo, 3).unwrap();
            assert_eq!(a.links(), b.links());
            assert!(a.is_simple(), "{topo:?}");
            assert!(a.is_connected());
        }
        let g = generate(&Topology::RandomRegular { n: 100, d: 32 }, 11).unwrap();
        assert!(g.degrees().iter().all(|&d| d == 32));
    }

    #[test]
    fn pref_attach_keeps_loops_and_degree_sum() {
        let g = generate(&Topology::PrefAttach { n: 12, d: 3 }, 5).unwrap();
        assert_eq!(g.peer_count(), 12);
        assert_eq!(g.link_count(), 3 * 12 + 1);
        assert_eq!(g.degrees().iter().sum::<usize>(), 2 * g.link_count());
        assert!(g.is_connected());
    }

    #[test]
    fn cut_rejects_empty_and_full() {
        assert!(Cut::new([], 4).is_err());
        assert!(Cut::new([0, 1, 2, 3], 4).is_err());
        assert!(Cut::new([7], 4).is_err());
    }

    #[test]
    fn cut_conductance_examples() {
        let k10 = PeerGraph::complete(10).unwrap();
        let cut = Cut::with_complement([9], 10).unwrap();
        assert_eq!(cut_conductance(&k10, &cut).unwrap(), ratio(10, 9));

        let star = generate(&Topology::Star { n: 7 }, 0).unwrap();
        let leaf = Cut::with_complement([6], 7).unwrap();
        assert_eq!(cut_conductance(&star, &leaf).unwrap(), ratio(7, 36));

        let k4 = PeerGraph::complete(4).unwrap();
        for members in [vec![0], vec![1, 3], vec![0, 1, 2]] {
            let c = Cut::new(members, 4).unwrap();
            assert_eq!(cut_conductance(&k4, &c).unwrap(), ratio(4, 3));
        }
    }

    #[test]
    fn self_loops_never_cross() {
        let g = PeerGraph::from_links(2, vec![(0, 0), (0, 1), (0, 1)], "custom").unwrap();
        assert_eq!(g.degree(0), 4);
        assert_eq!(g.degree(1), 2);
        // S = {0}: two parallel links, each weighted 1/4, times N/(1*1) = 2.
        let c = Cut::new([0], 2).unwrap();
        assert_eq!(cut_conductance(&g, &c).unwrap(), ratio(1, 1));
    }

    #[test]
    fn exact_conductance_of_complete_four() {
        let k4 = PeerGraph::complete(4).unwrap();
        let m = graph_conductance_exact(&k4).unwrap();
        assert_eq!(m.value, ratio(4, 3));
        // All cuts tie; lexicographically least member list is [0].
        assert_eq!(m.argmin.members(), &[0]);
    }

    #[test]
    fn exact_rejects_large_graphs() {
        let k25 = PeerGraph::complete(25).unwrap();
        assert!(matches!(
            graph_conductance_exact(&k25),
            Err(GraphError::TooLarge { n: 25, limit: 20 })
        ));
    }

    #[test]
    fn lexicographic_order() {
        assert!(lex_less(0b01, 0b10));
        assert!(lex_less(0b011, 0b111));
        assert!(lex_less(0b101, 0b110));
        assert!(!lex_less(0b110, 0b101));
        assert!(!lex_less(0b1, 0b1));
    }

    #[test]
    fn bounds_reject_disconnected() {
        let g = PeerGraph::from_links(4, vec![(0, 1), (2, 3)], "custom").unwrap();
        assert!(!g.is_connected());
        assert_eq!(
            stability_bounds(&g, 1.0, BoundMode::Exact).unwrap_err(),
            GraphError::Disconnected
        );
    }

    #[test]
    fn rate_caps() {
        let c = per_peer_rate_cap(2).unwrap();
        assert_eq!((c.global, c.per_peer), (2.0, 1.0));
        let c = per_peer_rate_cap(10).unwrap();
        assert!((c.global - 10.0 / 9.0).abs() < 1e-15 && (c.per_peer - 1.0 / 9.0).abs() < 1e-15);
        assert!(per_peer_rate_cap(1_000_000).unwrap().global > 1.0);
        assert!(per_peer_rate_cap(1).is_err());
    }

    #[test]
    fn tree_closed_form_small() {
        // b = 2, k = 1: N = 3, value (1/2) / ((1/3) * 2 * 1) = 3/4.
        assert_eq!(tree_cut_conductance(2, 1).unwrap(), ratio(3, 4));
    }

    #[test]
    fn edge_list_round_trip() {
        let g = generate(&Topology::PrefAttach { n: 6, d: 2 }, 1).unwrap();
        let text = g.to_edge_list();
        assert!(text.starts_with("N 6\n"));
        let back = PeerGraph::from_edge_list(&text).unwrap();
        assert_eq!(back.links(), g.links());
        assert_eq!(back.degrees(), g.degrees());
        assert!(PeerGraph::from_edge_list("N 3\n0 x\n").is_err());
    }
}
