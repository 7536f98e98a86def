//! Block DAG state, reference-selection policies and confirmation queries.
//!
//! Depth is the length of the longest directed reference path from a block
//! down to genesis. Under the tree policy every block has a single parent, so
//! this is the unique hop distance; for general DAGs it is the natural notion
//! of chain length.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::PeerId;

pub type BlockId = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DagError {
    #[error("block {block} references {reference}, which is not an earlier block")]
    InvalidReference { block: BlockId, reference: BlockId },
    #[error("block {block} has no outgoing references")]
    NoReferences { block: BlockId },
    #[error("block {0} does not exist")]
    MissingBlock(BlockId),
    #[error("peer {peer} cannot hold block {block} without its reference {missing}")]
    ClosureViolation {
        peer: PeerId,
        block: BlockId,
        missing: BlockId,
    },
    #[error("dag export line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// One reference, to the least-indexed block of the longest-chain frontier.
    Tree,
    /// References to every leaf of the miner's view.
    ThroughputOptimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub index: BlockId,
    pub miner: Option<PeerId>,
    pub arrival_time: f64,
    out_refs: Vec<BlockId>,
}

impl Block {
    /// Outgoing references, fixed at mining time.
    pub fn out_refs(&self) -> &[BlockId] {
        &self.out_refs
    }
}

/// The global block DAG `G(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDag {
    blocks: Vec<Block>,
    in_refs: Vec<Vec<BlockId>>,
    depth: Vec<usize>,
    max_depth: usize,
}

impl Default for BlockDag {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockDag {
    pub fn new() -> Self {
        BlockDag {
            blocks: vec![Block {
                index: 0,
                miner: None,
                arrival_time: 0.0,
                out_refs: Vec::new(),
            }],
            in_refs: vec![Vec::new()],
            depth: vec![0],
            max_depth: 0,
        }
    }

    /// Number of blocks, genesis included.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn block(&self, b: BlockId) -> Option<&Block> {
        self.blocks.get(b)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn out_refs(&self, b: BlockId) -> &[BlockId] {
        &self.blocks[b].out_refs
    }

    pub fn in_refs(&self, b: BlockId) -> &[BlockId] {
        &self.in_refs[b]
    }

    pub fn depth(&self, b: BlockId) -> usize {
        self.depth[b]
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Appends the next block. References must be distinct, nonempty and
    /// point to existing blocks.
    pub fn push(
        &mut self,
        miner: Option<PeerId>,
        arrival_time: f64,
        mut out_refs: Vec<BlockId>,
    ) -> Result<BlockId, DagError> {
        let index = self.blocks.len();
        out_refs.sort_unstable();
        out_refs.dedup();
        if out_refs.is_empty() {
            return Err(DagError::NoReferences { block: index });
        }
        if let Some(&r) = out_refs.iter().find(|&&r| r >= index) {
            return Err(DagError::InvalidReference {
                block: index,
                reference: r,
            });
        }
        let depth = 1 + out_refs.iter().map(|&r| self.depth[r]).max().unwrap_or(0);
        for &r in &out_refs {
            self.in_refs[r].push(index);
        }
        self.blocks.push(Block {
            index,
            miner,
            arrival_time,
            out_refs,
        });
        self.in_refs.push(Vec::new());
        self.depth.push(depth);
        self.max_depth = self.max_depth.max(depth);
        Ok(index)
    }

    /// Copy of the DAG restricted to blocks `0..count`.
    pub fn prefix(&self, count: usize) -> BlockDag {
        let count = count.clamp(1, self.len());
        let blocks = self.blocks[..count].to_vec();
        let in_refs = self.in_refs[..count]
            .iter()
            .map(|v| v.iter().copied().filter(|&b| b < count).collect())
            .collect();
        let depth = self.depth[..count].to_vec();
        let max_depth = depth.iter().copied().max().unwrap_or(0);
        BlockDag {
            blocks,
            in_refs,
            depth,
            max_depth,
        }
    }

    fn check(&self, b: BlockId) -> Result<(), DagError> {
        if b < self.len() {
            Ok(())
        } else {
            Err(DagError::MissingBlock(b))
        }
    }

    /// True iff a directed reference path leads from `from` to `to`.
    pub fn has_path(&self, from: BlockId, to: BlockId) -> Result<bool, DagError> {
        self.check(from)?;
        self.check(to)?;
        if from == to {
            return Ok(true);
        }
        if from < to {
            return Ok(false);
        }
        let mut seen = FixedBitSet::with_capacity(from + 1);
        let mut stack = vec![from];
        while let Some(b) = stack.pop() {
            for &r in &self.blocks[b].out_refs {
                if r == to {
                    return Ok(true);
                }
                if r > to && !seen.put(r) {
                    stack.push(r);
                }
            }
        }
        Ok(false)
    }

    /// Blocks reachable from `from`, including itself.
    pub fn ancestors(&self, from: BlockId) -> Result<FixedBitSet, DagError> {
        self.check(from)?;
        let mut seen = FixedBitSet::with_capacity(from + 1);
        seen.insert(from);
        let mut stack = vec![from];
        while let Some(b) = stack.pop() {
            for &r in &self.blocks[b].out_refs {
                if !seen.put(r) {
                    stack.push(r);
                }
            }
        }
        Ok(seen)
    }

    pub fn max_in_degree(&self) -> usize {
        self.in_refs.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn max_out_degree(&self) -> usize {
        self.blocks.iter().map(|b| b.out_refs.len()).max().unwrap_or(0)
    }

    /// Blocks with no in-references.
    pub fn leaves(&self) -> Vec<BlockId> {
        (0..self.len()).filter(|&b| self.in_refs[b].is_empty()).collect()
    }

    /// Checks that every maximal path from every block terminates at genesis.
    /// Paths are covered exhaustively through memoisation over the DAG.
    pub fn all_maximal_paths_end_at_genesis(&self) -> bool {
        let mut ok = vec![false; self.len()];
        for b in 0..self.len() {
            let refs = &self.blocks[b].out_refs;
            ok[b] = if refs.is_empty() {
                b == 0
            } else {
                refs.iter().all(|&r| r < b && ok[r])
            };
            if !ok[b] {
                return false;
            }
        }
        true
    }

    pub fn distinguished_path(&self) -> DistinguishedPath {
        self.distinguished_path_where(|_| true)
    }

    /// Distinguished path of the sub-DAG on the blocks accepted by `member`,
    /// which must be closed under references.
    pub fn distinguished_path_where(&self, member: impl Fn(BlockId) -> bool) -> DistinguishedPath {
        let mut start = 0;
        for b in 0..self.len() {
            if member(b) && self.depth[b] > self.depth[start] {
                start = b;
            }
        }
        let mut blocks = vec![start];
        let mut cur = start;
        while cur != 0 {
            let want = self.depth[cur] - 1;
            cur = *self.blocks[cur]
                .out_refs
                .iter()
                .find(|&&r| self.depth[r] == want)
                .expect("a deepest reference exists");
            blocks.push(cur);
        }
        DistinguishedPath { blocks }
    }

    /// Text export, one block per line: `index miner arrival_time refs`.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let miner = b.miner.map_or("-".to_string(), |m| m.to_string());
            let refs = if b.out_refs.is_empty() {
                "-".to_string()
            } else {
                b.out_refs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            };
            let _ = writeln!(out, "{} {} {:?} {}", b.index, miner, b.arrival_time, refs);
        }
        out
    }

    pub fn parse(text: &str) -> Result<BlockDag, DagError> {
        let mut dag: Option<BlockDag> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let err = |reason: String| DagError::Parse { line, reason };
            let fields: Vec<&str> = l.split_whitespace().collect();
            let [index, miner, time, refs] = fields[..] else {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            };
            let index: BlockId = index.parse().map_err(|_| err(format!("bad index `{index}`")))?;
            let miner = match miner {
                "-" => None,
                m => Some(m.parse::<PeerId>().map_err(|_| err(format!("bad miner `{m}`")))?),
            };
            let time: f64 = time.parse().map_err(|_| err(format!("bad time `{time}`")))?;
            let refs: Vec<BlockId> = match refs {
                "-" => Vec::new(),
                r => r
                    .split(',')
                    .map(|x| x.parse().map_err(|_| err(format!("bad reference `{x}`"))))
                    .collect::<Result<_, _>>()?,
            };
            match dag.as_mut() {
                None => {
                    if index != 0 || !refs.is_empty() {
                        return Err(err("first line must be genesis `0 - 0.0 -`".into()));
                    }
                    dag = Some(BlockDag::new());
                }
                Some(d) => {
                    if index != d.len() {
                        return Err(err(format!("expected block {}, found {index}", d.len())));
                    }
                    d.push(miner, time, refs).map_err(|e| err(e.to_string()))?;
                }
            }
        }
        dag.ok_or(DagError::Parse {
            line: 1,
            reason: "empty export".into(),
        })
    }
}

/// Longest maximal path, listed from its starting block down to genesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistinguishedPath {
    blocks: Vec<BlockId>,
}

impl DistinguishedPath {
    pub fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    pub fn start(&self) -> BlockId {
        self.blocks[0]
    }

    /// Hop count.
    pub fn len(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.len() == 1
    }

    pub fn contains(&self, b: BlockId) -> bool {
        self.blocks.contains(&b)
    }
}

/// Blocks of a DAG snapshot taken at a consistency time that are thereby
/// determined to be confirmed: the distinguished path under the tree policy,
/// every block under the throughput-optimal policy.
pub fn confirmed_at_consistency(dag_at_c: &BlockDag, policy: Policy) -> BTreeSet<BlockId> {
    match policy {
        Policy::Tree => dag_at_c.distinguished_path().blocks.into_iter().collect(),
        Policy::ThroughputOptimal => (0..dag_at_c.len()).collect(),
    }
}

/// A peer's view `B_p(t)`, with its longest-chain frontier and leaf set
/// maintained incrementally.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerView {
    peer: PeerId,
    known: FixedBitSet,
    count: usize,
    frontier_depth: usize,
    frontier: Vec<BlockId>,
    leaves: BTreeSet<BlockId>,
}

impl PeerView {
    pub fn new(peer: PeerId) -> Self {
        let mut known = FixedBitSet::with_capacity(64);
        known.insert(0);
        PeerView {
            peer,
            known,
            count: 1,
            frontier_depth: 0,
            frontier: vec![0],
            leaves: BTreeSet::from([0]),
        }
    }

    pub fn peer(&self) -> PeerId {
        self.peer
    }

    #[inline]
    pub fn knows(&self, b: BlockId) -> bool {
        self.known.contains(b)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn known(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.known.ones()
    }

    /// Adds `b`, which must have all of its references already in the view.
    pub fn insert(&mut self, dag: &BlockDag, b: BlockId) -> Result<(), DagError> {
        let block = dag.block(b).ok_or(DagError::MissingBlock(b))?;
        if self.knows(b) {
            return Ok(());
        }
        if let Some(&missing) = block.out_refs.iter().find(|&&r| !self.knows(r)) {
            return Err(DagError::ClosureViolation {
                peer: self.peer,
                block: b,
                missing,
            });
        }
        if b >= self.known.len() {
            self.known.grow((b + 1).max(2 * self.known.len()));
        }
        self.known.insert(b);
        self.count += 1;
        let depth = dag.depth(b);
        match depth.cmp(&self.frontier_depth) {
            std::cmp::Ordering::Greater => {
                self.frontier_depth = depth;
                self.frontier.clear();
                self.frontier.push(b);
            }
            std::cmp::Ordering::Equal => {
                let pos = self.frontier.partition_point(|&x| x < b);
                self.frontier.insert(pos, b);
            }
            std::cmp::Ordering::Less => {}
        }
        for r in &block.out_refs {
            self.leaves.remove(r);
        }
        self.leaves.insert(b);
        Ok(())
    }

    /// Blocks in the view at maximal depth, ascending.
    pub fn frontier(&self) -> &[BlockId] {
        &self.frontier
    }

    pub fn frontier_depth(&self) -> usize {
        self.frontier_depth
    }

    /// Blocks in the view referenced by no other block in the view.
    pub fn leaves(&self) -> &BTreeSet<BlockId> {
        &self.leaves
    }

    pub fn select_refs(&self, policy: Policy) -> Vec<BlockId> {
        match policy {
            Policy::Tree => select_refs_tree(self),
            Policy::ThroughputOptimal => select_refs_throughput(self),
        }
    }

    /// Verifies `j in view => refs(j) in view`.
    pub fn check_closure(&self, dag: &BlockDag) -> Result<(), DagError> {
        for b in self.known.ones() {
            let block = dag.block(b).ok_or(DagError::MissingBlock(b))?;
            if let Some(&missing) = block.out_refs.iter().find(|&&r| !self.knows(r)) {
                return Err(DagError::ClosureViolation {
                    peer: self.peer,
                    block: b,
                    missing,
                });
            }
        }
        Ok(())
    }
}

pub fn longest_chain_frontier(view: &PeerView) -> Vec<BlockId> {
    view.frontier.clone()
}

pub fn select_refs_tree(view: &PeerView) -> Vec<BlockId> {
    vec![view.frontier[0]]
}

pub fn select_refs_throughput(view: &PeerView) -> Vec<BlockId> {
    view.leaves.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Global DAG of the two-peer example after all four arrivals:
    /// 1 -> 0, 2 -> 1, 3 -> 1, 4 -> 2.
    fn example_dag() -> BlockDag {
        let mut dag = BlockDag::new();
        dag.push(Some(0), 1.1, vec![0]).unwrap();
        dag.push(Some(0), 2.4, vec![1]).unwrap();
        dag.push(Some(1), 4.0, vec![1]).unwrap();
        dag.push(Some(1), 6.2, vec![2]).unwrap();
        dag
    }

    fn view_of(dag: &BlockDag, blocks: &[BlockId]) -> PeerView {
        let mut v = PeerView::new(0);
        for &b in blocks {
            v.insert(dag, b).unwrap();
        }
        v
    }

    #[test]
    fn frontier_examples() {
        let dag = example_dag();
        assert_eq!(longest_chain_frontier(&PeerView::new(0)), vec![0]);
        assert_eq!(longest_chain_frontier(&view_of(&dag, &[1, 2, 3])), vec![2, 3]);
        assert_eq!(longest_chain_frontier(&view_of(&dag, &[1, 2])), vec![2]);
    }

    #[test]
    fn tree_selection_examples() {
        let dag = example_dag();
        assert_eq!(select_refs_tree(&view_of(&dag, &[1])), vec![1]);
        assert_eq!(select_refs_tree(&view_of(&dag, &[1, 2, 3])), vec![2]);
        assert_eq!(select_refs_tree(&PeerView::new(3)), vec![0]);
    }

    #[test]
    fn throughput_selection_examples() {
        let mut dag = BlockDag::new();
        assert_eq!(select_refs_throughput(&PeerView::new(0)), vec![0]);
        dag.push(Some(0), 1.0, vec![0]).unwrap();
        dag.push(Some(1), 1.5, vec![0]).unwrap();
        let mut view = view_of(&dag, &[1, 2]);
        let refs = select_refs_throughput(&view);
        assert_eq!(refs, vec![1, 2]);
        let b3 = dag.push(Some(0), 2.0, refs).unwrap();
        view.insert(&dag, b3).unwrap();
        assert_eq!(select_refs_throughput(&view), vec![3]);
    }

    #[test]
    fn distinguished_path_examples() {
        let dag = example_dag();
        let at_consistency = dag.prefix(4);
        assert_eq!(at_consistency.distinguished_path().blocks(), &[2, 1, 0]);
        assert_eq!(dag.distinguished_path().blocks(), &[4, 2, 1, 0]);
        let mut chain = BlockDag::new();
        chain.push(None, 1.0, vec![0]).unwrap();
        chain.push(None, 2.0, vec![1]).unwrap();
        assert_eq!(chain.distinguished_path().blocks(), &[2, 1, 0]);
    }

    #[test]
    fn confirmation_examples() {
        let dag = example_dag();
        let confirmed = confirmed_at_consistency(&dag, Policy::Tree);
        assert_eq!(confirmed, BTreeSet::from([0, 1, 2, 4]));
        assert_eq!(confirmed_at_consistency(&BlockDag::new(), Policy::Tree), BTreeSet::from([0]));
        let mut chain = BlockDag::new();
        for i in 0..5 {
            chain.push(None, i as f64, vec![i]).unwrap();
        }
        assert_eq!(confirmed_at_consistency(&chain, Policy::Tree).len(), 6);
        assert_eq!(confirmed_at_consistency(&dag, Policy::ThroughputOptimal).len(), 5);
    }

    #[test]
    fn has_path_examples() {
        let dag = example_dag();
        assert!(dag.has_path(4, 1).unwrap());
        assert!(!dag.has_path(4, 3).unwrap());
        assert!(dag.has_path(3, 3).unwrap());
        assert!(!dag.has_path(0, 1).unwrap());
        assert_eq!(dag.has_path(9, 0), Err(DagError::MissingBlock(9)));
    }

    #[test]
    fn in_degree_examples() {
        assert_eq!(example_dag().max_in_degree(), 2);
        let mut chain = BlockDag::new();
        chain.push(None, 1.0, vec![0]).unwrap();
        chain.push(None, 2.0, vec![1]).unwrap();
        assert_eq!(chain.max_in_degree(), 1);
        assert_eq!(BlockDag::new().max_in_degree(), 0);
    }

    #[test]
    fn push_rejects_forward_and_empty_references() {
        let mut dag = BlockDag::new();
        assert_eq!(
            dag.push(None, 0.0, vec![1]),
            Err(DagError::InvalidReference { block: 1, reference: 1 })
        );
        assert_eq!(dag.push(None, 0.0, vec![]), Err(DagError::NoReferences { block: 1 }));
    }

    #[test]
    fn view_enforces_reference_closure() {
        let dag = example_dag();
        let mut v = PeerView::new(5);
        assert_eq!(
            v.insert(&dag, 2),
            Err(DagError::ClosureViolation { peer: 5, block: 2, missing: 1 })
        );
        v.insert(&dag, 1).unwrap();
        v.insert(&dag, 2).unwrap();
        v.check_closure(&dag).unwrap();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn maximal_paths_end_at_genesis() {
        assert!(example_dag().all_maximal_paths_end_at_genesis());
    }

    #[test]
    fn export_round_trip() {
        let dag = example_dag();
        let text = dag.export();
        assert!(text.starts_with("0 - 0.0 -\n1 0 1.1 0\n"));
        assert_eq!(BlockDag::parse(&text).unwrap(), dag);
        assert!(matches!(BlockDag::parse("0 - 0.0 -\n2 0 1.0 0\n"), Err(DagError::Parse { line: 2, .. })));
    }
}
