//! `(n, L)`-regular trees and per-parent straggler patterns.
//!
//! Nodes are addressed as `(layer, index)` with the master at `(0, 1)` and
//! 1-based indices inside each layer. Layer `l` holds `n^l` nodes and the
//! children of `(l, i)` are `(l + 1, n(i - 1) + 1) ..= (l + 1, n i)`. A dense
//! offset (master first, then layer by layer) backs all per-node tables.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: usize,
    pub index: usize,
}

impl NodeId {
    pub const MASTER: NodeId = NodeId { layer: 0, index: 1 };

    pub fn new(layer: usize, index: usize) -> Self {
        NodeId { layer, index }
    }

    pub fn is_master(&self) -> bool {
        *self == Self::MASTER
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.layer, self.index)
    }
}

impl FromStr for NodeId {
    type Err = Error;

    /// Accepts `l.i`, `l,i` or `(l,i)`.
    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim().trim_start_matches('(').trim_end_matches(')');
        let (l, i) = trimmed
            .split_once(['.', ','])
            .ok_or_else(|| Error::Parse(format!("node id `{s}`: expected `layer.index`")))?;
        let layer = l
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("node id `{s}`: bad layer")))?;
        let index = i
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("node id `{s}`: bad index")))?;
        Ok(NodeId { layer, index })
    }
}

/// A master plus `layers` layers of workers, every parent having `n` children.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegularTree {
    n: usize,
    layers: usize,
    /// `layer_start[l]` is the dense offset of `(l, 1)`; the final entry is the node count.
    layer_start: Vec<usize>,
}

impl RegularTree {
    pub fn new(n: usize, layers: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidTree("children per parent must be at least 1".into()));
        }
        if layers == 0 {
            return Err(Error::InvalidTree("tree needs at least one worker layer".into()));
        }
        let mut layer_start = Vec::with_capacity(layers + 2);
        let mut start = 0usize;
        let mut width = 1usize;
        for _ in 0..=layers {
            layer_start.push(start);
            start = start
                .checked_add(width)
                .ok_or_else(|| Error::InvalidTree(format!("({n},{layers}) tree is too large")))?;
            width = width
                .checked_mul(n)
                .ok_or_else(|| Error::InvalidTree(format!("({n},{layers}) tree is too large")))?;
        }
        layer_start.push(start);
        Ok(RegularTree {
            n,
            layers,
            layer_start,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Total workers `N = n + n^2 + ... + n^L` (master excluded).
    pub fn num_workers(&self) -> usize {
        self.num_nodes() - 1
    }

    /// Workers plus the master.
    pub fn num_nodes(&self) -> usize {
        self.layer_start[self.layers + 1]
    }

    pub fn layer_width(&self, layer: usize) -> usize {
        self.layer_start[layer + 1] - self.layer_start[layer]
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.layer <= self.layers && node.index >= 1 && node.index <= self.layer_width(node.layer)
    }

    pub fn offset(&self, node: NodeId) -> usize {
        debug_assert!(self.contains(node), "{node} not in tree");
        self.layer_start[node.layer] + node.index - 1
    }

    pub fn node_at(&self, offset: usize) -> NodeId {
        let layer = self.layer_start.partition_point(|&start| start <= offset) - 1;
        NodeId::new(layer, offset - self.layer_start[layer] + 1)
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        node.layer == self.layers
    }

    pub fn children(&self, node: NodeId) -> Vec<NodeId> {
        if self.is_leaf(node) {
            return Vec::new();
        }
        let first = self.n * (node.index - 1) + 1;
        (first..first + self.n)
            .map(|index| NodeId::new(node.layer + 1, index))
            .collect()
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        if node.layer == 0 {
            return None;
        }
        Some(NodeId::new(node.layer - 1, (node.index - 1) / self.n + 1))
    }

    /// 0-based position of `node` among its siblings.
    pub fn child_position(&self, node: NodeId) -> usize {
        (node.index - 1) % self.n
    }

    /// All nodes in dense-offset order, master first.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.num_nodes()).map(move |offset| self.node_at(offset))
    }

    /// All non-master nodes in dense-offset order.
    pub fn workers(&self) -> impl Iterator<Item = NodeId> + '_ {
        (1..self.num_nodes()).map(move |offset| self.node_at(offset))
    }

    /// Every node that has children (master included), top-down.
    pub fn parents(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.layer_start[self.layers]).map(move |offset| self.node_at(offset))
    }

    pub fn num_parents(&self) -> usize {
        self.layer_start[self.layers]
    }

    pub fn layer_nodes(&self, layer: usize) -> impl Iterator<Item = NodeId> {
        (1..=self.layer_width(layer)).map(move |index| NodeId::new(layer, index))
    }

    /// True when `node` lies in the subtree rooted at `root` (inclusive).
    pub fn in_subtree(&self, root: NodeId, node: NodeId) -> bool {
        if node.layer < root.layer {
            return false;
        }
        let span = self.n.pow((node.layer - root.layer) as u32);
        (node.index - 1) / span + 1 == root.index
    }

    pub fn subtree(&self, root: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut span = 1;
        for layer in root.layer..=self.layers {
            let first = (root.index - 1) * span + 1;
            out.extend((first..first + span).map(|index| NodeId::new(layer, index)));
            span *= self.n;
        }
        out
    }
}

/// For each parent, the set of its children that fail to report in time.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct StragglerPattern {
    stragglers: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl StragglerPattern {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks `child` as straggling. Rejects nodes that are not children of a tree parent.
    pub fn insert(&mut self, tree: &RegularTree, child: NodeId) -> Result<()> {
        if !tree.contains(child) || child.is_master() {
            return Err(Error::InvalidPattern(format!("{child} is not a worker of the tree")));
        }
        let parent = tree.parent(child).expect("workers have parents");
        self.stragglers.entry(parent).or_default().insert(child);
        Ok(())
    }

    pub fn from_nodes(tree: &RegularTree, nodes: impl IntoIterator<Item = NodeId>) -> Result<Self> {
        let mut pattern = Self::new();
        for node in nodes {
            pattern.insert(tree, node)?;
        }
        Ok(pattern)
    }

    /// Checks that no parent has more than `s` stragglers.
    pub fn validate(&self, tree: &RegularTree, s: usize) -> Result<()> {
        for (parent, set) in &self.stragglers {
            if set.len() > s {
                return Err(Error::Unrecoverable {
                    parent: *parent,
                    survivors: tree.n() - set.len(),
                    required: tree.n() - s,
                });
            }
        }
        Ok(())
    }

    pub fn stragglers_of(&self, parent: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.stragglers.get(&parent).into_iter().flatten().copied()
    }

    pub fn count_for(&self, parent: NodeId) -> usize {
        self.stragglers.get(&parent).map_or(0, BTreeSet::len)
    }

    pub fn is_straggler(&self, tree: &RegularTree, node: NodeId) -> bool {
        tree.parent(node)
            .and_then(|p| self.stragglers.get(&p))
            .is_some_and(|set| set.contains(&node))
    }

    /// Children of `parent` that respond, in child-index order.
    pub fn survivors(&self, tree: &RegularTree, parent: NodeId) -> Vec<NodeId> {
        let missing = self.stragglers.get(&parent);
        tree.children(parent)
            .into_iter()
            .filter(|c| !missing.is_some_and(|set| set.contains(c)))
            .collect()
    }

    pub fn total(&self) -> usize {
        self.stragglers.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.stragglers.values().flatten().copied()
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Subsets of `0..n` with at most `s` elements, ordered by size then lexicographically.
fn small_subsets(n: usize, s: usize) -> Vec<Vec<usize>> {
    fn extend(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for v in start..n {
            cur.push(v);
            extend(n, k, v + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for k in 0..=s {
        extend(n, k, 0, &mut Vec::new(), &mut out);
    }
    out
}

/// Number of admissible patterns `(sum_k C(n,k))^(#parents)`, saturating.
pub fn pattern_count(tree: &RegularTree, s: usize) -> u128 {
    let per_parent = (0..=s.min(tree.n())).map(|k| binomial(tree.n(), k)).sum::<f64>();
    let total = per_parent.powi(tree.num_parents() as i32);
    if total >= u128::MAX as f64 {
        u128::MAX
    } else {
        total.round() as u128
    }
}

/// All straggler patterns with at most `s` stragglers per parent when there are at
/// most `cap` of them; otherwise `cap` distinct patterns drawn uniformly with the
/// given seed, always including the empty and the all-maximal pattern (the first
/// `s` children of every parent).
pub fn enumerate_patterns(
    tree: &RegularTree,
    s: usize,
    cap: usize,
    seed: u64,
) -> Result<Vec<StragglerPattern>> {
    if s >= tree.n() {
        return Err(Error::InvalidParameters(format!(
            "straggler tolerance s={s} must be below n={}",
            tree.n()
        )));
    }
    let parents: Vec<NodeId> = tree.parents().collect();
    let build = |choices: &[Vec<usize>]| -> StragglerPattern {
        let mut pattern = StragglerPattern::new();
        for (parent, chosen) in parents.iter().zip(choices) {
            if chosen.is_empty() {
                continue;
            }
            let children = tree.children(*parent);
            pattern
                .stragglers
                .insert(*parent, chosen.iter().map(|&pos| children[pos]).collect());
        }
        pattern
    };

    let total = pattern_count(tree, s);
    if total <= cap as u128 {
        let subsets = small_subsets(tree.n(), s);
        let radix = subsets.len();
        let mut digits = vec![0usize; parents.len()];
        let mut out = Vec::with_capacity(total as usize);
        loop {
            let choices: Vec<Vec<usize>> = digits.iter().map(|&d| subsets[d].clone()).collect();
            out.push(build(&choices));
            // mixed-radix increment, first parent fastest
            let mut pos = 0;
            loop {
                if pos == digits.len() {
                    return Ok(out);
                }
                digits[pos] += 1;
                if digits[pos] < radix {
                    break;
                }
                digits[pos] = 0;
                pos += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size_dist = WeightedIndex::new((0..=s).map(|k| binomial(tree.n(), k)))
        .map_err(|e| Error::InvalidParameters(e.to_string()))?;
    let empty: Vec<Vec<usize>> = vec![Vec::new(); parents.len()];
    let maximal: Vec<Vec<usize>> = vec![(0..s).collect(); parents.len()];
    let mut seen: HashSet<Vec<Vec<usize>>> = HashSet::new();
    let mut out = Vec::with_capacity(cap);
    for fixed in [empty, maximal] {
        if out.len() < cap && seen.insert(fixed.clone()) {
            out.push(build(&fixed));
        }
    }
    while out.len() < cap {
        let choices: Vec<Vec<usize>> = parents
            .iter()
            .map(|_| {
                let k = size_dist.sample(&mut rng);
                let mut picked = rand::seq::index::sample(&mut rng, tree.n(), k).into_vec();
                picked.sort_unstable();
                picked
            })
            .collect();
        if seen.insert(choices.clone()) {
            out.push(build(&choices));
        }
    }
    Ok(out)
}
