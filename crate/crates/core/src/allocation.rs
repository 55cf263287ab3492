//! Coded data placement over a regular tree.
//!
//! Data points are identified by 0-based global indices `0..d`. A node's local
//! coded dataset is a list of [`WeightedSlice`]s; its gradient is the weighted
//! sum of per-point gradients over those slices. [`comp_alloc`] spreads one
//! weighted dataset over a sibling group through an encoding matrix and
//! [`cr_allocate`] applies it recursively from the master down, every node
//! keeping the first `r_CR d` points of what its subtree receives.

use std::collections::BTreeMap;
use std::fmt;

use num_integer::Integer;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::codes::{build_encoding, EncodingMatrix};
use crate::error::{Error, Result};
use crate::topology::{NodeId, RegularTree};

/// Exact fraction of the dataset assigned to one worker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LoadFraction(Ratio<i128>);

impl LoadFraction {
    pub fn new(numer: i128, denom: i128) -> Self {
        LoadFraction(Ratio::new(numer, denom))
    }

    pub fn ratio(&self) -> Ratio<i128> {
        self.0
    }

    pub fn numer(&self) -> i128 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i128 {
        *self.0.denom()
    }

    pub fn to_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }

    /// `self * d` when it is an integer.
    pub fn points_of(&self, d: usize) -> Option<usize> {
        let v = self.0 * Ratio::from_integer(d as i128);
        v.is_integer().then(|| v.to_integer() as usize)
    }
}

impl fmt::Display for LoadFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

fn check_params(n: usize, s: usize) -> Result<()> {
    if n == 0 || s >= n {
        return Err(Error::InvalidParameters(format!(
            "need 0 <= s < n, got n={n}, s={s}"
        )));
    }
    Ok(())
}

/// `1 / sum_{l=1..L} (n/(s+1))^l`.
pub fn r_cr(n: usize, layers: usize, s: usize) -> Result<LoadFraction> {
    check_params(n, s)?;
    if layers == 0 {
        return Err(Error::InvalidParameters("layers must be at least 1".into()));
    }
    let q = Ratio::new(n as i128, (s + 1) as i128);
    let mut term = Ratio::from_integer(1);
    let mut sum = Ratio::from_integer(0);
    for _ in 0..layers {
        term *= q;
        sum += term;
    }
    Ok(LoadFraction(sum.recip()))
}

/// `(S + 1) / N`.
pub fn r_gc(workers: usize, stragglers: usize) -> Result<LoadFraction> {
    check_params(workers, stragglers)?;
    Ok(LoadFraction::new(stragglers as i128 + 1, workers as i128))
}

/// Smallest dataset size for which every split made by [`cr_allocate`] is integral.
///
/// Each set size in the recursion is a fixed rational multiple of `d`: the
/// master's `n`-way split `d/n`, the layer-`l` subtree sets `c_l d` with
/// `c_1 = (s+1)/n` and `c_{l+1} = (s+1)/n (c_l - r)`, the local picks `r d`
/// and the `n`-way splits `(c_l - r) d / n` of each remainder. The answer is
/// the lcm of their denominators.
pub fn granularity(n: usize, layers: usize, s: usize) -> Result<usize> {
    let r = r_cr(n, layers, s)?.ratio();
    let n_r = Ratio::from_integer(n as i128);
    let share = Ratio::new((s + 1) as i128, n as i128);
    let mut denom = n as i128;
    denom = denom.lcm(r.denom());
    let mut subtree = share;
    for layer in 1..=layers {
        denom = denom.lcm(subtree.denom());
        if layer < layers {
            let part = (subtree - r) / n_r;
            denom = denom.lcm(part.denom());
            subtree = share * (subtree - r);
        }
    }
    debug_assert_eq!(subtree, r, "leaf subtree set equals the local load");
    usize::try_from(denom).map_err(|_| Error::InvalidParameters("granularity overflow".into()))
}

/// A half-open range of global point indices sharing one combining weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedSlice {
    pub start: usize,
    pub end: usize,
    pub weight: f64,
}

impl WeightedSlice {
    pub fn new(start: usize, end: usize, weight: f64) -> Self {
        debug_assert!(start < end, "empty slice");
        WeightedSlice { start, end, weight }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn scaled(&self, factor: f64) -> Self {
        WeightedSlice {
            weight: self.weight * factor,
            ..*self
        }
    }
}

pub fn point_count(slices: &[WeightedSlice]) -> usize {
    slices.iter().map(WeightedSlice::len).sum()
}

/// Sorts by start index and merges touching slices of equal weight.
pub fn normalize(slices: &mut Vec<WeightedSlice>) {
    slices.retain(|s| !s.is_empty());
    slices.sort_by_key(|s| s.start);
    let mut merged: Vec<WeightedSlice> = Vec::with_capacity(slices.len());
    for slice in slices.drain(..) {
        match merged.last_mut() {
            Some(last) if last.end == slice.start && last.weight == slice.weight => {
                last.end = slice.end;
            }
            _ => merged.push(slice),
        }
    }
    *slices = merged;
}

/// Splits off the first `count` points (in list order).
pub fn split_points(
    slices: &[WeightedSlice],
    count: usize,
) -> (Vec<WeightedSlice>, Vec<WeightedSlice>) {
    let mut head = Vec::new();
    let mut tail = Vec::new();
    let mut remaining = count;
    for slice in slices {
        if remaining == 0 {
            tail.push(*slice);
        } else if slice.len() <= remaining {
            remaining -= slice.len();
            head.push(*slice);
        } else {
            let cut = slice.start + remaining;
            head.push(WeightedSlice::new(slice.start, cut, slice.weight));
            tail.push(WeightedSlice::new(cut, slice.end, slice.weight));
            remaining = 0;
        }
    }
    (head, tail)
}

/// Splits into `parts` consecutive groups of equal point count.
pub fn partition(slices: &[WeightedSlice], parts: usize) -> Result<Vec<Vec<WeightedSlice>>> {
    let total = point_count(slices);
    if parts == 0 || total % parts != 0 {
        return Err(Error::Divisibility {
            points: total,
            parts,
        });
    }
    let size = total / parts;
    let mut out = Vec::with_capacity(parts);
    let mut rest = slices.to_vec();
    for _ in 0..parts {
        let (head, tail) = split_points(&rest, size);
        out.push(head);
        rest = tail;
    }
    Ok(out)
}

/// Distributes `data` over the `n` workers of one group.
///
/// `data` is split into `n` index-contiguous parts of equal size; worker `i`
/// receives part `k` rescaled by `B[i][k]` for every nonzero entry of row `i`.
pub fn comp_alloc(data: &[WeightedSlice], code: &EncodingMatrix) -> Result<Vec<Vec<WeightedSlice>>> {
    let mut ordered = data.to_vec();
    normalize(&mut ordered);
    let parts = partition(&ordered, code.n())?;
    Ok((0..code.n())
        .map(|i| {
            let mut mine: Vec<WeightedSlice> = code
                .support(i)
                .filter(|&k| code.get(i, k) != 0.0)
                .flat_map(|k| parts[k].iter().map(move |p| p.scaled(code.get(i, k))))
                .collect();
            normalize(&mut mine);
            mine
        })
        .collect())
}

/// Result of [`cr_allocate`]: per-node local datasets plus the subtree bookkeeping.
#[derive(Clone, Debug)]
pub struct Assignment {
    tree: RegularTree,
    code: EncodingMatrix,
    d: usize,
    load: LoadFraction,
    local_points: usize,
    local: Vec<Vec<WeightedSlice>>,
    subtree_sets: Vec<Vec<WeightedSlice>>,
    remainders: Vec<Vec<WeightedSlice>>,
}

impl Assignment {
    pub fn tree(&self) -> &RegularTree {
        &self.tree
    }

    pub fn code(&self) -> &EncodingMatrix {
        &self.code
    }

    pub fn s(&self) -> usize {
        self.code.s()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn load(&self) -> LoadFraction {
        self.load
    }

    /// `r_CR d`, the point count held by every worker.
    pub fn local_points(&self) -> usize {
        self.local_points
    }

    /// The node's local coded dataset `D(l,i)`; empty for the master.
    pub fn local(&self, node: NodeId) -> &[WeightedSlice] {
        &self.local[self.tree.offset(node)]
    }

    /// `D^{T(l,i)}`, everything assigned to the subtree rooted at `node`.
    pub fn subtree_set(&self, node: NodeId) -> &[WeightedSlice] {
        &self.subtree_sets[self.tree.offset(node)]
    }

    /// `D_{T(l,i)}`, what `node` hands to its children.
    pub fn remainder(&self, node: NodeId) -> &[WeightedSlice] {
        &self.remainders[self.tree.offset(node)]
    }

    /// CSV with header `node_layer,node_index,range_start,range_end,weight`.
    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["node_layer", "node_index", "range_start", "range_end", "weight"])?;
        for node in self.tree.workers() {
            for slice in self.local(node) {
                writer.write_record([
                    node.layer.to_string(),
                    node.index.to_string(),
                    slice.start.to_string(),
                    slice.end.to_string(),
                    slice.weight.to_string(),
                ])?;
            }
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Deserialize)]
struct AssignmentRow {
    node_layer: usize,
    node_index: usize,
    range_start: usize,
    range_end: usize,
    weight: f64,
}

/// Parses the CSV written by [`Assignment::to_csv`] back into per-node slices.
pub fn read_assignment_csv(text: &str) -> Result<BTreeMap<NodeId, Vec<WeightedSlice>>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out: BTreeMap<NodeId, Vec<WeightedSlice>> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: AssignmentRow = row?;
        if row.range_start >= row.range_end {
            return Err(Error::Parse(format!(
                "empty range {}..{} for node ({},{})",
                row.range_start, row.range_end, row.node_layer, row.node_index
            )));
        }
        out.entry(NodeId::new(row.node_layer, row.node_index))
            .or_default()
            .push(WeightedSlice::new(row.range_start, row.range_end, row.weight));
    }
    Ok(out)
}

/// Builds a code with [`build_encoding`] and runs [`cr_allocate_with_code`].
pub fn cr_allocate(tree: &RegularTree, s: usize, d: usize, seed: u64) -> Result<Assignment> {
    if s >= tree.n() {
        return Err(Error::InvalidParameters(format!(
            "straggler tolerance s={s} must be below n={}",
            tree.n()
        )));
    }
    let code = build_encoding(tree.n(), s, seed)?;
    cr_allocate_with_code(tree, code, d)
}

/// Layer-by-layer placement of `d` unit-weight points with a given code; the
/// same code serves every sibling group.
pub fn cr_allocate_with_code(tree: &RegularTree, code: EncodingMatrix, d: usize) -> Result<Assignment> {
    if code.n() != tree.n() {
        return Err(Error::InvalidParameters(format!(
            "code is for {} workers but the tree has fan-out {}",
            code.n(),
            tree.n()
        )));
    }
    let s = code.s();
    let g = granularity(tree.n(), tree.layers(), s)?;
    if d == 0 || d % g != 0 {
        return Err(Error::Granularity { d, granularity: g });
    }
    let load = r_cr(tree.n(), tree.layers(), s)?;
    let local_points = load.points_of(d).expect("granularity makes r d integral");

    let count = tree.num_nodes();
    let mut local = vec![Vec::new(); count];
    let mut subtree_sets = vec![Vec::new(); count];
    let mut remainders = vec![Vec::new(); count];
    let everything = vec![WeightedSlice::new(0, d, 1.0)];
    subtree_sets[0] = everything.clone();
    remainders[0] = everything;

    for parent in tree.parents() {
        let shares = comp_alloc(&remainders[tree.offset(parent)], &code)?;
        for (child, share) in tree.children(parent).into_iter().zip(shares) {
            let (mut mine, mut rest) = split_points(&share, local_points);
            if point_count(&mine) != local_points {
                return Err(Error::InvalidParameters(format!(
                    "node {child} received {} points, fewer than its load {local_points}",
                    point_count(&share)
                )));
            }
            if tree.is_leaf(child) && !rest.is_empty() {
                return Err(Error::InvalidParameters(format!(
                    "leaf {child} was left with {} unassigned points",
                    point_count(&rest)
                )));
            }
            normalize(&mut mine);
            normalize(&mut rest);
            let offset = tree.offset(child);
            local[offset] = mine;
            remainders[offset] = rest;
            subtree_sets[offset] = share;
        }
    }

    Ok(Assignment {
        tree: tree.clone(),
        code,
        d,
        load,
        local_points,
        local,
        subtree_sets,
        remainders,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Integer simulation of every split in the recursion, independent of the rational formula.
    fn splits_integral(n: usize, layers: usize, s: usize, d: usize) -> bool {
        // local load from the closed form sum, checked for integrality first
        let mut denom_sum = 0u128; // sum (n/(s+1))^l  =  sum n^l (s+1)^(L-l) / (s+1)^L
        for l in 1..=layers {
            denom_sum += (n as u128).pow(l as u32) * ((s + 1) as u128).pow((layers - l) as u32);
        }
        let scale = ((s + 1) as u128).pow(layers as u32);
        let num = d as u128 * scale;
        if num % denom_sum != 0 {
            return false;
        }
        let local = num / denom_sum;
        let mut remainder = d as u128;
        for layer in 1..=layers {
            if remainder % n as u128 != 0 {
                return false;
            }
            let subtree = remainder / n as u128 * (s + 1) as u128;
            if subtree < local {
                return false;
            }
            remainder = subtree - local;
            if layer == layers && remainder != 0 {
                return false;
            }
        }
        true
    }

    fn brute_granularity(n: usize, layers: usize, s: usize, limit: usize) -> Option<usize> {
        (1..=limit).find(|&d| splits_integral(n, layers, s, d))
    }

    #[test]
    fn load_formulas() {
        assert_eq!(r_cr(3, 2, 1).unwrap(), LoadFraction::new(4, 15));
        assert_eq!(r_cr(12, 2, 1).unwrap(), LoadFraction::new(1, 42));
        assert_eq!(r_gc(3, 1).unwrap(), LoadFraction::new(2, 3));
        assert_eq!(r_gc(7, 0).unwrap(), LoadFraction::new(1, 7));
        assert_eq!(r_gc(156, 13).unwrap(), LoadFraction::new(7, 78));
        for n in 1..=20 {
            for s in 0..n {
                assert_eq!(r_cr(n, 1, s).unwrap(), r_gc(n, s).unwrap());
            }
        }
        assert!(r_cr(3, 2, 3).is_err());
        assert!(r_gc(3, 3).is_err());
    }

    #[test]
    fn granularity_matches_brute_force() {
        assert_eq!(granularity(3, 2, 1).unwrap(), 15);
        assert_eq!(granularity(3, 1, 1).unwrap(), 3);
        assert_eq!(granularity(2, 1, 0).unwrap(), 2);
        assert_eq!(brute_granularity(3, 2, 1, 100), Some(15));
        for (n, layers, s) in [(2, 2, 0), (2, 2, 1), (3, 3, 1), (4, 2, 1), (4, 2, 2), (5, 2, 3), (6, 1, 2)] {
            let g = granularity(n, layers, s).unwrap();
            assert_eq!(brute_granularity(n, layers, s, 5000), Some(g), "({n},{layers},{s})");
            assert!(splits_integral(n, layers, s, 3 * g));
        }
    }

    #[test]
    fn comp_alloc_with_example_code() {
        let code = EncodingMatrix::three_one_example();
        let data = vec![WeightedSlice::new(0, 15, 1.0)];
        let shares = comp_alloc(&data, &code).unwrap();
        assert_eq!(
            shares[0],
            vec![WeightedSlice::new(0, 5, 0.5), WeightedSlice::new(5, 10, 1.0)]
        );
        assert_eq!(
            shares[1],
            vec![WeightedSlice::new(5, 10, 1.0), WeightedSlice::new(10, 15, -1.0)]
        );
        assert_eq!(
            shares[2],
            vec![WeightedSlice::new(0, 5, 0.5), WeightedSlice::new(10, 15, 1.0)]
        );
    }

    #[test]
    fn comp_alloc_identity_and_weight_composition() {
        let shares = comp_alloc(&[WeightedSlice::new(0, 9, 1.0)], &EncodingMatrix::identity(3)).unwrap();
        assert_eq!(shares[1], vec![WeightedSlice::new(3, 6, 1.0)]);

        let code = EncodingMatrix::three_one_example();
        let data = vec![WeightedSlice::new(0, 6, 0.5)];
        let shares = comp_alloc(&data, &code).unwrap();
        // worker 2 (0-based 1) takes part 3 with coefficient -1
        assert_eq!(shares[1][1], WeightedSlice::new(4, 6, -0.5));
        assert!(matches!(
            comp_alloc(&[WeightedSlice::new(0, 10, 1.0)], &code),
            Err(Error::Divisibility { points: 10, parts: 3 })
        ));
    }

    #[test]
    fn three_two_tree_placement() {
        let tree = RegularTree::new(3, 2).unwrap();
        let asg = cr_allocate_with_code(&tree, EncodingMatrix::three_one_example(), 15).unwrap();
        assert_eq!(asg.local_points(), 4);
        for node in tree.workers() {
            assert_eq!(point_count(asg.local(node)), 4, "{node}");
        }
        let n11 = NodeId::new(1, 1);
        assert_eq!(asg.local(n11), &[WeightedSlice::new(0, 4, 0.5)]);
        assert_eq!(point_count(asg.remainder(n11)), 6);
        // remainder {4:1/2, 5..10:1} splits into {4,5},{6,7},{8,9}; node (2,1) gets
        // half of the first part and all of the second
        assert_eq!(
            asg.local(NodeId::new(2, 1)),
            &[
                WeightedSlice::new(4, 5, 0.25),
                WeightedSlice::new(5, 6, 0.5),
                WeightedSlice::new(6, 8, 1.0),
            ]
        );
        assert_eq!(
            asg.local(NodeId::new(2, 2)),
            &[WeightedSlice::new(6, 8, 1.0), WeightedSlice::new(8, 10, -1.0)]
        );
    }

    #[test]
    fn uncoded_tree_partitions_data() {
        let tree = RegularTree::new(3, 2).unwrap();
        let asg = cr_allocate(&tree, 0, 24, 1).unwrap();
        let mut seen = vec![0usize; 24];
        for node in tree.workers() {
            assert_eq!(point_count(asg.local(node)), 2);
            for slice in asg.local(node) {
                assert_eq!(slice.weight, 1.0);
                for p in slice.start..slice.end {
                    seen[p] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn thirty_points_gives_eight_each() {
        let tree = RegularTree::new(3, 2).unwrap();
        let asg = cr_allocate(&tree, 1, 30, 4).unwrap();
        assert!(tree.workers().all(|v| point_count(asg.local(v)) == 8));
    }

    #[test]
    fn rejects_bad_sizes() {
        let tree = RegularTree::new(3, 2).unwrap();
        assert!(matches!(
            cr_allocate(&tree, 1, 20, 0),
            Err(Error::Granularity { d: 20, granularity: 15 })
        ));
        assert!(cr_allocate(&tree, 3, 15, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let tree = RegularTree::new(3, 2).unwrap();
        let asg = cr_allocate_with_code(&tree, EncodingMatrix::three_one_example(), 15).unwrap();
        let parsed = read_assignment_csv(&asg.to_csv().unwrap()).unwrap();
        assert_eq!(parsed.len(), 12);
        for node in tree.workers() {
            assert_eq!(parsed[&node].as_slice(), asg.local(node));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn equal_load_and_layer_one_redundancy(
                n in 2usize..5, layers in 1usize..4, s_pick in 0usize..4, mult in 1usize..3, seed in 0u64..1000
            ) {
                let s = s_pick % n;
                let g = granularity(n, layers, s).unwrap();
                prop_assume!(g * mult <= 20_000);
                let d = g * mult;
                let tree = RegularTree::new(n, layers).unwrap();
                let asg = cr_allocate(&tree, s, d, seed).unwrap();
                let r = r_cr(n, layers, s).unwrap();
                for node in tree.workers() {
                    prop_assert_eq!(Some(point_count(asg.local(node))), r.points_of(d));
                    let slices = asg.local(node);
                    for w in slices.windows(2) {
                        prop_assert!(w[0].end <= w[1].start);
                    }
                }
                let mut cover = vec![0usize; d];
                for child in tree.layer_nodes(1) {
                    for slice in asg.subtree_set(child) {
                        for p in slice.start..slice.end {
                            cover[p] += 1;
                        }
                    }
                }
                prop_assert!(cover.iter().all(|&c| c == s + 1));
            }
        }
    }
}
