//! Timing-free execution of one aggregation round.
//!
//! Every scheme reduces to weighted partial gradients combined along some
//! topology: coded tree aggregation, single-layer gradient coding, the
//! uncoded master-worker sum, ring allreduce and the partial sum used by the
//! straggler-dropping SGD baseline. Stragglers are simply absent here; how
//! long anything takes is the latency module's business.

use std::ops::{Deref, Range};

use rayon::prelude::*;

use crate::allocation::{cr_allocate, Assignment, WeightedSlice};
use crate::codes::decode_row;
use crate::error::{Error, Result};
use crate::topology::{NodeId, RegularTree, StragglerPattern};

/// A dense gradient (or coded partial gradient) of length `p`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradientVec(Vec<f64>);

impl GradientVec {
    pub fn zeros(dim: usize) -> Self {
        GradientVec(vec![0.0; dim])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, factor: f64, other: &[f64]) {
        debug_assert_eq!(self.0.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += factor * b;
        }
    }

    pub fn inf_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `|self - other|_inf / max(|other|_inf, 1e-300)`.
    pub fn rel_inf_error(&self, reference: &[f64]) -> f64 {
        let diff = self
            .0
            .iter()
            .zip(reference)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        diff / scale.max(1e-300)
    }
}

impl Deref for GradientVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for GradientVec {
    fn from(v: Vec<f64>) -> Self {
        GradientVec(v)
    }
}

/// Weighted sum of per-point loss gradients over a list of slices.
///
/// Implementations must be additive over disjoint slice lists and homogeneous
/// in the slice weights.
pub trait GradientOracle: Sync {
    /// Gradient length `p`.
    fn dim(&self) -> usize;

    /// Dataset size `d`.
    fn num_points(&self) -> usize;

    fn gradient(&self, theta: &[f64], slices: &[WeightedSlice]) -> GradientVec;
}

/// `grad l(theta; x_j) := e_j`, so the aggregate exposes every point's net coefficient.
#[derive(Clone, Copy, Debug)]
pub struct IdentityOracle {
    pub d: usize,
}

impl GradientOracle for IdentityOracle {
    fn dim(&self) -> usize {
        self.d
    }

    fn num_points(&self) -> usize {
        self.d
    }

    fn gradient(&self, _theta: &[f64], slices: &[WeightedSlice]) -> GradientVec {
        let mut g = GradientVec::zeros(self.d);
        for slice in slices {
            for v in &mut g.0[slice.start..slice.end] {
                *v += slice.weight;
            }
        }
        g
    }
}

/// Recovers the full gradient at the master of a coded tree.
///
/// Leaves send their local coded gradient. An internal node decodes the first
/// `n - s` responsive children (child-index order), adds its own coded
/// gradient and sends the sum up. The master decodes its children only.
pub fn cr_execute<O: GradientOracle + ?Sized>(
    assignment: &Assignment,
    pattern: &StragglerPattern,
    oracle: &O,
    theta: &[f64],
) -> Result<GradientVec> {
    let tree = assignment.tree();
    pattern.validate(tree, assignment.s())?;
    node_message(assignment, pattern, oracle, theta, NodeId::MASTER)
}

fn node_message<O: GradientOracle + ?Sized>(
    assignment: &Assignment,
    pattern: &StragglerPattern,
    oracle: &O,
    theta: &[f64],
    node: NodeId,
) -> Result<GradientVec> {
    let tree = assignment.tree();
    let mut message = if node.is_master() {
        GradientVec::zeros(oracle.dim())
    } else {
        oracle.gradient(theta, assignment.local(node))
    };
    if tree.is_leaf(node) {
        return Ok(message);
    }
    let required = tree.n() - assignment.s();
    let survivors = pattern.survivors(tree, node);
    if survivors.len() < required {
        return Err(Error::Unrecoverable {
            parent: node,
            survivors: survivors.len(),
            required,
        });
    }
    let kept = &survivors[..required];
    let positions: Vec<usize> = kept.iter().map(|&c| tree.child_position(c)).collect();
    let row = decode_row(assignment.code(), &positions)?;
    let child_messages = kept
        .par_iter()
        .map(|&child| node_message(assignment, pattern, oracle, theta, child))
        .collect::<Result<Vec<_>>>()?;
    for (pos, child_msg) in positions.iter().zip(&child_messages) {
        message.add_scaled(row.coefficients()[*pos], child_msg);
    }
    Ok(message)
}

/// Gradient-coding placement: the coded tree allocation on an `(N, 1)` tree.
pub fn gc_allocate(workers: usize, stragglers: usize, d: usize, seed: u64) -> Result<Assignment> {
    cr_allocate(&RegularTree::new(workers, 1)?, stragglers, d, seed)
}

/// Master-worker gradient coding; `stragglers` are 0-based worker positions.
pub fn gc_execute<O: GradientOracle + ?Sized>(
    assignment: &Assignment,
    stragglers: &[usize],
    oracle: &O,
    theta: &[f64],
) -> Result<GradientVec> {
    let tree = assignment.tree();
    if tree.layers() != 1 {
        return Err(Error::InvalidParameters(
            "gradient coding needs a single-layer assignment".into(),
        ));
    }
    let pattern = StragglerPattern::from_nodes(
        tree,
        stragglers.iter().map(|&w| NodeId::new(1, w + 1)),
    )?;
    cr_execute(assignment, &pattern, oracle, theta)
}

/// `d` points split into `N` contiguous unit-weight blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct UncodedPartition {
    parts: Vec<WeightedSlice>,
}

impl UncodedPartition {
    pub fn new(workers: usize, d: usize) -> Result<Self> {
        if workers == 0 || d % workers != 0 || d == 0 {
            return Err(Error::Divisibility {
                points: d,
                parts: workers,
            });
        }
        let size = d / workers;
        Ok(UncodedPartition {
            parts: (0..workers)
                .map(|w| WeightedSlice::new(w * size, (w + 1) * size, 1.0))
                .collect(),
        })
    }

    pub fn workers(&self) -> usize {
        self.parts.len()
    }

    pub fn part(&self, worker: usize) -> WeightedSlice {
        self.parts[worker]
    }

    fn partials<O: GradientOracle + ?Sized>(&self, oracle: &O, theta: &[f64]) -> Vec<GradientVec> {
        self.parts
            .par_iter()
            .map(|p| oracle.gradient(theta, std::slice::from_ref(p)))
            .collect()
    }
}

fn sum_in_order(dim: usize, partials: impl IntoIterator<Item = GradientVec>) -> GradientVec {
    let mut total = GradientVec::zeros(dim);
    for g in partials {
        total.add_scaled(1.0, &g);
    }
    total
}

/// Uncoded master-worker: the sum of all `N` partial gradients.
pub fn umw_execute<O: GradientOracle + ?Sized>(
    partition: &UncodedPartition,
    oracle: &O,
    theta: &[f64],
) -> GradientVec {
    sum_in_order(oracle.dim(), partition.partials(oracle, theta))
}

/// Sum of the partials from every worker not listed in `stragglers`.
pub fn sgd_execute<O: GradientOracle + ?Sized>(
    partition: &UncodedPartition,
    s: usize,
    stragglers: &[usize],
    oracle: &O,
    theta: &[f64],
) -> Result<GradientVec> {
    let n = partition.workers();
    let mut ignored = stragglers.to_vec();
    ignored.sort_unstable();
    ignored.dedup();
    if ignored.len() != stragglers.len() || ignored.len() != s || s >= n {
        return Err(Error::InvalidPattern(format!(
            "expected {s} distinct stragglers out of {n} workers, got {stragglers:?}"
        )));
    }
    if let Some(&bad) = ignored.iter().find(|&&w| w >= n) {
        return Err(Error::InvalidPattern(format!("worker {bad} out of range")));
    }
    let kept: Vec<WeightedSlice> = (0..n)
        .filter(|w| ignored.binary_search(w).is_err())
        .map(|w| partition.part(w))
        .collect();
    let partials: Vec<GradientVec> = kept
        .par_iter()
        .map(|p| oracle.gradient(theta, std::slice::from_ref(p)))
        .collect();
    Ok(sum_in_order(oracle.dim(), partials))
}

/// Even split of `0..p` into `parts` contiguous ranges (the first `p % parts` one longer).
pub fn segment_bounds(p: usize, parts: usize) -> Vec<Range<usize>> {
    let base = p / parts;
    let extra = p % parts;
    let mut start = 0;
    (0..parts)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Ring reduce-scatter in `N - 1` synchronous rounds: in round `k` worker `i`
/// forwards segment `i - k (mod N)` to worker `i + 1`, which adds it into its
/// own copy. Returns the index of the fully reduced segment each worker ends
/// up holding (worker `i` holds segment `i + 1 mod N`).
pub fn ring_reduce_scatter(buffers: &mut [Vec<f64>]) -> Vec<usize> {
    let n = buffers.len();
    let bounds = segment_bounds(buffers.first().map_or(0, Vec::len), n);
    for round in 0..n.saturating_sub(1) {
        let outgoing: Vec<(usize, Vec<f64>)> = (0..n)
            .map(|i| {
                let seg = (i + n - round % n) % n;
                (seg, buffers[i][bounds[seg].clone()].to_vec())
            })
            .collect();
        for (i, (seg, data)) in outgoing.into_iter().enumerate() {
            let dst = (i + 1) % n;
            for (slot, v) in buffers[dst][bounds[seg].clone()].iter_mut().zip(data) {
                *slot += v;
            }
        }
    }
    (0..n).map(|i| (i + 1) % n).collect()
}

/// Ring allgather after [`ring_reduce_scatter`]: in round `k` worker `i`
/// forwards segment `i + 1 - k (mod N)`, which the receiver overwrites.
pub fn ring_allgather(buffers: &mut [Vec<f64>]) {
    let n = buffers.len();
    let bounds = segment_bounds(buffers.first().map_or(0, Vec::len), n);
    for round in 0..n.saturating_sub(1) {
        let outgoing: Vec<(usize, Vec<f64>)> = (0..n)
            .map(|i| {
                let seg = (i + 1 + n - round % n) % n;
                (seg, buffers[i][bounds[seg].clone()].to_vec())
            })
            .collect();
        for (i, (seg, data)) in outgoing.into_iter().enumerate() {
            let dst = (i + 1) % n;
            buffers[dst][bounds[seg].clone()].copy_from_slice(&data);
        }
    }
}

/// Ring allreduce over uncoded partials; returns every worker's copy of the sum.
pub fn rar_execute<O: GradientOracle + ?Sized>(
    partition: &UncodedPartition,
    oracle: &O,
    theta: &[f64],
) -> Vec<GradientVec> {
    let mut buffers: Vec<Vec<f64>> = partition
        .partials(oracle, theta)
        .into_iter()
        .map(GradientVec::into_inner)
        .collect();
    ring_reduce_scatter(&mut buffers);
    ring_allgather(&mut buffers);
    buffers.into_iter().map(GradientVec::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{cr_allocate_with_code, WeightedSlice};
    use crate::codes::EncodingMatrix;
    use crate::topology::enumerate_patterns;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Each point carries a fixed random vector; the oracle is linear in the weights.
    struct TableOracle {
        rows: Vec<Vec<f64>>,
    }

    impl TableOracle {
        fn random(d: usize, p: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            TableOracle {
                rows: (0..d)
                    .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
            }
        }

        fn point(&self, j: usize) -> &[f64] {
            &self.rows[j]
        }
    }

    impl GradientOracle for TableOracle {
        fn dim(&self) -> usize {
            self.rows[0].len()
        }
        fn num_points(&self) -> usize {
            self.rows.len()
        }
        fn gradient(&self, _theta: &[f64], slices: &[WeightedSlice]) -> GradientVec {
            let mut g = GradientVec::zeros(self.dim());
            for s in slices {
                for j in s.start..s.end {
                    g.add_scaled(s.weight, &self.rows[j]);
                }
            }
            g
        }
    }

    fn full_sum(oracle: &TableOracle) -> Vec<f64> {
        let mut g = vec![0.0; oracle.dim()];
        for j in 0..oracle.num_points() {
            for (a, b) in g.iter_mut().zip(oracle.point(j)) {
                *a += b;
            }
        }
        g
    }

    #[test]
    fn worked_example_decode_path() {
        let tree = RegularTree::new(3, 2).unwrap();
        let asg = cr_allocate_with_code(&tree, EncodingMatrix::three_one_example(), 15).unwrap();
        let oracle = TableOracle::random(15, 4, 1);
        // master hears from (1,1) and (1,3); layer 2 complete
        let pattern = StragglerPattern::from_nodes(&tree, [NodeId::new(1, 2)]).unwrap();
        let g = cr_execute(&asg, &pattern, &oracle, &[]).unwrap();
        assert!(g.rel_inf_error(&full_sum(&oracle)) < 1e-12);
    }

    #[test]
    fn uncoded_tree_is_plain_sum() {
        let tree = RegularTree::new(2, 3).unwrap();
        let asg = cr_allocate(&tree, 0, 28, 0).unwrap();
        let oracle = TableOracle::random(28, 3, 2);
        let g = cr_execute(&asg, &StragglerPattern::new(), &oracle, &[]).unwrap();
        assert!(g.rel_inf_error(&full_sum(&oracle)) < 1e-12);
    }

    #[test]
    fn identity_oracle_random_patterns_on_four_two_tree() {
        let tree = RegularTree::new(4, 2).unwrap();
        let d = crate::allocation::granularity(4, 2, 1).unwrap() * 2;
        let asg = cr_allocate(&tree, 1, d, 9).unwrap();
        let oracle = IdentityOracle { d };
        let patterns = enumerate_patterns(&tree, 1, 50, 17).unwrap();
        assert_eq!(patterns.len(), 50);
        for pattern in &patterns {
            let g = cr_execute(&asg, pattern, &oracle, &[]).unwrap();
            assert!(g.iter().all(|v| (v - 1.0).abs() <= 1e-9), "{pattern:?}");
        }
    }

    #[test]
    fn too_many_stragglers_names_parent() {
        let tree = RegularTree::new(3, 2).unwrap();
        let asg = cr_allocate(&tree, 1, 15, 0).unwrap();
        let pattern =
            StragglerPattern::from_nodes(&tree, [NodeId::new(2, 4), NodeId::new(2, 6)]).unwrap();
        match cr_execute(&asg, &pattern, &IdentityOracle { d: 15 }, &[]) {
            Err(Error::Unrecoverable { parent, .. }) => assert_eq!(parent, NodeId::new(1, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradient_coding_example_combination() {
        let code = EncodingMatrix::three_one_example();
        let asg = cr_allocate_with_code(&RegularTree::new(3, 1).unwrap(), code, 3).unwrap();
        let oracle = TableOracle::random(3, 2, 5);
        let g = gc_execute(&asg, &[2], &oracle, &[]).unwrap();
        // 2 (1/2 g1 + g2) - (g2 - g3)
        let (g1, g2, g3) = (oracle.point(0), oracle.point(1), oracle.point(2));
        let expected: Vec<f64> = (0..2)
            .map(|k| 2.0 * (0.5 * g1[k] + g2[k]) - (g2[k] - g3[k]))
            .collect();
        assert!(g.rel_inf_error(&expected) < 1e-12);
        assert!(g.rel_inf_error(&full_sum(&oracle)) < 1e-12);
        assert!(gc_execute(&asg, &[0, 1], &oracle, &[]).is_err());
    }

    #[test]
    fn gc_matches_single_layer_tree_and_identity() {
        let asg = gc_allocate(6, 2, 12, 3).unwrap();
        let oracle = IdentityOracle { d: 12 };
        for stragglers in [vec![], vec![0], vec![1, 4], vec![5, 0]] {
            let g = gc_execute(&asg, &stragglers, &oracle, &[]).unwrap();
            assert!(g.iter().all(|v| (v - 1.0).abs() <= 1e-9));
        }
        let plain = gc_allocate(4, 0, 8, 0).unwrap();
        let table = TableOracle::random(8, 3, 8);
        let g = gc_execute(&plain, &[], &table, &[]).unwrap();
        assert!(g.rel_inf_error(&full_sum(&table)) < 1e-12);
    }

    #[test]
    fn ring_reduce_scatter_three_workers() {
        let mut buffers = vec![
            vec![1.0, 2.0, 3.0],
            vec![10.0, 20.0, 30.0],
            vec![100.0, 200.0, 300.0],
        ];
        let owned = ring_reduce_scatter(&mut buffers);
        assert_eq!(owned, vec![1, 2, 0]);
        let totals = [111.0, 222.0, 333.0];
        for (w, &seg) in owned.iter().enumerate() {
            assert_eq!(buffers[w][seg], totals[seg]);
        }
        ring_allgather(&mut buffers);
        assert!(buffers.iter().all(|b| b == &totals));
    }

    #[test]
    fn ring_with_more_workers_than_coordinates() {
        let mut buffers: Vec<Vec<f64>> = (0..5).map(|w| vec![w as f64, 1.0]).collect();
        ring_reduce_scatter(&mut buffers);
        ring_allgather(&mut buffers);
        assert!(buffers.iter().all(|b| b == &[10.0, 5.0]));
    }

    #[test]
    fn uncoded_schemes_agree() {
        let oracle = TableOracle::random(36, 7, 12);
        let part = UncodedPartition::new(6, 36).unwrap();
        let umw = umw_execute(&part, &oracle, &[]);
        assert!(umw.rel_inf_error(&full_sum(&oracle)) < 1e-12);
        for copy in rar_execute(&part, &oracle, &[]) {
            assert!(copy.rel_inf_error(&umw) < 1e-12);
        }
        let single = UncodedPartition::new(1, 36).unwrap();
        assert_eq!(rar_execute(&single, &oracle, &[]), vec![umw_execute(&single, &oracle, &[])]);
        assert!(UncodedPartition::new(5, 36).is_err());
    }

    #[test]
    fn sgd_drops_straggler_partials() {
        let oracle = TableOracle::random(9, 3, 4);
        let part = UncodedPartition::new(3, 9).unwrap();
        assert_eq!(
            sgd_execute(&part, 0, &[], &oracle, &[]).unwrap(),
            umw_execute(&part, &oracle, &[])
        );
        let g = sgd_execute(&part, 1, &[1], &oracle, &[]).unwrap();
        let missing = oracle.gradient(&[], &[part.part(1)]);
        let mut expected = GradientVec::from(full_sum(&oracle));
        expected.add_scaled(-1.0, &missing);
        assert!(g.rel_inf_error(&expected) < 1e-12);
        assert!(sgd_execute(&part, 1, &[], &oracle, &[]).is_err());
        assert!(sgd_execute(&part, 1, &[3], &oracle, &[]).is_err());
    }

    #[test]
    fn sgd_counts_partials() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        struct Counting(AtomicUsize);
        impl GradientOracle for Counting {
            fn dim(&self) -> usize {
                1
            }
            fn num_points(&self) -> usize {
                156
            }
            fn gradient(&self, _: &[f64], _: &[WeightedSlice]) -> GradientVec {
                self.0.fetch_add(1, Ordering::SeqCst);
                GradientVec::from(vec![1.0])
            }
        }
        let oracle = Counting(AtomicUsize::new(0));
        let part = UncodedPartition::new(156, 156).unwrap();
        let stragglers: Vec<usize> = (0..13).map(|k| k * 12).collect();
        let g = sgd_execute(&part, 13, &stragglers, &oracle, &[]).unwrap();
        assert_eq!(oracle.0.load(Ordering::SeqCst), 143);
        assert_eq!(g[0], 143.0);
    }

    #[test]
    fn segment_bounds_cover() {
        let b = segment_bounds(7, 3);
        assert_eq!(b, vec![0..3, 3..5, 5..7]);
        assert_eq!(segment_bounds(2, 4).iter().map(|r| r.len()).sum::<usize>(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn pattern_invariance(seed in 0u64..500, pick in 0usize..256) {
                let tree = RegularTree::new(3, 2).unwrap();
                let asg = cr_allocate(&tree, 1, 30, seed).unwrap();
                let oracle = TableOracle::random(30, 5, seed);
                let patterns = enumerate_patterns(&tree, 1, 1000, 0).unwrap();
                let base = cr_execute(&asg, &StragglerPattern::new(), &oracle, &[]).unwrap();
                let g = cr_execute(&asg, &patterns[pick], &oracle, &[]).unwrap();
                prop_assert!(g.rel_inf_error(&base) < 1e-9);
                prop_assert!(base.rel_inf_error(&full_sum(&oracle)) < 1e-9);
            }
        }
    }
}
