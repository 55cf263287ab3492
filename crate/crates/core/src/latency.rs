//! Iteration-time simulation.
//!
//! Worker `i` holding `d_i` points finishes its local gradient after
//! `a d_i + Exp(mu / d_i)` time units. Every parent has a single receive
//! port: a ready child occupies it for `t_c`, contending children are served
//! in order of readiness (ties by child index), and a parent stops listening
//! once it has the messages it needs. An internal node of the coded tree may
//! receive while it computes; it sends once both are finished.
//!
//! Ring allreduce uses a barrier model: the slowest worker plus
//! `2 (N - 1)` segment transfers of `t_c / N` each.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{r_cr, r_gc, LoadFraction};
use crate::error::{Error, Result};
use crate::topology::{NodeId, RegularTree, StragglerPattern};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyConfig {
    /// Deterministic time per data point.
    pub a: f64,
    /// Exponential rate scale; the random part for `d_i` points has mean `d_i / mu`.
    pub mu: f64,
    /// Time for one child-to-parent message.
    pub t_c: f64,
    /// Dataset size.
    pub d: usize,
    pub seed: u64,
}

impl LatencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0) || !self.a.is_finite() {
            return Err(Error::InvalidParameters(format!("shift a={} must be >= 0", self.a)));
        }
        if !(self.mu > 0.0) {
            return Err(Error::InvalidParameters(format!("rate mu={} must be > 0", self.mu)));
        }
        if !(self.t_c >= 0.0) || !self.t_c.is_finite() {
            return Err(Error::InvalidParameters(format!("t_c={} must be >= 0", self.t_c)));
        }
        if self.d == 0 {
            return Err(Error::InvalidParameters("dataset size must be positive".into()));
        }
        Ok(())
    }
}

/// One shifted-exponential computation time for `points` data points.
pub fn sample_comp_time<R: Rng + ?Sized>(cfg: &LatencyConfig, points: usize, rng: &mut R) -> f64 {
    assert!(points >= 1, "a worker needs at least one point");
    let load = points as f64;
    let tail = Exp::new(cfg.mu / load).expect("positive rate");
    cfg.a * load + tail.sample(rng)
}

/// `H_n = 1 + 1/2 + ... + 1/n`, with `H_0 = 0`.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

/// Mean of the `(n - s)`-th smallest of `n` i.i.d. computation times at load `r d`:
/// `(r d / mu)(H_n - H_s) + a r d`.
pub fn expected_order_stat(cfg: &LatencyConfig, n: usize, s: usize, r: LoadFraction) -> Result<f64> {
    if s >= n {
        return Err(Error::InvalidParameters(format!("need s < n, got n={n}, s={s}")));
    }
    let rd = r.to_f64() * cfg.d as f64;
    Ok(rd / cfg.mu * (harmonic(n) - harmonic(s)) + cfg.a * rd)
}

/// Closed-form `(lower, upper)` envelope for the coded tree with `alpha = s/n`:
/// both share `(r d / mu) ln(1/alpha) + a r d`; the communication term is
/// `(n (1 - alpha) + L - 1) t_c` below and `n L t_c` above.
pub fn cr_bounds(cfg: &LatencyConfig, n: usize, layers: usize, s: usize) -> Result<(f64, f64)> {
    if s == 0 || s >= n {
        return Err(Error::InvalidParameters(format!(
            "bounds need 0 < s/n < 1, got n={n}, s={s}"
        )));
    }
    let alpha = s as f64 / n as f64;
    let rd = r_cr(n, layers, s)?.to_f64() * cfg.d as f64;
    let compute = rd / cfg.mu * (1.0 / alpha).ln() + cfg.a * rd;
    let lower = compute + (n as f64 * (1.0 - alpha) + layers as f64 - 1.0) * cfg.t_c;
    let upper = compute + (n * layers) as f64 * cfg.t_c;
    Ok((lower, upper))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Cr,
    Gc,
    Umw,
    Sgd,
    Rar,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::Cr,
        SchemeKind::Gc,
        SchemeKind::Umw,
        SchemeKind::Sgd,
        SchemeKind::Rar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Cr => "cr",
            SchemeKind::Gc => "gc",
            SchemeKind::Umw => "umw",
            SchemeKind::Sgd => "sgd",
            SchemeKind::Rar => "rar",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cr" | "codedreduce" => Ok(SchemeKind::Cr),
            "gc" => Ok(SchemeKind::Gc),
            "umw" => Ok(SchemeKind::Umw),
            "sgd" => Ok(SchemeKind::Sgd),
            "rar" => Ok(SchemeKind::Rar),
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

/// An aggregation scheme with its size parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    CodedReduce { n: usize, layers: usize, s: usize },
    GradientCoding { workers: usize, stragglers: usize },
    Uncoded { workers: usize },
    Sgd { workers: usize, stragglers: usize },
    RingAllReduce { workers: usize },
}

impl Scheme {
    pub fn kind(&self) -> SchemeKind {
        match self {
            Scheme::CodedReduce { .. } => SchemeKind::Cr,
            Scheme::GradientCoding { .. } => SchemeKind::Gc,
            Scheme::Uncoded { .. } => SchemeKind::Umw,
            Scheme::Sgd { .. } => SchemeKind::Sgd,
            Scheme::RingAllReduce { .. } => SchemeKind::Rar,
        }
    }

    /// Per-worker fraction of the dataset.
    pub fn load(&self) -> Result<LoadFraction> {
        match *self {
            Scheme::CodedReduce { n, layers, s } => r_cr(n, layers, s),
            Scheme::GradientCoding {
                workers,
                stragglers,
            } => r_gc(workers, stragglers),
            Scheme::Uncoded { workers }
            | Scheme::Sgd { workers, .. }
            | Scheme::RingAllReduce { workers } => r_gc(workers, 0),
        }
    }

    /// Integral per-worker point count for a dataset of `d` points.
    pub fn local_points(&self, d: usize) -> Result<usize> {
        let load = self.load()?;
        load.points_of(d).ok_or_else(|| {
            Error::InvalidParameters(format!(
                "{}: load {load} of d={d} is not a whole number of points",
                self.kind()
            ))
        })
    }

    /// Aggregation tree and per-parent message quota.
    fn topology(&self) -> Result<(RegularTree, usize)> {
        match *self {
            Scheme::CodedReduce { n, layers, s } => {
                if s >= n {
                    return Err(Error::InvalidParameters(format!("need s < n, got n={n}, s={s}")));
                }
                Ok((RegularTree::new(n, layers)?, n - s))
            }
            Scheme::GradientCoding {
                workers,
                stragglers,
            }
            | Scheme::Sgd {
                workers,
                stragglers,
            } => {
                if stragglers >= workers {
                    return Err(Error::InvalidParameters(format!(
                        "need S < N, got N={workers}, S={stragglers}"
                    )));
                }
                Ok((RegularTree::new(workers, 1)?, workers - stragglers))
            }
            Scheme::Uncoded { workers } | Scheme::RingAllReduce { workers } => {
                Ok((RegularTree::new(workers, 1)?, workers))
            }
        }
    }

    pub fn num_workers(&self) -> usize {
        match *self {
            Scheme::CodedReduce { n, layers, .. } => {
                RegularTree::new(n, layers).map_or(0, |t| t.num_workers())
            }
            Scheme::GradientCoding { workers, .. }
            | Scheme::Uncoded { workers }
            | Scheme::Sgd { workers, .. }
            | Scheme::RingAllReduce { workers } => workers,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// Local gradient computation `[0, done]`.
    Compute,
    /// A parent's port serving one child message.
    Receive { from: NodeId },
    /// From the moment a node is ready to send until its message is consumed
    /// (zero length when the parent never takes it).
    Send { accepted: bool },
    /// Ring allreduce exchange after the barrier.
    Ring,
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::Compute => "compute",
            EventKind::Receive { .. } => "receive",
            EventKind::Send { .. } => "send",
            EventKind::Ring => "ring",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimEvent {
    pub node: NodeId,
    pub kind: EventKind,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutcome {
    pub completion_time: f64,
    /// Per worker, in tree-offset order (master excluded).
    pub compute_times: Vec<f64>,
    /// Whether each node's message was consumed by its parent (offset-indexed, master `false`).
    accepted: Vec<bool>,
    tree: RegularTree,
    pub events: Vec<SimEvent>,
}

impl SimOutcome {
    pub fn tree(&self) -> &RegularTree {
        &self.tree
    }

    pub fn was_accepted(&self, node: NodeId) -> bool {
        self.accepted[self.tree.offset(node)]
    }

    /// The children each contributing parent did not wait for. Parents whose
    /// own message was never consumed are left without stragglers: the round
    /// ended before they mattered.
    pub fn straggler_pattern(&self) -> StragglerPattern {
        let tree = &self.tree;
        let contributes = |p: NodeId| p.is_master() || self.was_accepted(p);
        StragglerPattern::from_nodes(
            tree,
            tree.workers().filter(|&v| {
                !self.was_accepted(v) && contributes(tree.parent(v).expect("worker has a parent"))
            }),
        )
        .expect("workers belong to the tree")
    }

    /// CSV with header `node,event_type,t_start,t_end`; nodes are written `layer.index`.
    pub fn events_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["node", "event_type", "t_start", "t_end"])?;
        for ev in &self.events {
            writer.write_record([
                format!("{}.{}", ev.node.layer, ev.node.index),
                ev.kind.label().to_string(),
                ev.t_start.to_string(),
                ev.t_end.to_string(),
            ])?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Clone, Copy, Debug)]
struct Timed {
    time: f64,
    /// Arrivals and completions (0) are handled before port scheduling (1) at equal times.
    phase: u8,
    seq: u64,
    action: Action,
}

#[derive(Clone, Copy, Debug)]
enum Action {
    ComputeDone(usize),
    ReceiveDone { parent: usize, child: usize },
    Serve(usize),
}

impl PartialEq for Timed {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Timed {}
impl PartialOrd for Timed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Timed {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.phase.cmp(&other.phase))
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Clone, Default)]
struct Port {
    waiting: BinaryHeap<Reverse<(OrdTime, usize)>>,
    busy: bool,
    received: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
struct OrdTime(f64);
impl Eq for OrdTime {}
impl Ord for OrdTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Discrete-event replay of one round on `tree` where every parent needs
/// `quota` child messages and worker compute times are given in offset order
/// (infinite means the worker never finishes).
fn replay_tree(tree: &RegularTree, quota: usize, compute: &[f64], t_c: f64, record: bool) -> SimOutcome {
    let count = tree.num_nodes();
    assert_eq!(compute.len(), count - 1, "one compute time per worker");
    let mut queue: BinaryHeap<Reverse<Timed>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |queue: &mut BinaryHeap<Reverse<Timed>>, time: f64, phase: u8, action: Action| {
        queue.push(Reverse(Timed {
            time,
            phase,
            seq,
            action,
        }));
        seq += 1;
    };

    let mut compute_done = vec![false; count];
    let mut ports: Vec<Port> = vec![Port::default(); tree.num_parents()];
    let mut ready_at = vec![f64::INFINITY; count];
    let mut accepted = vec![false; count];
    let mut events = Vec::new();
    let mut completion = f64::INFINITY;
    compute_done[0] = true;

    for (k, &t) in compute.iter().enumerate() {
        if t.is_finite() {
            push(&mut queue, t, 0, Action::ComputeDone(k + 1));
        }
        if record {
            events.push(SimEvent {
                node: tree.node_at(k + 1),
                kind: EventKind::Compute,
                t_start: 0.0,
                t_end: t,
            });
        }
    }

    // A node with its compute done and its quota met becomes ready to send.
    let needed = |offset: usize| if offset < tree.num_parents() { quota } else { 0 };

    while let Some(Reverse(ev)) = queue.pop() {
        let now = ev.time;
        let mut became_ready = None;
        match ev.action {
            Action::ComputeDone(v) => {
                compute_done[v] = true;
                let got = if v < ports.len() { ports[v].received } else { 0 };
                if got >= needed(v) {
                    became_ready = Some(v);
                }
            }
            Action::ReceiveDone { parent, child } => {
                let port = &mut ports[parent];
                port.busy = false;
                port.received += 1;
                accepted[child] = true;
                if record {
                    let parent_id = tree.node_at(parent);
                    let child_id = tree.node_at(child);
                    events.push(SimEvent {
                        node: parent_id,
                        kind: EventKind::Receive { from: child_id },
                        t_start: now - t_c,
                        t_end: now,
                    });
                    events.push(SimEvent {
                        node: child_id,
                        kind: EventKind::Send { accepted: true },
                        t_start: ready_at[child],
                        t_end: now,
                    });
                }
                if port.received == quota && compute_done[parent] {
                    became_ready = Some(parent);
                }
                push(&mut queue, now, 1, Action::Serve(parent));
            }
            Action::Serve(p) => {
                let port = &mut ports[p];
                if !port.busy && port.received < quota {
                    if let Some(Reverse((_, child))) = port.waiting.pop() {
                        port.busy = true;
                        push(&mut queue, now + t_c, 0, Action::ReceiveDone { parent: p, child });
                    }
                }
            }
        }
        if let Some(v) = became_ready {
            if v == 0 {
                completion = now;
                break;
            }
            ready_at[v] = now;
            let parent = tree.offset(tree.parent(tree.node_at(v)).expect("worker"));
            ports[parent].waiting.push(Reverse((OrdTime(now), v)));
            push(&mut queue, now, 1, Action::Serve(parent));
        }
    }

    if record {
        for v in 1..count {
            if ready_at[v].is_finite() && !accepted[v] {
                events.push(SimEvent {
                    node: tree.node_at(v),
                    kind: EventKind::Send { accepted: false },
                    t_start: ready_at[v],
                    t_end: ready_at[v],
                });
            }
        }
    }

    SimOutcome {
        completion_time: completion,
        compute_times: compute.to_vec(),
        accepted,
        tree: tree.clone(),
        events,
    }
}

/// Runs one round with explicit per-worker compute times (tree-offset order,
/// `f64::INFINITY` for a failed worker).
pub fn simulate_with_times(scheme: &Scheme, compute: &[f64], t_c: f64, record: bool) -> Result<SimOutcome> {
    let (tree, quota) = scheme.topology()?;
    if compute.len() != tree.num_workers() {
        return Err(Error::InvalidParameters(format!(
            "{} compute times for {} workers",
            compute.len(),
            tree.num_workers()
        )));
    }
    if let Scheme::RingAllReduce { workers } = *scheme {
        let slowest = compute.iter().copied().fold(0.0, f64::max);
        let exchange = 2.0 * (workers as f64 - 1.0) * t_c / workers as f64;
        let completion = slowest + exchange;
        let mut events = Vec::new();
        if record {
            for (k, &t) in compute.iter().enumerate() {
                let node = NodeId::new(1, k + 1);
                events.push(SimEvent {
                    node,
                    kind: EventKind::Compute,
                    t_start: 0.0,
                    t_end: t,
                });
                events.push(SimEvent {
                    node,
                    kind: EventKind::Ring,
                    t_start: slowest,
                    t_end: completion,
                });
            }
        }
        let mut accepted = vec![true; workers + 1];
        accepted[0] = false;
        return Ok(SimOutcome {
            completion_time: completion,
            compute_times: compute.to_vec(),
            accepted,
            tree,
            events,
        });
    }
    Ok(replay_tree(&tree, quota, compute, t_c, record))
}

/// Draws every worker's compute time for trial `trial` (generator seeded with
/// `cfg.seed + trial`) and replays the round.
pub fn simulate_iteration(scheme: &Scheme, cfg: &LatencyConfig, trial: u64, record: bool) -> Result<SimOutcome> {
    cfg.validate()?;
    let points = scheme.local_points(cfg.d)?;
    if points == 0 {
        return Err(Error::InvalidParameters("workers would hold no data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(trial));
    let compute: Vec<f64> = (0..scheme.num_workers())
        .map(|_| sample_comp_time(cfg, points, &mut rng))
        .collect();
    simulate_with_times(scheme, &compute, cfg.t_c, record)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    /// Normal-approximation 95% half-width `1.96 sd / sqrt(trials)`.
    pub half_width_95: f64,
    pub std_dev: f64,
    pub trials: usize,
}

/// Summarizes samples in the given order.
pub fn summarize(samples: &[f64]) -> McEstimate {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let std_dev = var.sqrt();
    McEstimate {
        mean,
        half_width_95: 1.96 * std_dev / (n as f64).sqrt(),
        std_dev,
        trials: n,
    }
}

/// Completion times of trials `0..trials`, computed in parallel, returned in trial order.
pub fn completion_samples(scheme: &Scheme, cfg: &LatencyConfig, trials: usize) -> Result<Vec<f64>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|t| simulate_iteration(scheme, cfg, t, false).map(|o| o.completion_time))
        .collect()
}

pub fn mc_expected_latency(scheme: &Scheme, cfg: &LatencyConfig, trials: usize) -> Result<McEstimate> {
    if trials == 0 {
        return Err(Error::InvalidParameters("need at least one trial".into()));
    }
    Ok(summarize(&completion_samples(scheme, cfg, trials)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::index::sample;

    fn cfg(a: f64, mu: f64, t_c: f64, d: usize) -> LatencyConfig {
        LatencyConfig {
            a,
            mu,
            t_c,
            d,
            seed: 42,
        }
    }

    /// Independent recursive model: a parent's FIFO port serves children
    /// sorted by (ready, index); its quota is met at the end of the `quota`-th service.
    fn recursive_completion(tree: &RegularTree, quota: usize, compute: &[f64], t_c: f64) -> f64 {
        fn ready(tree: &RegularTree, quota: usize, compute: &[f64], t_c: f64, v: NodeId) -> f64 {
            let own = if v.is_master() { 0.0 } else { compute[tree.offset(v) - 1] };
            if tree.is_leaf(v) {
                return own;
            }
            let mut kids: Vec<(f64, usize)> = tree
                .children(v)
                .into_iter()
                .map(|c| (ready(tree, quota, compute, t_c, c), c.index))
                .collect();
            kids.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut free = 0.0f64;
            for &(r, _) in kids.iter().take(quota) {
                free = free.max(r) + t_c;
            }
            own.max(free)
        }
        ready(tree, quota, compute, t_c, NodeId::MASTER)
    }

    #[test]
    fn unit_exponential_mean() {
        let c = cfg(0.0, 1.0, 0.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mean = (0..1_000_000).map(|_| sample_comp_time(&c, 1, &mut rng)).sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn shift_is_a_hard_floor() {
        let c = cfg(2.0, 1.0, 0.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..10_000).all(|_| sample_comp_time(&c, 5, &mut rng) >= 10.0));
    }

    #[test]
    fn scaled_mean() {
        let c = cfg(0.5, 2.0, 0.0, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mean = (0..200_000).map(|_| sample_comp_time(&c, 100, &mut rng)).sum::<f64>() / 2e5;
        assert!((mean - 100.0).abs() < 1.0, "{mean}");
    }

    #[test]
    fn order_statistic_closed_form() {
        let unit = |a| cfg(a, 1.0, 0.0, 1);
        let one = LoadFraction::new(1, 1);
        assert!((expected_order_stat(&unit(0.0), 2, 1, one).unwrap() - 0.5).abs() < 1e-12);
        let h = 1.0 / 4.0 + 1.0 / 5.0 + 1.0 / 6.0 + 1.0 / 7.0 + 1.0 / 8.0 + 1.0 / 9.0 + 1.0 / 10.0;
        assert!((expected_order_stat(&unit(0.0), 10, 3, one).unwrap() - h).abs() < 1e-12);
        assert!((h - 1.095635).abs() < 1e-6);
        assert!((expected_order_stat(&unit(1.0), 3, 0, one).unwrap() - (11.0 / 6.0 + 1.0)).abs() < 1e-12);
        assert!(expected_order_stat(&unit(0.0), 3, 3, one).is_err());
    }

    #[test]
    fn bounds_envelope() {
        let c = cfg(0.3, 2.0, 0.0, 15);
        let (lo, hi) = cr_bounds(&c, 3, 2, 1).unwrap();
        assert_eq!(lo, hi);
        let rd = 4.0;
        assert!((lo - (rd / 2.0 * 3f64.ln() + 0.3 * rd)).abs() < 1e-12);

        let g = crate::allocation::granularity(100, 2, 20).unwrap();
        let c = cfg(0.01, 1.0, 0.001, g);
        let (lo, hi) = cr_bounds(&c, 100, 2, 20).unwrap();
        assert!(lo.is_finite() && hi.is_finite() && lo < hi);
        // gap = (n alpha + (L-1)(n - 1)) t_c, linear in n
        for n in [10usize, 20, 40] {
            let s = n / 5;
            let c = cfg(0.0, 1.0, 0.01, 1000);
            let (lo, hi) = cr_bounds(&c, n, 3, s).unwrap();
            let expected = (n as f64 * 3.0 - (n as f64 * 0.8 + 2.0)) * 0.01;
            assert!(((hi - lo) - expected).abs() < 1e-9);
        }
        assert!(cr_bounds(&c, 100, 2, 0).is_err());
    }

    #[test]
    fn no_comm_single_layer_is_order_statistic() {
        let scheme = Scheme::CodedReduce { n: 5, layers: 1, s: 2 };
        let times = [3.0, 1.0, 4.0, 1.5, 9.0];
        let out = simulate_with_times(&scheme, &times, 0.0, true).unwrap();
        assert_eq!(out.completion_time, 3.0);
        let pattern = out.straggler_pattern();
        assert_eq!(pattern.total(), 2);
        assert!(pattern.is_straggler(out.tree(), NodeId::new(1, 3)));
        assert!(pattern.is_straggler(out.tree(), NodeId::new(1, 5)));
    }

    #[test]
    fn pure_queueing() {
        let scheme = Scheme::GradientCoding {
            workers: 4,
            stragglers: 0,
        };
        let out = simulate_with_times(&scheme, &[0.0; 4], 1.0, true).unwrap();
        assert_eq!(out.completion_time, 4.0);
        // ties served by child index
        let order: Vec<NodeId> = out
            .events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Receive { from } => Some(from),
                _ => None,
            })
            .collect();
        assert_eq!(order, (1..=4).map(|i| NodeId::new(1, i)).collect::<Vec<_>>());
    }

    #[test]
    fn failed_workers() {
        let scheme = Scheme::Sgd {
            workers: 3,
            stragglers: 1,
        };
        let out = simulate_with_times(&scheme, &[1.0, f64::INFINITY, 2.0], 0.5, false).unwrap();
        assert_eq!(out.completion_time, 2.5);
        let umw = Scheme::Uncoded { workers: 3 };
        let out = simulate_with_times(&umw, &[1.0, f64::INFINITY, 2.0], 0.5, false).unwrap();
        assert!(out.completion_time.is_infinite());
    }

    #[test]
    fn ring_barrier_model() {
        let scheme = Scheme::RingAllReduce { workers: 4 };
        let out = simulate_with_times(&scheme, &[1.0, 3.0, 2.0, 0.5], 2.0, false).unwrap();
        assert!((out.completion_time - (3.0 + 2.0 * 3.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn event_replay_matches_recursive_model() {
        let scheme = Scheme::CodedReduce { n: 3, layers: 3, s: 1 };
        let tree = RegularTree::new(3, 3).unwrap();
        let c = cfg(0.1, 1.0, 0.3, crate::allocation::granularity(3, 3, 1).unwrap());
        for trial in 0..300 {
            let out = simulate_iteration(&scheme, &c, trial, false).unwrap();
            let expected = recursive_completion(&tree, 2, &out.compute_times, c.t_c);
            assert_eq!(out.completion_time, expected, "trial {trial}");
        }
    }

    #[test]
    fn event_log_causality_and_exclusive_ports() {
        let scheme = Scheme::CodedReduce { n: 4, layers: 2, s: 1 };
        let c = cfg(0.05, 1.0, 0.2, crate::allocation::granularity(4, 2, 1).unwrap() * 4);
        for trial in 0..50 {
            let out = simulate_iteration(&scheme, &c, trial, true).unwrap();
            let tree = out.tree().clone();
            for parent in tree.parents() {
                let mut recv: Vec<(f64, f64, NodeId)> = out
                    .events
                    .iter()
                    .filter_map(|e| match e.kind {
                        EventKind::Receive { from } if e.node == parent => Some((e.t_start, e.t_end, from)),
                        _ => None,
                    })
                    .collect();
                recv.sort_by(|a, b| a.0.total_cmp(&b.0));
                if !parent.is_master() && !out.was_accepted(parent) {
                    assert!(recv.len() <= 3);
                    continue;
                }
                assert_eq!(recv.len(), 3);
                for w in recv.windows(2) {
                    assert!(w[0].1 <= w[1].0 + 1e-12, "overlap at {parent}");
                }
                let quota_met = recv.last().unwrap().1;
                if !parent.is_master() {
                    let own = out.compute_times[tree.offset(parent) - 1];
                    let send = out
                        .events
                        .iter()
                        .find(|e| e.node == parent && matches!(e.kind, EventKind::Send { .. }));
                    if let Some(send) = send {
                        assert!(send.t_start >= own && send.t_start >= quota_met);
                    }
                }
                for (start, _, from) in recv {
                    let ready = if tree.is_leaf(from) {
                        out.compute_times[tree.offset(from) - 1]
                    } else {
                        start
                    };
                    assert!(start >= ready - 1e-12);
                }
            }
            assert!(out.events_csv().unwrap().starts_with("node,event_type,t_start,t_end\n"));
        }
    }

    #[test]
    fn pipelining_sandwich_per_trial() {
        let scheme = Scheme::CodedReduce { n: 3, layers: 2, s: 1 };
        let tc = 0.05;
        let with = cfg(0.1, 1.0, tc, 15);
        let without = LatencyConfig { t_c: 0.0, ..with };
        let mut gap = 0.0;
        let trials = 100_000u64;
        for trial in 0..trials {
            let slow = simulate_iteration(&scheme, &with, trial, false).unwrap().completion_time;
            let fast = simulate_iteration(&scheme, &without, trial, false).unwrap().completion_time;
            assert!(slow >= fast + tc - 1e-12);
            assert!(slow <= fast + 2.0 * 2.0 * tc + 1e-12);
            gap += slow - fast;
        }
        assert!(gap / trials as f64 >= tc);
    }

    #[test]
    fn one_layer_tree_equals_gradient_coding() {
        let cr = Scheme::CodedReduce { n: 6, layers: 1, s: 2 };
        let gc = Scheme::GradientCoding {
            workers: 6,
            stragglers: 2,
        };
        let c = cfg(0.2, 1.5, 0.0, 30);
        for trial in 0..200 {
            assert_eq!(
                simulate_iteration(&cr, &c, trial, false).unwrap(),
                simulate_iteration(&gc, &c, trial, false).unwrap()
            );
        }
    }

    #[test]
    fn reproducible_outcomes() {
        let scheme = Scheme::CodedReduce { n: 3, layers: 2, s: 1 };
        let c = cfg(0.1, 1.0, 0.2, 30);
        assert_eq!(
            simulate_iteration(&scheme, &c, 7, true).unwrap(),
            simulate_iteration(&scheme, &c, 7, true).unwrap()
        );
        let a = mc_expected_latency(&scheme, &c, 500).unwrap();
        let b = mc_expected_latency(&scheme, &c, 500).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn order_statistic_monte_carlo_small_groups() {
        for (n, s) in [(4usize, 1usize), (8, 3), (20, 5)] {
            let scheme = Scheme::GradientCoding {
                workers: n,
                stragglers: s,
            };
            let c = cfg(0.2, 1.0, 0.0, n);
            let est = mc_expected_latency(&scheme, &c, 100_000).unwrap();
            let exact = expected_order_stat(&c, n, s, scheme.load().unwrap()).unwrap();
            assert!((est.mean - exact).abs() / exact < 0.02, "({n},{s}) {} vs {exact}", est.mean);
        }
    }

    #[test]
    fn deterministic_limit() {
        let scheme = Scheme::Uncoded { workers: 4 };
        let c = cfg(0.5, 1e9, 0.0, 40);
        let est = mc_expected_latency(&scheme, &c, 100).unwrap();
        assert!((est.mean - 5.0).abs() < 1e-6);
    }

    #[test]
    fn persistent_stragglers_favor_coding_over_waiting_for_all() {
        // i.i.d. draws alone favor the uncoded sum: coding multiplies the
        // load by S + 1. Three workers slowed 30x per round reverse that.
        let c = cfg(0.0, 0.05, 0.01, 120);
        let umw = Scheme::Uncoded { workers: 12 };
        let gc = Scheme::GradientCoding {
            workers: 12,
            stragglers: 3,
        };
        let run = |scheme: &Scheme| {
            let points = scheme.local_points(c.d).unwrap();
            let samples: Vec<f64> = (0..4000u64)
                .map(|trial| {
                    let mut rng = ChaCha8Rng::seed_from_u64(trial);
                    let mut times: Vec<f64> = (0..12).map(|_| sample_comp_time(&c, points, &mut rng)).collect();
                    for k in sample(&mut rng, 12, 3) {
                        times[k] *= 30.0;
                    }
                    simulate_with_times(scheme, &times, c.t_c, false).unwrap().completion_time
                })
                .collect();
            summarize(&samples)
        };
        let (u, g) = (run(&umw), run(&gc));
        assert!(u.mean - u.half_width_95 > g.mean + g.half_width_95, "{u:?} {g:?}");

        let iid_umw = mc_expected_latency(&umw, &c, 4000).unwrap();
        let iid_gc = mc_expected_latency(&gc, &c, 4000).unwrap();
        assert!(iid_gc.mean > iid_umw.mean);
    }

    #[test]
    fn scheme_names() {
        for kind in SchemeKind::ALL {
            assert_eq!(kind.name().parse::<SchemeKind>().unwrap(), kind);
        }
        assert!(matches!("ps".parse::<SchemeKind>(), Err(Error::UnknownScheme(_))));
    }
}
