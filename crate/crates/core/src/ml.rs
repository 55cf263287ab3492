//! Gradient descent on top of the aggregation schemes.
//!
//! Every scheme hands the update rule the same quantity, the sum of per-point
//! gradients, except the straggler-dropping SGD baseline which returns only
//! the partial sum of the workers it waited for.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::allocation::{cr_allocate, Assignment, WeightedSlice};
use crate::engine::{
    cr_execute, gc_allocate, gc_execute, rar_execute, sgd_execute, umw_execute, GradientOracle,
    GradientVec, UncodedPartition,
};
use crate::error::{Error, Result};
use crate::latency::{simulate_iteration, LatencyConfig, Scheme};
use crate::topology::{NodeId, RegularTree, StragglerPattern};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Synthetic,
    Ingested,
}

/// `d` samples of `p` features plus a label, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    p: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    origin: Origin,
}

impl Dataset {
    pub fn new(p: usize, features: Vec<f64>, labels: Vec<f64>, origin: Origin) -> Result<Self> {
        if p == 0 || labels.is_empty() {
            return Err(Error::InvalidParameters("dataset needs d >= 1 and p >= 1".into()));
        }
        if features.len() != p * labels.len() {
            return Err(Error::InvalidParameters(format!(
                "{} feature values for {} rows of width {p}",
                features.len(),
                labels.len()
            )));
        }
        if !features.iter().chain(&labels).all(|v| v.is_finite()) {
            return Err(Error::InvalidParameters("dataset has non-finite entries".into()));
        }
        Ok(Dataset {
            p,
            features,
            labels,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.p..(j + 1) * self.p]
    }

    pub fn label(&self, j: usize) -> f64 {
        self.labels[j]
    }

    /// One row per sample: `p` feature columns then the label, no header.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut p = None;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let values = record
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("dataset row {}: {e}", line + 1)))?;
            if values.len() < 2 {
                return Err(Error::Parse(format!("dataset row {} has fewer than two columns", line + 1)));
            }
            let width = *p.get_or_insert(values.len() - 1);
            if values.len() - 1 != width {
                return Err(Error::Parse(format!(
                    "dataset row {} has {} features, expected {width}",
                    line + 1,
                    values.len() - 1
                )));
            }
            features.extend_from_slice(&values[..width]);
            labels.push(values[width]);
        }
        Dataset::new(p.unwrap_or(0), features, labels, Origin::Ingested)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Dataset::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for j in 0..self.len() {
            let mut record: Vec<String> = self.row(j).iter().map(f64::to_string).collect();
            record.push(self.labels[j].to_string());
            writer.write_record(&record)?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Gaussian features and model, `label = <x, theta*> + noise_std * z`.
pub fn generate_synthetic_with_noise(d: usize, p: usize, noise_std: f64, seed: u64) -> Result<(Dataset, Vec<f64>)> {
    if d == 0 || p == 0 {
        return Err(Error::InvalidParameters("synthetic data needs d, p >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let data = synthesize(&truth, d, noise_std, &mut rng)?;
    Ok((data, truth))
}

/// Standard-normal features, model and label noise.
pub fn generate_synthetic(d: usize, p: usize, seed: u64) -> Result<(Dataset, Vec<f64>)> {
    generate_synthetic_with_noise(d, p, 1.0, seed)
}

/// Samples features for a fixed model.
pub fn synthesize<R: Rng + ?Sized>(truth: &[f64], d: usize, noise_std: f64, rng: &mut R) -> Result<Dataset> {
    let p = truth.len();
    let mut features = Vec::with_capacity(d * p);
    let mut labels = Vec::with_capacity(d);
    for _ in 0..d {
        let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let z: f64 = rng.sample(StandardNormal);
        labels.push(dot(&x, truth) + noise_std * z);
        features.extend(x);
    }
    Dataset::new(p, features, labels, Origin::Synthetic)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn design(data: &Dataset) -> DMatrix<f64> {
    DMatrix::from_row_slice(data.len(), data.dim(), &data.features)
}

/// Minimizer of `0.5 ||X theta - y||^2 + 0.5 lambda ||theta||^2`.
pub fn least_squares(data: &Dataset, lambda: f64) -> Result<Vec<f64>> {
    let x = design(data);
    let y = DVector::from_column_slice(&data.labels);
    let gram = x.transpose() * &x + DMatrix::identity(data.dim(), data.dim()) * lambda;
    let rhs = x.transpose() * y;
    gram.cholesky()
        .map(|c| c.solve(&rhs).iter().copied().collect())
        .ok_or_else(|| Error::InvalidParameters("normal equations are singular".into()))
}

/// Largest eigenvalue of `X^T X`, the smoothness constant of the summed squared loss.
pub fn gram_spectral_norm(data: &Dataset) -> f64 {
    let x = design(data);
    (x.transpose() * x).symmetric_eigenvalues().max()
}

/// Squared loss `0.5 (<x, theta> - y)^2` per point.
#[derive(Clone, Copy, Debug)]
pub struct LinearOracle<'a> {
    data: &'a Dataset,
}

impl<'a> LinearOracle<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        LinearOracle { data }
    }

    pub fn loss(&self, theta: &[f64], j: usize) -> f64 {
        0.5 * (dot(self.data.row(j), theta) - self.data.label(j)).powi(2)
    }
}

/// Logistic loss `log(1 + e^z) - y z` with `z = <x, theta>` and `y` in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct LogisticOracle<'a> {
    data: &'a Dataset,
}

impl<'a> LogisticOracle<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        LogisticOracle { data }
    }

    pub fn loss(&self, theta: &[f64], j: usize) -> f64 {
        let z = dot(self.data.row(j), theta);
        // log(1 + e^z) without overflow
        let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        softplus - self.data.label(j) * z
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn weighted_sum(data: &Dataset, slices: &[WeightedSlice], residual: impl Fn(usize) -> f64) -> GradientVec {
    let mut g = GradientVec::zeros(data.dim());
    for slice in slices {
        for j in slice.start..slice.end {
            g.add_scaled(slice.weight * residual(j), data.row(j));
        }
    }
    g
}

impl GradientOracle for LinearOracle<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn num_points(&self) -> usize {
        self.data.len()
    }

    fn gradient(&self, theta: &[f64], slices: &[WeightedSlice]) -> GradientVec {
        weighted_sum(self.data, slices, |j| dot(self.data.row(j), theta) - self.data.label(j))
    }
}

impl GradientOracle for LogisticOracle<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn num_points(&self) -> usize {
        self.data.len()
    }

    fn gradient(&self, theta: &[f64], slices: &[WeightedSlice]) -> GradientVec {
        weighted_sum(self.data, slices, |j| {
            sigmoid(dot(self.data.row(j), theta)) - self.data.label(j)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Linear,
    Logistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum StepSize {
    Constant { eta: f64 },
    /// `c1 / (t + c2)` at iteration `t` (starting from 0).
    Decay { c1: f64, c2: f64 },
}

impl StepSize {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepSize::Constant { eta } => eta,
            StepSize::Decay { c1, c2 } => c1 / (t as f64 + c2),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSize::Constant { eta } => eta > 0.0 && eta.is_finite(),
            StepSize::Decay { c1, c2 } => c1 > 0.0 && c2 > 0.0 && c1.is_finite() && c2.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameters(format!("step size {self:?} must be positive")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdConfig {
    pub step: StepSize,
    pub iterations: usize,
    pub lambda: f64,
    pub scheme: Scheme,
    pub model: Model,
    /// Seeds code construction, straggler patterns and timing draws.
    pub seed: u64,
    /// When set, each iteration is timed by the simulator (with `d` taken from
    /// the dataset) and its realized straggler pattern drives the engine.
    pub latency: Option<LatencyConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub theta: Vec<f64>,
    /// `||theta_t - theta_{t-1}||^2 / ||theta_{t-1}||^2`; infinite when the previous iterate is zero.
    pub rer: f64,
    /// `||theta_t - theta*||^2 / ||theta*||^2`; NaN without a reference model.
    pub ner: f64,
    /// Accumulated simulated time (0 without a latency model).
    pub sim_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn final_theta(&self) -> &[f64] {
        &self.rows.last().expect("trace has iterations").theta
    }

    /// Header `iter,wall_sim_time,rer,ner`.
    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["iter", "wall_sim_time", "rer", "ner"])?;
        for row in &self.rows {
            writer.write_record([
                row.iter.to_string(),
                row.sim_time.to_string(),
                row.rer.to_string(),
                row.ner.to_string(),
            ])?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// One row per iteration: `iter` then the model coordinates.
    pub fn theta_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let p = self.rows.first().map_or(0, |r| r.theta.len());
        let mut header = vec!["iter".to_string()];
        header.extend((0..p).map(|k| format!("theta_{k}")));
        writer.write_record(&header)?;
        for row in &self.rows {
            let mut record = vec![row.iter.to_string()];
            record.extend(row.theta.iter().map(f64::to_string));
            writer.write_record(&record)?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Parses the `iter,wall_sim_time,rer,ner` trace format back into `(iter, time, rer, ner)` rows.
pub fn read_trace_csv(text: &str) -> Result<Vec<(usize, f64, f64, f64)>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |k: usize| record.get(k).ok_or_else(|| Error::Parse("short trace row".into()));
        let num = |k: usize| -> Result<f64> {
            field(k)?.parse().map_err(|e| Error::Parse(format!("trace value: {e}")))
        };
        let iter = field(0)?
            .parse()
            .map_err(|e| Error::Parse(format!("trace iteration: {e}")))?;
        rows.push((iter, num(1)?, num(2)?, num(3)?));
    }
    Ok(rows)
}

/// Engine state prepared once per run.
enum Plan {
    Coded { assignment: Assignment },
    Gc { assignment: Assignment, stragglers: usize },
    Uncoded { partition: UncodedPartition },
    Sgd { partition: UncodedPartition, stragglers: usize },
    Ring { partition: UncodedPartition },
}

impl Plan {
    fn new(scheme: &Scheme, d: usize, seed: u64) -> Result<Self> {
        Ok(match *scheme {
            Scheme::CodedReduce { n, layers, s } => Plan::Coded {
                assignment: cr_allocate(&RegularTree::new(n, layers)?, s, d, seed)?,
            },
            Scheme::GradientCoding {
                workers,
                stragglers,
            } => Plan::Gc {
                assignment: gc_allocate(workers, stragglers, d, seed)?,
                stragglers,
            },
            Scheme::Uncoded { workers } => Plan::Uncoded {
                partition: UncodedPartition::new(workers, d)?,
            },
            Scheme::Sgd {
                workers,
                stragglers,
            } => {
                if stragglers >= workers {
                    return Err(Error::InvalidParameters(format!(
                        "need S < N, got N={workers}, S={stragglers}"
                    )));
                }
                Plan::Sgd {
                    partition: UncodedPartition::new(workers, d)?,
                    stragglers,
                }
            }
            Scheme::RingAllReduce { workers } => Plan::Ring {
                partition: UncodedPartition::new(workers, d)?,
            },
        })
    }

    /// A uniformly random admissible pattern: `s` children of every parent.
    fn random_pattern(&self, rng: &mut ChaCha8Rng) -> Option<StragglerPattern> {
        match self {
            Plan::Coded { assignment } => {
                let tree = assignment.tree();
                let mut pattern = StragglerPattern::new();
                for parent in tree.parents() {
                    let children = tree.children(parent);
                    for k in sample(rng, children.len(), assignment.s()) {
                        pattern.insert(tree, children[k]).expect("child of tree");
                    }
                }
                Some(pattern)
            }
            Plan::Gc {
                assignment,
                stragglers,
            } => {
                let tree = assignment.tree();
                let picks = sample(rng, tree.num_workers(), *stragglers);
                Some(
                    StragglerPattern::from_nodes(tree, picks.into_iter().map(|w| NodeId::new(1, w + 1)))
                        .expect("workers of tree"),
                )
            }
            Plan::Sgd {
                partition,
                stragglers,
            } => {
                let tree = RegularTree::new(partition.workers(), 1).expect("valid size");
                let picks = sample(rng, partition.workers(), *stragglers);
                Some(
                    StragglerPattern::from_nodes(&tree, picks.into_iter().map(|w| NodeId::new(1, w + 1)))
                        .expect("workers of tree"),
                )
            }
            Plan::Uncoded { .. } | Plan::Ring { .. } => None,
        }
    }

    fn gradient(&self, pattern: Option<&StragglerPattern>, oracle: &dyn GradientOracle, theta: &[f64]) -> Result<GradientVec> {
        let empty = StragglerPattern::new();
        let pattern = pattern.unwrap_or(&empty);
        let positions = || -> Vec<usize> { pattern.iter().map(|v| v.index - 1).collect() };
        match self {
            Plan::Coded { assignment } => cr_execute(assignment, pattern, oracle, theta),
            Plan::Gc { assignment, .. } => gc_execute(assignment, &positions(), oracle, theta),
            Plan::Uncoded { partition } => Ok(umw_execute(partition, oracle, theta)),
            Plan::Sgd {
                partition,
                stragglers,
            } => sgd_execute(partition, *stragglers, &positions(), oracle, theta),
            Plan::Ring { partition } => Ok(rar_execute(partition, oracle, theta)
                .into_iter()
                .next()
                .expect("at least one worker")),
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Runs `cfg.iterations` steps of `theta <- theta - eta_t (g + lambda theta)` from `theta = 0`.
pub fn gd_run(data: &Dataset, truth: Option<&[f64]>, cfg: &GdConfig) -> Result<Trace> {
    cfg.step.validate()?;
    if cfg.iterations == 0 {
        return Err(Error::InvalidParameters("need at least one iteration".into()));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::InvalidParameters(format!("lambda={} must be >= 0", cfg.lambda)));
    }
    if let Some(t) = truth {
        if t.len() != data.dim() {
            return Err(Error::InvalidParameters("reference model has the wrong dimension".into()));
        }
    }
    let plan = Plan::new(&cfg.scheme, data.len(), cfg.seed)?;
    let latency = cfg.latency.map(|l| LatencyConfig { d: data.len(), ..l });
    if let Some(l) = &latency {
        l.validate()?;
    }
    let linear;
    let logistic;
    let oracle: &dyn GradientOracle = match cfg.model {
        Model::Linear => {
            linear = LinearOracle::new(data);
            &linear
        }
        Model::Logistic => {
            logistic = LogisticOracle::new(data);
            &logistic
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = vec![0.0; data.dim()];
    let mut clock = 0.0;
    let mut rows = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let pattern = match &latency {
            Some(l) => {
                let outcome = simulate_iteration(&cfg.scheme, l, t as u64, false)?;
                clock += outcome.completion_time;
                match plan {
                    Plan::Uncoded { .. } | Plan::Ring { .. } => None,
                    _ => Some(outcome.straggler_pattern()),
                }
            }
            None => plan.random_pattern(&mut rng),
        };
        let g = plan.gradient(pattern.as_ref(), oracle, &theta)?;
        let eta = cfg.step.at(t);
        let next: Vec<f64> = theta
            .iter()
            .zip(g.iter())
            .map(|(th, gk)| th - eta * (gk + cfg.lambda * th))
            .collect();
        let rer = ratio(squared_distance(&next, &theta), squared_distance(&theta, &vec![0.0; theta.len()]));
        let ner = truth.map_or(f64::NAN, |star| {
            ratio(squared_distance(&next, star), star.iter().map(|v| v * v).sum())
        });
        theta = next;
        rows.push(TraceRow {
            iter: t + 1,
            theta: theta.clone(),
            rer,
            ner,
            sim_time: clock,
        });
    }
    Ok(Trace { rows })
}

/// Largest relative coordinate gap between two trajectories, over all iterations:
/// `max_t ||a_t - b_t||_inf / max(||b_t||_inf, 1e-300)`.
pub fn max_relative_gap(a: &Trace, b: &Trace) -> f64 {
    a.rows
        .iter()
        .zip(&b.rows)
        .map(|(x, y)| {
            let diff = x.theta.iter().zip(&y.theta).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            let scale = y.theta.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
            diff / scale
        })
        .fold(0.0, f64::max)
}
