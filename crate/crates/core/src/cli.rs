//! Command-line experiment harness.
//!
//! Every command reads one TOML experiment file (all keys optional, see the
//! README for the schema) and writes CSV files with a one-line header into
//! the output directory. Outputs depend only on the configuration and seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::allocation::{cr_allocate_with_code, granularity, Assignment};
use crate::codes::{build_encoding, validate_code, CodeCheck, EncodingMatrix};
use crate::engine::{cr_execute, GradientOracle, IdentityOracle};
use crate::error::{Error, Result};
use crate::latency::{cr_bounds, mc_expected_latency, simulate_iteration, LatencyConfig, Scheme, SchemeKind};
use crate::ml::{
    gd_run, generate_synthetic_with_noise, gram_spectral_norm, Dataset, GdConfig, LinearOracle,
    LogisticOracle, Model, StepSize, Trace,
};
use crate::topology::{enumerate_patterns, NodeId, RegularTree, StragglerPattern};
use crate::transport::{orchestrate, run_node, Failure, FailurePlan, NodeStatus, RoundSetup};

#[derive(Debug, Parser)]
#[command(name = "codedreduce", version, about = "Straggler-coded tree gradient aggregation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment file (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `experiment.out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `experiment.trials`.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every scheme's parameters and the tree's code.
    Validate,
    /// Gradient descent with every scheme; per-scheme traces.
    Train,
    /// Monte Carlo iteration times with the closed-form envelope.
    Latency {
        /// Also write the event log of trial 0 for every scheme.
        #[arg(long)]
        trace: bool,
    },
    /// Exhaustive (or sampled) straggler-pattern recovery and code validity.
    Verify,
    /// One coded round as local processes, compared with the in-memory engine.
    TransportDemo,
    /// Runs one node of a transport round (spawned by `transport-demo`).
    #[command(hide = true)]
    Node {
        #[arg(long)]
        round: PathBuf,
        #[arg(long)]
        node: NodeId,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub schemes: Vec<SchemeKind>,
    pub seed: u64,
    pub out: PathBuf,
    pub trials: usize,
    /// Upper bound on straggler patterns checked by `verify`; beyond it patterns are sampled.
    pub pattern_cap: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            schemes: SchemeKind::ALL.to_vec(),
            seed: 1,
            out: PathBuf::from("out"),
            trials: 1000,
            pattern_cap: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSection {
    pub n: usize,
    pub layers: usize,
    pub s: usize,
    /// `"generated"`, `"example"` (the 3x3 matrix with s = 1) or a CSV path.
    pub code: String,
}

impl Default for TreeSection {
    fn default() -> Self {
        TreeSection {
            n: 3,
            layers: 2,
            s: 1,
            code: "generated".into(),
        }
    }
}

/// Master-worker baselines; default to the tree's worker count and `floor(N s / n)` stragglers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatSection {
    pub workers: Option<usize>,
    pub stragglers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Synthetic sample count (ignored with `csv`).
    pub d: usize,
    pub p: usize,
    pub noise: f64,
    /// Defaults to `experiment.seed`.
    pub seed: Option<u64>,
    pub csv: Option<PathBuf>,
    pub model: Model,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            d: 300,
            p: 20,
            noise: 1.0,
            seed: None,
            csv: None,
            model: Model::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySection {
    pub a: f64,
    pub mu: f64,
    pub t_c: f64,
    /// Dataset size for timing; defaults to the dataset's.
    pub d: Option<usize>,
}

impl Default for LatencySection {
    fn default() -> Self {
        LatencySection {
            a: 0.01,
            mu: 1.0,
            t_c: 0.5,
            d: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdSection {
    pub iterations: usize,
    pub lambda: f64,
    /// Constant step; defaults to `0.5 / lambda_max(X^T X)` when neither form is given.
    pub eta: Option<f64>,
    /// Decaying step `c1 / (t + c2)`.
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    /// Time each iteration with the latency model.
    pub timed: bool,
}

impl Default for GdSection {
    fn default() -> Self {
        GdSection {
            iterations: 50,
            lambda: 0.0,
            eta: None,
            c1: None,
            c2: None,
            timed: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub deadline_ms: u64,
    /// Nodes (`"layer.index"`) that are never started.
    pub never_start: Vec<String>,
    /// Nodes that exit after receiving the model.
    pub crash: Vec<String>,
    /// Nodes killed this many milliseconds after launch.
    pub kill_after_ms: BTreeMap<String, u64>,
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            deadline_ms: 30_000,
            never_start: Vec::new(),
            crash: Vec::new(),
            kill_after_ms: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub tree: TreeSection,
    pub flat: FlatSection,
    pub data: DataSection,
    pub latency: LatencySection,
    pub gd: GdSection,
    pub transport: TransportSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn tree(&self) -> Result<RegularTree> {
        RegularTree::new(self.tree.n, self.tree.layers)
    }

    pub fn flat_workers(&self) -> Result<usize> {
        match self.flat.workers {
            Some(w) => Ok(w),
            None => Ok(self.tree()?.num_workers()),
        }
    }

    pub fn flat_stragglers(&self) -> Result<usize> {
        match self.flat.stragglers {
            Some(s) => Ok(s),
            None => Ok(self.flat_workers()? * self.tree.s / self.tree.n.max(1)),
        }
    }

    pub fn scheme(&self, kind: SchemeKind) -> Result<Scheme> {
        let workers = self.flat_workers()?;
        let stragglers = self.flat_stragglers()?;
        Ok(match kind {
            SchemeKind::Cr => Scheme::CodedReduce {
                n: self.tree.n,
                layers: self.tree.layers,
                s: self.tree.s,
            },
            SchemeKind::Gc => Scheme::GradientCoding { workers, stragglers },
            SchemeKind::Umw => Scheme::Uncoded { workers },
            SchemeKind::Sgd => Scheme::Sgd { workers, stragglers },
            SchemeKind::Rar => Scheme::RingAllReduce { workers },
        })
    }

    pub fn schemes(&self) -> Result<Vec<Scheme>> {
        self.experiment.schemes.iter().map(|&k| self.scheme(k)).collect()
    }

    fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.experiment.seed)
    }

    /// The dataset and, for synthetic data, the true model.
    pub fn dataset(&self) -> Result<(Dataset, Option<Vec<f64>>)> {
        match &self.data.csv {
            Some(path) => Ok((Dataset::read_csv(path)?, None)),
            None => {
                let (data, truth) =
                    generate_synthetic_with_noise(self.data.d, self.data.p, self.data.noise, self.data_seed())?;
                Ok((data, Some(truth)))
            }
        }
    }

    /// Dataset size used before the data is materialized.
    fn declared_d(&self) -> Result<usize> {
        match &self.data.csv {
            Some(path) => Ok(Dataset::read_csv(path)?.len()),
            None => Ok(self.data.d),
        }
    }

    pub fn latency_config(&self, d: usize) -> LatencyConfig {
        LatencyConfig {
            a: self.latency.a,
            mu: self.latency.mu,
            t_c: self.latency.t_c,
            d: self.latency.d.unwrap_or(d),
            seed: self.experiment.seed,
        }
    }

    pub fn encoding(&self) -> Result<EncodingMatrix> {
        match self.tree.code.as_str() {
            "generated" => build_encoding(self.tree.n, self.tree.s, self.experiment.seed),
            "example" => Ok(EncodingMatrix::three_one_example()),
            path => EncodingMatrix::from_csv(&fs::read_to_string(path)?, self.tree.s),
        }
    }

    pub fn assignment(&self, d: usize) -> Result<Assignment> {
        let code = self.encoding()?;
        if code.n() != self.tree.n || code.s() != self.tree.s {
            return Err(Error::Config(format!(
                "code is {}x{} with s={}, tree has n={} s={}",
                code.n(),
                code.n(),
                code.s(),
                self.tree.n,
                self.tree.s
            )));
        }
        cr_allocate_with_code(&self.tree()?, code, d)
    }

    pub fn step(&self, data: &Dataset) -> Result<StepSize> {
        match (self.gd.eta, self.gd.c1, self.gd.c2) {
            (Some(eta), None, None) => Ok(StepSize::Constant { eta }),
            (None, Some(c1), Some(c2)) => Ok(StepSize::Decay { c1, c2 }),
            (None, None, None) => Ok(StepSize::Constant {
                eta: 0.5 / gram_spectral_norm(data).max(f64::MIN_POSITIVE),
            }),
            _ => Err(Error::Config("gd: give either eta or both c1 and c2".into())),
        }
    }

    pub fn failure_plan(&self) -> Result<FailurePlan> {
        let tree = self.tree()?;
        let parse = |key: &str| -> Result<NodeId> {
            let node: NodeId = key.parse()?;
            if !tree.contains(node) || node.is_master() {
                return Err(Error::Config(format!("transport: {key} is not a worker of the tree")));
            }
            Ok(node)
        };
        let mut plan = FailurePlan::new();
        for key in &self.transport.never_start {
            plan.insert(parse(key)?, Failure::NeverStart);
        }
        for key in &self.transport.crash {
            plan.insert(parse(key)?, Failure::CrashBeforeCompute);
        }
        for (key, ms) in &self.transport.kill_after_ms {
            plan.insert(parse(key)?, Failure::KillAfter(Duration::from_millis(*ms)));
        }
        Ok(plan)
    }

    /// Checks everything a run needs; the first violated constraint is the error.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut report = Vec::new();
        if self.experiment.schemes.is_empty() {
            return Err(Error::Config("experiment.schemes is empty".into()));
        }
        if self.experiment.trials == 0 {
            return Err(Error::Config("experiment.trials must be positive".into()));
        }
        let tree = self.tree()?;
        if self.tree.s >= self.tree.n {
            return Err(Error::InvalidParameters(format!(
                "tree: need s < n, got n={} s={}",
                self.tree.n, self.tree.s
            )));
        }
        let d = self.declared_d()?;
        let latency = self.latency_config(d);
        latency.validate()?;
        for scheme in self.schemes()? {
            let load = scheme.load()?;
            match scheme {
                Scheme::CodedReduce { n, layers, s } => {
                    let g = granularity(n, layers, s)?;
                    for (what, size) in [("data", d), ("latency", latency.d)] {
                        if size % g != 0 {
                            return Err(Error::Granularity { d: size, granularity: g });
                        }
                        report.push(format!("cr: {what} d={size} is a multiple of granularity {g}"));
                    }
                }
                Scheme::GradientCoding { workers, stragglers } => {
                    let g = granularity(workers, 1, stragglers)?;
                    for size in [d, latency.d] {
                        if size % g != 0 {
                            return Err(Error::Granularity { d: size, granularity: g });
                        }
                    }
                }
                Scheme::Uncoded { workers } | Scheme::Sgd { workers, .. } | Scheme::RingAllReduce { workers } => {
                    for size in [d, latency.d] {
                        if size % workers != 0 {
                            return Err(Error::Divisibility {
                                points: size,
                                parts: workers,
                            });
                        }
                    }
                    if let Scheme::Sgd { stragglers, .. } = scheme {
                        if stragglers >= workers {
                            return Err(Error::InvalidParameters(format!(
                                "sgd: need S < N, got N={workers} S={stragglers}"
                            )));
                        }
                    }
                }
            }
            report.push(format!(
                "{}: {} workers, load {load} = {} points",
                scheme.kind(),
                scheme.num_workers(),
                scheme.local_points(latency.d)?
            ));
        }
        let code = self.encoding()?;
        match validate_code(&code) {
            CodeCheck::Valid { sets_checked, max_residual } => report.push(format!(
                "code ({},{}): {sets_checked} survivor sets decode, max residual {max_residual:.3e}",
                code.n(),
                code.s()
            )),
            CodeCheck::Invalid { survivors, residual } => {
                return Err(Error::CodeInvalid { survivors, residual });
            }
        }
        self.assignment(d)?;
        if self.gd.iterations == 0 {
            return Err(Error::Config("gd.iterations must be positive".into()));
        }
        self.failure_plan()?;
        report.push(format!("tree ({},{}) with {} workers", tree.n(), tree.layers(), tree.num_workers()));
        Ok(report)
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn cmd_validate(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    cfg.validate()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub scheme: SchemeKind,
    pub final_ner: f64,
    pub final_rer: f64,
    pub sim_time: f64,
    /// Largest absolute coordinate gap to the reference run over all iterations.
    pub max_abs_gap: f64,
}

fn max_abs_gap(a: &Trace, b: &Trace) -> f64 {
    a.rows
        .iter()
        .zip(&b.rows)
        .flat_map(|(x, y)| x.theta.iter().zip(&y.theta).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// Writes `train_<scheme>.csv`, `theta_<scheme>.csv` and `train_summary.csv`.
/// Gaps are measured against the first listed full-gradient scheme.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let (data, truth) = cfg.dataset()?;
    let step = cfg.step(&data)?;
    let mut traces = Vec::new();
    for scheme in cfg.schemes()? {
        let gd = GdConfig {
            step,
            iterations: cfg.gd.iterations,
            lambda: cfg.gd.lambda,
            scheme,
            model: cfg.data.model,
            seed: cfg.experiment.seed,
            latency: cfg.gd.timed.then(|| cfg.latency_config(data.len())),
        };
        let trace = gd_run(&data, truth.as_deref(), &gd)?;
        let kind = scheme.kind();
        fs::write(out.join(format!("train_{kind}.csv")), trace.to_csv()?)?;
        fs::write(out.join(format!("theta_{kind}.csv")), trace.theta_csv()?)?;
        traces.push((kind, trace));
    }
    let reference = traces.iter().find(|(k, _)| *k != SchemeKind::Sgd).map(|(_, t)| t.clone());
    let summaries: Vec<TrainSummary> = traces
        .iter()
        .map(|(kind, trace)| {
            let last = trace.rows.last().expect("iterations >= 1");
            TrainSummary {
                scheme: *kind,
                final_ner: last.ner,
                final_rer: last.rer,
                sim_time: last.sim_time,
                max_abs_gap: reference.as_ref().map_or(f64::NAN, |r| max_abs_gap(trace, r)),
            }
        })
        .collect();
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.scheme.to_string(),
                s.final_ner.to_string(),
                s.final_rer.to_string(),
                s.sim_time.to_string(),
                s.max_abs_gap.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("train_summary.csv"),
        &["scheme", "final_ner", "final_rer", "sim_time", "max_abs_theta_gap"],
        &rows,
    )?;
    Ok(summaries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub scheme: SchemeKind,
    pub mean: f64,
    pub half_width: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Whether the available schemes' means follow `cr < rar < gc < umw`.
pub fn ordering_holds(rows: &[LatencyRow]) -> bool {
    let order = [SchemeKind::Cr, SchemeKind::Rar, SchemeKind::Gc, SchemeKind::Umw];
    let means: Vec<f64> = order
        .iter()
        .filter_map(|k| rows.iter().find(|r| r.scheme == *k).map(|r| r.mean))
        .collect();
    means.windows(2).all(|w| w[0] < w[1])
}

/// Writes `latency_summary.csv` (and `events_<scheme>.csv` with `trace`).
pub fn cmd_latency(cfg: &ExperimentConfig, out: &Path, trace: bool) -> Result<Vec<LatencyRow>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let lat = cfg.latency_config(cfg.declared_d()?);
    let mut rows = Vec::new();
    for scheme in cfg.schemes()? {
        let est = mc_expected_latency(&scheme, &lat, cfg.experiment.trials)?;
        let (lower, upper) = match scheme {
            Scheme::CodedReduce { n, layers, s } if s > 0 => {
                let (lo, hi) = cr_bounds(&lat, n, layers, s)?;
                (Some(lo), Some(hi))
            }
            _ => (None, None),
        };
        if trace {
            let outcome = simulate_iteration(&scheme, &lat, 0, true)?;
            fs::write(out.join(format!("events_{}.csv", scheme.kind())), outcome.events_csv()?)?;
        }
        rows.push(LatencyRow {
            scheme: scheme.kind(),
            mean: est.mean,
            half_width: est.half_width_95,
            lower,
            upper,
        });
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.scheme.to_string(),
                r.mean.to_string(),
                (r.mean - r.half_width).to_string(),
                (r.mean + r.half_width).to_string(),
                opt(r.lower),
                opt(r.upper),
            ]
        })
        .collect();
    write_csv(
        &out.join("latency_summary.csv"),
        &["scheme", "mean", "ci95_low", "ci95_high", "bound_lower", "bound_upper"],
        &table,
    )?;
    Ok(rows)
}

/// Parses `latency_summary.csv`.
pub fn read_latency_summary(text: &str) -> Result<Vec<LatencyRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |k: usize| record.get(k).ok_or_else(|| Error::Parse("short latency row".into()));
        let num = |k: usize| -> Result<Option<f64>> {
            let f = field(k)?;
            if f.is_empty() {
                return Ok(None);
            }
            f.parse().map(Some).map_err(|e| Error::Parse(format!("latency value {f}: {e}")))
        };
        let mean = num(1)?.ok_or_else(|| Error::Parse("missing mean".into()))?;
        let high = num(3)?.ok_or_else(|| Error::Parse("missing interval".into()))?;
        rows.push(LatencyRow {
            scheme: field(0)?.parse()?,
            mean,
            half_width: high - mean,
            lower: num(4)?,
            upper: num(5)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub patterns_checked: usize,
    pub patterns_passed: usize,
    pub max_error: f64,
    pub code_sets_checked: usize,
    pub code_valid: bool,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.code_valid && self.patterns_passed == self.patterns_checked
    }
}

const RECOVERY_TOLERANCE: f64 = 1e-9;

/// Recovers the full gradient under every pattern (up to `pattern_cap`) with
/// the identity oracle and the configured regression oracle; writes `verify.csv`.
pub fn cmd_verify(cfg: &ExperimentConfig, out: &Path) -> Result<VerifyReport> {
    fs::create_dir_all(out)?;
    let (data, _) = cfg.dataset()?;
    let assignment = cfg.assignment(data.len())?;
    let (code_valid, code_sets_checked) = match validate_code(assignment.code()) {
        CodeCheck::Valid { sets_checked, .. } => (true, sets_checked),
        CodeCheck::Invalid { .. } => (false, 0),
    };
    let tree = assignment.tree().clone();
    let patterns = enumerate_patterns(&tree, assignment.s(), cfg.experiment.pattern_cap, cfg.experiment.seed)?;

    let identity = IdentityOracle { d: data.len() };
    let linear = LinearOracle::new(&data);
    let logistic = LogisticOracle::new(&data);
    let regression: &dyn GradientOracle = match cfg.data.model {
        Model::Linear => &linear,
        Model::Logistic => &logistic,
    };
    let theta: Vec<f64> = (0..data.dim()).map(|k| ((k % 7) as f64 - 3.0) / 10.0).collect();
    let every = [crate::allocation::WeightedSlice::new(0, data.len(), 1.0)];
    let oracles: [(&dyn GradientOracle, Vec<f64>, Vec<f64>); 2] = [
        (&identity, Vec::new(), vec![1.0; data.len()]),
        (regression, theta.clone(), regression.gradient(&theta, &every).into_inner()),
    ];

    let mut passed = 0;
    let mut max_error: f64 = 0.0;
    for pattern in &patterns {
        let mut ok = true;
        for (oracle, at, full) in &oracles {
            match cr_execute(&assignment, pattern, *oracle, at) {
                Ok(g) => {
                    let err = g.rel_inf_error(full);
                    max_error = max_error.max(err);
                    ok &= err <= RECOVERY_TOLERANCE;
                }
                Err(_) => ok = false,
            }
        }
        passed += usize::from(ok);
    }
    let report = VerifyReport {
        patterns_checked: patterns.len(),
        patterns_passed: passed,
        max_error,
        code_sets_checked,
        code_valid,
    };
    write_csv(
        &out.join("verify.csv"),
        &["check", "passed", "total", "max_error"],
        &[
            vec![
                "recovery".into(),
                report.patterns_passed.to_string(),
                report.patterns_checked.to_string(),
                report.max_error.to_string(),
            ],
            vec![
                "code".into(),
                if code_valid { code_sets_checked } else { 0 }.to_string(),
                code_sets_checked.max(1).to_string(),
                String::new(),
            ],
        ],
    )?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct TransportDemoReport {
    pub statuses: BTreeMap<NodeId, NodeStatus>,
    pub gradient: Option<Vec<f64>>,
    /// Relative infinity-norm gap to the in-memory engine.
    pub engine_gap: Option<f64>,
    pub timeouts: Vec<(NodeId, usize, usize)>,
}

/// Runs one round with `exe` as the node program and writes `transport_gradient.csv`.
pub fn cmd_transport_demo(cfg: &ExperimentConfig, out: &Path, exe: &Path) -> Result<TransportDemoReport> {
    fs::create_dir_all(out)?;
    let (data, _) = cfg.dataset()?;
    let assignment = cfg.assignment(data.len())?;
    let theta: Vec<f64> = (0..data.dim()).map(|k| ((k % 5) as f64 - 2.0) / 10.0).collect();
    let setup = RoundSetup {
        assignment: assignment.clone(),
        data: data.clone(),
        model: cfg.data.model,
        theta: theta.clone(),
        deadline: Duration::from_millis(cfg.transport.deadline_ms),
    };
    let plan = cfg.failure_plan()?;
    let report = orchestrate(exe, &out.join("transport"), &setup, &plan)?;
    let timeouts = report.timeouts();
    let engine_gap = match &report.gradient {
        Some(g) => {
            let linear = LinearOracle::new(&data);
            let logistic = LogisticOracle::new(&data);
            let oracle: &dyn GradientOracle = match cfg.data.model {
                Model::Linear => &linear,
                Model::Logistic => &logistic,
            };
            let reference = cr_execute(&assignment, &StragglerPattern::new(), oracle, &theta)?;
            crate::transport::write_vector_csv(&out.join("transport_gradient.csv"), g)?;
            Some(reference.rel_inf_error(g))
        }
        None => None,
    };
    Ok(TransportDemoReport {
        statuses: report.statuses,
        gradient: report.gradient,
        engine_gap,
        timeouts,
    })
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.experiment.out = out.clone();
    }
    if let Some(trials) = cli.trials {
        cfg.experiment.trials = trials;
    }
    Ok(cfg)
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    if let Command::Node { round, node } = &cli.command {
        let report = run_node(round, *node)?;
        println!("{}", report.line());
        return Ok(report.exit_code());
    }
    let cfg = load_config(&cli)?;
    let out = cfg.experiment.out.clone();
    match cli.command {
        Command::Validate => {
            for line in cmd_validate(&cfg)? {
                println!("{line}");
            }
            println!("config ok");
            Ok(0)
        }
        Command::Train => {
            for s in cmd_train(&cfg, &out)? {
                println!(
                    "{}: final NER {:.6e}, simulated time {:.4}, max |theta difference| {:.3e}",
                    s.scheme, s.final_ner, s.sim_time, s.max_abs_gap
                );
            }
            Ok(0)
        }
        Command::Latency { trace } => {
            let rows = cmd_latency(&cfg, &out, trace)?;
            for r in &rows {
                let bounds = match (r.lower, r.upper) {
                    (Some(lo), Some(hi)) => format!(", envelope [{lo:.4}, {hi:.4}]"),
                    _ => String::new(),
                };
                println!("{}: mean {:.4} +/- {:.4}{bounds}", r.scheme, r.mean, r.half_width);
            }
            let verdict = if ordering_holds(&rows) { "holds" } else { "violated" };
            println!("ordering cr < rar < gc < umw: {verdict}");
            Ok(0)
        }
        Command::Verify => {
            let report = cmd_verify(&cfg, &out)?;
            println!(
                "patterns {}/{} recovered (max relative error {:.3e})",
                report.patterns_passed, report.patterns_checked, report.max_error
            );
            println!(
                "code {} over {} survivor sets",
                if report.code_valid { "valid" } else { "INVALID" },
                report.code_sets_checked
            );
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::TransportDemo => {
            let exe = std::env::current_exe()?;
            let report = cmd_transport_demo(&cfg, &out, &exe)?;
            for (node, status) in &report.statuses {
                println!("{node}: {status:?}");
            }
            if let Some((parent, received, required)) = report.timeouts.first() {
                println!("aborted: parent {parent} received {received} of {required} messages");
                return Ok(2);
            }
            match report.engine_gap {
                Some(gap) => {
                    println!("master gradient matches engine (relative gap {gap:.3e})");
                    Ok(0)
                }
                None => {
                    println!("master produced no gradient");
                    Ok(2)
                }
            }
        }
        Command::Node { .. } => unreachable!("handled above"),
    }
}
