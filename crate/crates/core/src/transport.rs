//! One coded aggregation round over local TCP connections, one OS process per node.
//!
//! Frames are `b"CRD1"`, a type byte (0 model, 1 coded gradient, 2 shutdown),
//! the sender's layer (`u16`) and index (`u32`), a payload length (`u32`) and
//! that many `f64`s, everything little-endian.
//!
//! Each process reads a shared TOML round file naming every endpoint, the
//! encoding matrix and the paths of the dataset and assignment CSVs. A parent
//! answers every connecting child with the model, decodes the first `n - s`
//! gradients to arrive and ignores the rest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::allocation::{read_assignment_csv, Assignment, WeightedSlice};
use crate::codes::{decode_row, EncodingMatrix};
use crate::engine::{GradientOracle, GradientVec};
use crate::error::{Error, Result};
use crate::ml::{Dataset, LinearOracle, LogisticOracle, Model};
use crate::topology::{NodeId, RegularTree};

pub const MAGIC: [u8; 4] = *b"CRD1";
const HEADER_LEN: usize = 15;
/// Refuse frames claiming more than this many values.
const MAX_PAYLOAD: u32 = 1 << 26;
pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(30);

/// Process exit codes of `run_node`.
pub const EXIT_TIMEOUT: i32 = 3;
pub const EXIT_UNREACHABLE: i32 = 4;
pub const EXIT_CRASHED: i32 = 86;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Model = 0,
    Gradient = 1,
    Shutdown = 2,
}

impl TryFrom<u8> for MsgType {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        match b {
            0 => Ok(MsgType::Model),
            1 => Ok(MsgType::Gradient),
            2 => Ok(MsgType::Shutdown),
            other => Err(Error::Wire(format!("unknown message type {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub sender: NodeId,
    pub payload: Vec<f64>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, sender: NodeId, payload: Vec<f64>) -> Self {
        WireMessage {
            msg_type,
            sender,
            payload,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let layer = u16::try_from(self.sender.layer)
            .map_err(|_| Error::Wire(format!("layer {} does not fit 16 bits", self.sender.layer)))?;
        let index = u32::try_from(self.sender.index)
            .map_err(|_| Error::Wire(format!("index {} does not fit 32 bits", self.sender.index)))?;
        let len = u32::try_from(self.payload.len())
            .ok()
            .filter(|&l| l <= MAX_PAYLOAD)
            .ok_or_else(|| Error::Wire(format!("payload of {} values is too long", self.payload.len())))?;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&layer.to_le_bytes());
        out.extend_from_slice(&index.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.encode()?)?;
        w.flush()?;
        Ok(())
    }

    /// Reads one frame. A clean end of stream before the first byte is `Ok(None)`.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut header = [0u8; HEADER_LEN];
        let mut filled = 0;
        while filled < HEADER_LEN {
            match r.read(&mut header[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(Error::Wire("stream ended inside a frame header".into())),
                Ok(k) => filled += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        if header[..4] != MAGIC {
            return Err(Error::Wire(format!("bad magic {:?}", &header[..4])));
        }
        let msg_type = MsgType::try_from(header[4])?;
        let layer = u16::from_le_bytes([header[5], header[6]]);
        let index = u32::from_le_bytes(header[7..11].try_into().expect("4 bytes"));
        let len = u32::from_le_bytes(header[11..15].try_into().expect("4 bytes"));
        if len > MAX_PAYLOAD {
            return Err(Error::Wire(format!("payload length {len} exceeds limit")));
        }
        let mut body = vec![0u8; 8 * len as usize];
        r.read_exact(&mut body).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Wire("stream ended inside a payload".into()),
            _ => e.into(),
        })?;
        let payload = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Some(WireMessage {
            msg_type,
            sender: NodeId::new(layer as usize, index as usize),
            payload,
        }))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let msg = WireMessage::read_from(&mut cursor)?.ok_or_else(|| Error::Wire("empty input".into()))?;
        if !cursor.is_empty() {
            return Err(Error::Wire(format!("{} trailing bytes", cursor.len())));
        }
        Ok(msg)
    }
}

fn node_key(node: NodeId) -> String {
    format!("{}.{}", node.layer, node.index)
}

/// Everything a node process needs, shared by all processes of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundFile {
    pub n: usize,
    pub layers: usize,
    pub s: usize,
    pub model: Model,
    pub theta: Vec<f64>,
    /// Encoding matrix rows.
    pub code: Vec<Vec<f64>>,
    pub dataset: PathBuf,
    pub assignment: PathBuf,
    /// `"layer.index"` to `host:port` for the master and every internal node.
    pub endpoints: BTreeMap<String, String>,
    pub deadline_ms: u64,
    /// Where the master writes the recovered gradient.
    pub output: PathBuf,
    /// Nodes that exit right after receiving the model, without computing.
    #[serde(default)]
    pub crash_before_compute: Vec<String>,
}

impl RoundFile {
    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    fn endpoint(&self, node: NodeId) -> Result<SocketAddr> {
        let key = node_key(node);
        let addr = self
            .endpoints
            .get(&key)
            .ok_or_else(|| Error::Config(format!("no endpoint for node {key}")))?;
        addr.parse()
            .map_err(|e| Error::Config(format!("endpoint {addr} for {key}: {e}")))
    }

    fn deadline(&self) -> Duration {
        Duration::from_millis(self.deadline_ms)
    }
}

/// How a node process ended.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeReport {
    Completed,
    /// A parent heard from too few children before its deadline.
    TimedOut { received: usize, required: usize },
    /// The node could not reach (or lost) its parent.
    ParentUnreachable,
    /// The node exited on purpose after receiving the model.
    Crashed,
}

impl NodeReport {
    pub fn exit_code(&self) -> i32 {
        match self {
            NodeReport::Completed => 0,
            NodeReport::TimedOut { .. } => EXIT_TIMEOUT,
            NodeReport::ParentUnreachable => EXIT_UNREACHABLE,
            NodeReport::Crashed => EXIT_CRASHED,
        }
    }

    /// Single-line form printed on the node's stdout.
    pub fn line(&self) -> String {
        match self {
            NodeReport::Completed => "completed".into(),
            NodeReport::TimedOut { received, required } => {
                format!("timeout received={received} required={required}")
            }
            NodeReport::ParentUnreachable => "unreachable".into(),
            NodeReport::Crashed => "crashed".into(),
        }
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let line = line.trim();
        match line {
            "completed" => return Some(NodeReport::Completed),
            "unreachable" => return Some(NodeReport::ParentUnreachable),
            "crashed" => return Some(NodeReport::Crashed),
            _ => {}
        }
        let rest = line.strip_prefix("timeout ")?;
        let mut received = None;
        let mut required = None;
        for part in rest.split_whitespace() {
            match part.split_once('=')? {
                ("received", v) => received = v.parse().ok(),
                ("required", v) => required = v.parse().ok(),
                _ => return None,
            }
        }
        Some(NodeReport::TimedOut {
            received: received?,
            required: required?,
        })
    }
}

fn connect_with_retry(addr: SocketAddr, deadline: Instant) -> Option<TcpStream> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(250)) {
            Ok(stream) => return Some(stream),
            Err(_) if Instant::now() < deadline => thread::sleep(Duration::from_millis(20)),
            Err(_) => return None,
        }
    }
}

fn local_gradient(model: Model, data: &Dataset, theta: &[f64], slices: &[WeightedSlice]) -> GradientVec {
    match model {
        Model::Linear => LinearOracle::new(data).gradient(theta, slices),
        Model::Logistic => LogisticOracle::new(data).gradient(theta, slices),
    }
}

/// Serves children: sends each the model, forwards its gradient frame.
fn spawn_acceptor(listener: TcpListener, me: NodeId, theta: Arc<Vec<f64>>, tx: mpsc::Sender<WireMessage>) {
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let theta = Arc::clone(&theta);
            let tx = tx.clone();
            thread::spawn(move || {
                let _ = stream.set_nodelay(true);
                let mut writer = BufWriter::new(match stream.try_clone() {
                    Ok(s) => s,
                    Err(_) => return,
                });
                if WireMessage::new(MsgType::Model, me, theta.to_vec())
                    .write_to(&mut writer)
                    .is_err()
                {
                    return;
                }
                let mut reader = BufReader::new(stream);
                match WireMessage::read_from(&mut reader) {
                    Ok(Some(msg)) if msg.msg_type == MsgType::Gradient => {
                        let _ = tx.send(msg);
                    }
                    Ok(_) => {}
                    Err(e) => log::debug!("{me}: dropped child connection: {e}"),
                }
            });
        }
    });
}

/// Runs one node of the round described by `round_path`.
pub fn run_node(round_path: &Path, me: NodeId) -> Result<NodeReport> {
    let round = RoundFile::load(round_path)?;
    let tree = RegularTree::new(round.n, round.layers)?;
    if !tree.contains(me) {
        return Err(Error::InvalidTree(format!("node {me} is not in the ({},{}) tree", round.n, round.layers)));
    }
    let code = EncodingMatrix::from_rows(round.s, round.code.clone())?;
    if code.n() != round.n {
        return Err(Error::Config(format!("encoding matrix has {} rows, tree has n={}", code.n(), round.n)));
    }
    let data = Dataset::read_csv(&round.dataset)?;
    let mut shards = read_assignment_csv(&fs::read_to_string(&round.assignment)?)?;
    let local = shards.remove(&me).unwrap_or_default();
    let start = Instant::now();
    let deadline = start + round.deadline();

    let listener = if tree.is_leaf(me) {
        None
    } else {
        Some(TcpListener::bind(round.endpoint(me)?)?)
    };

    // Model from the parent; the master owns it.
    let mut upstream = None;
    let theta = if me.is_master() {
        round.theta.clone()
    } else {
        let parent = tree.parent(me).expect("worker has a parent");
        let Some(stream) = connect_with_retry(round.endpoint(parent)?, deadline) else {
            return Ok(NodeReport::ParentUnreachable);
        };
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(round.deadline()))?;
        let mut reader = BufReader::new(stream.try_clone()?);
        match WireMessage::read_from(&mut reader) {
            Ok(Some(msg)) if msg.msg_type == MsgType::Model => {
                upstream = Some(stream);
                msg.payload
            }
            Ok(_) | Err(_) => return Ok(NodeReport::ParentUnreachable),
        }
    };
    if theta.len() != data.dim() {
        return Err(Error::Wire(format!("model has {} coordinates, data has {}", theta.len(), data.dim())));
    }
    if round.crash_before_compute.contains(&node_key(me)) {
        return Ok(NodeReport::Crashed);
    }

    let (tx, rx) = mpsc::channel();
    if let Some(listener) = listener {
        spawn_acceptor(listener, me, Arc::new(theta.clone()), tx);
    }

    let mut message = if me.is_master() {
        GradientVec::zeros(data.dim())
    } else {
        local_gradient(round.model, &data, &theta, &local)
    };

    if !tree.is_leaf(me) {
        let required = round.n - round.s;
        // The child deadline restarts once this node has the model.
        let collect_until = Instant::now() + round.deadline();
        let children: BTreeSet<NodeId> = tree.children(me).into_iter().collect();
        let mut arrived: Vec<WireMessage> = Vec::with_capacity(required);
        while arrived.len() < required {
            let left = collect_until.saturating_duration_since(Instant::now());
            match rx.recv_timeout(left) {
                Ok(msg) => {
                    let fresh = children.contains(&msg.sender)
                        && msg.payload.len() == data.dim()
                        && arrived.iter().all(|m| m.sender != msg.sender);
                    if fresh {
                        arrived.push(msg);
                    } else {
                        log::warn!("{me}: ignoring frame from {}", msg.sender);
                    }
                }
                Err(_) => {
                    return Ok(NodeReport::TimedOut {
                        received: arrived.len(),
                        required,
                    })
                }
            }
        }
        let positions: Vec<usize> = arrived.iter().map(|m| tree.child_position(m.sender)).collect();
        let row = decode_row(&code, &positions)?;
        for (pos, msg) in positions.iter().zip(&arrived) {
            message.add_scaled(row.coefficients()[*pos], &msg.payload);
        }
        log::info!("{me}: decoded children {:?}", arrived.iter().map(|m| m.sender).collect::<Vec<_>>());
    }

    if me.is_master() {
        write_vector_csv(&round.output, &message)?;
    } else {
        let stream = upstream.expect("connected to parent");
        let mut writer = BufWriter::new(&stream);
        if WireMessage::new(MsgType::Gradient, me, message.into_inner())
            .write_to(&mut writer)
            .is_err()
        {
            return Ok(NodeReport::ParentUnreachable);
        }
    }
    Ok(NodeReport::Completed)
}

/// One `value` column with a header line.
pub fn write_vector_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["value"])?;
    for v in values {
        writer.write_record([v.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_vector_csv(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .records()
        .map(|r| {
            let r = r?;
            r.get(0)
                .ok_or_else(|| Error::Parse("empty row".into()))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("vector entry: {e}")))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    /// The process is never spawned.
    NeverStart,
    /// The process exits right after it receives the model.
    CrashBeforeCompute,
    /// The orchestrator kills the process after this delay.
    KillAfter(Duration),
}

pub type FailurePlan = BTreeMap<NodeId, Failure>;

#[derive(Clone, Debug, PartialEq)]
pub enum NodeStatus {
    Reported(NodeReport),
    NotStarted,
    Killed,
    /// Exited without a report line.
    Failed { code: Option<i32> },
}

#[derive(Clone, Debug)]
pub struct RunReport {
    /// The master's recovered gradient, if it finished.
    pub gradient: Option<Vec<f64>>,
    pub statuses: BTreeMap<NodeId, NodeStatus>,
    /// Per node, everything it wrote to stderr.
    pub logs: BTreeMap<NodeId, String>,
    pub elapsed: Duration,
}

impl RunReport {
    /// Parents that gave up waiting, top-down.
    pub fn timeouts(&self) -> Vec<(NodeId, usize, usize)> {
        self.statuses
            .iter()
            .filter_map(|(&node, status)| match status {
                NodeStatus::Reported(NodeReport::TimedOut { received, required }) => {
                    Some((node, *received, *required))
                }
                _ => None,
            })
            .collect()
    }

    /// The gradient, or the first parent timeout (or a generic failure).
    pub fn into_result(self) -> Result<Vec<f64>> {
        if let Some(&(parent, received, required)) = self.timeouts().first() {
            return Err(Error::Timeout {
                parent,
                received,
                required,
            });
        }
        self.gradient
            .ok_or_else(|| Error::Wire("master finished without output".into()))
    }
}

/// Inputs of one transport round.
#[derive(Clone, Debug)]
pub struct RoundSetup {
    pub assignment: Assignment,
    pub data: Dataset,
    pub model: Model,
    pub theta: Vec<f64>,
    pub deadline: Duration,
}

/// Ports for every listening node, reserved by binding and released right before spawning.
fn reserve_endpoints(tree: &RegularTree) -> Result<BTreeMap<String, String>> {
    let listeners: Vec<(NodeId, TcpListener)> = tree
        .parents()
        .map(|p| TcpListener::bind("127.0.0.1:0").map(|l| (p, l)))
        .collect::<io::Result<_>>()?;
    listeners
        .iter()
        .map(|(p, l)| Ok((node_key(*p), l.local_addr()?.to_string())))
        .collect()
}

/// Spawns `exe node --round FILE --node l.i` for every node, applies the
/// failure plan and gathers reports, logs and the master's output.
pub fn orchestrate(exe: &Path, workdir: &Path, setup: &RoundSetup, failures: &FailurePlan) -> Result<RunReport> {
    let started = Instant::now();
    let tree = setup.assignment.tree().clone();
    fs::create_dir_all(workdir)?;
    let dataset = workdir.join("dataset.csv");
    let assignment = workdir.join("assignment.csv");
    let output = workdir.join("gradient.csv");
    let round_path = workdir.join("round.toml");
    fs::write(&dataset, setup.data.to_csv()?)?;
    fs::write(&assignment, setup.assignment.to_csv()?)?;
    if output.exists() {
        fs::remove_file(&output)?;
    }
    let round = RoundFile {
        n: tree.n(),
        layers: tree.layers(),
        s: setup.assignment.s(),
        model: setup.model,
        theta: setup.theta.clone(),
        code: setup.assignment.code().rows().map(<[f64]>::to_vec).collect(),
        dataset,
        assignment,
        endpoints: reserve_endpoints(&tree)?,
        deadline_ms: setup.deadline.as_millis() as u64,
        output: output.clone(),
        crash_before_compute: failures
            .iter()
            .filter(|(_, f)| **f == Failure::CrashBeforeCompute)
            .map(|(&n, _)| node_key(n))
            .collect(),
    };
    round.save(&round_path)?;

    let mut children: Vec<(NodeId, Child, PathBuf)> = Vec::new();
    let mut statuses = BTreeMap::new();
    for node in tree.nodes() {
        if failures.get(&node) == Some(&Failure::NeverStart) {
            statuses.insert(node, NodeStatus::NotStarted);
            continue;
        }
        let log_path = workdir.join(format!("node_{}_{}.log", node.layer, node.index));
        let child = Command::new(exe)
            .arg("node")
            .arg("--round")
            .arg(&round_path)
            .arg("--node")
            .arg(node_key(node))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(fs::File::create(&log_path)?)
            .spawn()?;
        children.push((node, child, log_path));
    }

    // Every node finishes within its connect deadline plus one collection
    // deadline per layer below it; anything left after that is killed.
    let watchdog = started + setup.deadline * (tree.layers() as u32 + 2) + Duration::from_secs(5);
    let mut logs = BTreeMap::new();
    let mut pending = children;
    while !pending.is_empty() {
        let now = Instant::now();
        let mut still = Vec::with_capacity(pending.len());
        for (node, mut child, log_path) in pending {
            let status = if let Some(exit) = child.try_wait()? {
                let mut out = String::new();
                if let Some(mut stdout) = child.stdout.take() {
                    stdout.read_to_string(&mut out)?;
                }
                Some(match out.lines().last().and_then(NodeReport::parse_line) {
                    Some(report) => NodeStatus::Reported(report),
                    None => NodeStatus::Failed { code: exit.code() },
                })
            } else if matches!(failures.get(&node), Some(Failure::KillAfter(d)) if now >= started + *d) {
                let _ = child.kill();
                let _ = child.wait();
                Some(NodeStatus::Killed)
            } else if now >= watchdog {
                let _ = child.kill();
                let _ = child.wait();
                Some(NodeStatus::Failed { code: None })
            } else {
                None
            };
            match status {
                Some(status) => {
                    statuses.insert(node, status);
                    logs.insert(node, fs::read_to_string(&log_path).unwrap_or_default());
                }
                None => still.push((node, child, log_path)),
            }
        }
        pending = still;
        if !pending.is_empty() {
            thread::sleep(Duration::from_millis(5));
        }
    }

    let gradient = match statuses.get(&NodeId::MASTER) {
        Some(NodeStatus::Reported(NodeReport::Completed)) => Some(read_vector_csv(&output)?),
        _ => None,
    };
    Ok(RunReport {
        gradient,
        statuses,
        logs,
        elapsed: started.elapsed(),
    })
}
