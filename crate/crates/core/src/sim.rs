//! Deterministic synthetic runs with known ground truth.
//!
//! A [`SimConfig`] describes a workflow DAG and the I/O each task performs.
//! [`generate_run`] turns it into per-node I/O and fork traces, a Nextflow log,
//! pod metadata and a Kubernetes events capture, all in the ingest formats,
//! together with the task that really produced every record.
//! [`inject_loss`] then removes records the way an overrun ring buffer would.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::normalize_task_name;
use crate::ingest::{
    format_fork_event, format_io_event, format_pod_meta, FORK_TRACE_FILE, FORK_TRACE_HEADER, IO_TRACE_FILE,
    IO_TRACE_HEADER, LOSS_WARNINGS_FILE,
};
use crate::model::{ForkEvent, IoEvent, NodeTrace, OpKind, PodMeta, Seconds, SwmsSource, TaskRecord};

pub const NEXTFLOW_LOG_FILE: &str = "nextflow.log";
pub const POD_META_FILE: &str = "pods.tsv";
pub const K8S_EVENTS_FILE: &str = "k8s_events.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const DROP_LEDGER_FILE: &str = "drop_ledger.csv";

const O_RDONLY_LARGEFILE: u32 = 0x0000_8000;
const O_WRONLY_CREAT_TRUNC_LARGEFILE: u32 = 0x0000_8241;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("{0}")]
    Syntax(String),
    #[error("{0}")]
    Table(String),
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> SimError {
    SimError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PidMode {
    /// Every node draws pids and cgroup ids from its own range.
    #[default]
    Disjoint,
    /// All nodes reuse the same pid and cgroup values.
    Collide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IoMode {
    Read,
    Write,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Consecutive offsets, `gap_ms` apart.
    #[default]
    Sequential,
    /// Offsets `stride` bytes apart, `gap_ms` apart.
    Strided,
    /// Consecutive offsets issued back to back, one clock step apart.
    Bulk,
}

/// One open, access and close of a file, or a single delete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoStep {
    /// Relative names resolve inside the task's work dir, or inside the
    /// producer's work dir when `from_task` is set.
    pub file: String,
    pub mode: IoMode,
    #[serde(default)]
    pub pattern: Pattern,
    #[serde(default = "one")]
    pub ops: u64,
    #[serde(default = "default_size")]
    pub size: u64,
    /// Offset distance for strided access; defaults to twice `size`.
    #[serde(default)]
    pub stride: Option<u64>,
    /// Spacing between accesses; defaults to the clock step.
    #[serde(default)]
    pub gap_ms: Option<u64>,
    /// Earliest start of the step, relative to the task start.
    #[serde(default)]
    pub at_ms: Option<u64>,
    /// 0 is the task's root process, 1.. its workers.
    #[serde(default)]
    pub process: u32,
    /// Read a file written by this task.
    #[serde(default)]
    pub from_task: Option<String>,
}

fn one() -> u64 {
    1
}

fn default_size() -> u64 {
    4096
}

fn default_true() -> bool {
    true
}

impl IoStep {
    /// Trace records this step emits.
    pub fn record_count(&self) -> u64 {
        match self.mode {
            IoMode::Delete => 1,
            _ => self.ops + 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTask {
    pub name: String,
    pub node: String,
    #[serde(default)]
    pub container: bool,
    /// Worker processes forked by the task's root process.
    #[serde(default)]
    pub processes: u32,
    /// Tasks that must finish first, beyond those implied by `from_task`.
    #[serde(default)]
    pub after: Vec<String>,
    /// Minimum runtime from first to last record.
    #[serde(default)]
    pub duration_ms: Option<u64>,
    #[serde(default)]
    pub io: Vec<IoStep>,
}

/// Per-kind drop probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossModel {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub open: f64,
    #[serde(default)]
    pub read: f64,
    #[serde(default)]
    pub write: f64,
    #[serde(default)]
    pub close: f64,
    #[serde(default)]
    pub delete: f64,
    #[serde(default)]
    pub fork: f64,
}

impl LossModel {
    /// The same probability for every record kind.
    pub fn uniform(p: f64, seed: u64) -> LossModel {
        LossModel {
            seed,
            open: p,
            read: p,
            write: p,
            close: p,
            delete: p,
            fork: p,
        }
    }

    fn io(&self, kind: OpKind) -> f64 {
        match kind {
            OpKind::Open => self.open,
            OpKind::Read => self.read,
            OpKind::Write => self.write,
            OpKind::Close => self.close,
            OpKind::Delete => self.delete,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        for (k, p) in [
            ("open", self.open),
            ("read", self.read),
            ("write", self.write),
            ("close", self.close),
            ("delete", self.delete),
            ("fork", self.fork),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("loss.{k}"), "probability must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn is_lossless(&self) -> bool {
        [self.open, self.read, self.write, self.close, self.delete, self.fork]
            .iter()
            .all(|p| *p == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    /// Start of the run, decimal epoch seconds.
    #[serde(default = "default_clock_base")]
    pub clock_base: String,
    #[serde(default = "one")]
    pub step_ms: u64,
    #[serde(default = "default_nodes")]
    pub nodes: Vec<String>,
    #[serde(default)]
    pub pid_mode: PidMode,
    /// Emit work-dir marker accesses.
    #[serde(default = "default_true")]
    pub markers: bool,
    #[serde(default = "default_work_root")]
    pub work_root: String,
    #[serde(default)]
    pub loss: Option<LossModel>,
    #[serde(default)]
    pub tasks: Vec<SimTask>,
}

fn default_clock_base() -> String {
    "1714067937.000".into()
}

fn default_nodes() -> Vec<String> {
    vec!["n1".into()]
}

fn default_work_root() -> String {
    "/work".into()
}

impl Default for SimConfig {
    fn default() -> SimConfig {
        SimConfig {
            seed: 0,
            clock_base: default_clock_base(),
            step_ms: 1,
            nodes: default_nodes(),
            pid_mode: PidMode::Disjoint,
            markers: true,
            work_root: default_work_root(),
            loss: None,
            tasks: Vec::new(),
        }
    }
}

impl std::str::FromStr for SimConfig {
    type Err = SimError;

    fn from_str(s: &str) -> Result<SimConfig, SimError> {
        let config: SimConfig = toml::from_str(s).map_err(|e| SimError::Syntax(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<SimConfig, SimError> {
        fs::read_to_string(path).map_err(io_err(path))?.parse()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// I/O records a lossless run emits.
    pub fn record_count(&self) -> u64 {
        let markers = if self.markers { 4 } else { 0 };
        self.tasks
            .iter()
            .map(|t| markers + t.io.iter().map(IoStep::record_count).sum::<u64>())
            .sum()
    }

    fn task_index(&self) -> HashMap<&str, usize> {
        self.tasks.iter().enumerate().map(|(i, t)| (t.name.as_str(), i)).collect()
    }

    /// Checks the config and returns the tasks in a schedulable order.
    pub fn validate(&self) -> Result<Vec<usize>, SimError> {
        self.clock_base
            .parse::<Seconds>()
            .map_err(|e| invalid("clock_base", e.to_string()))?;
        if self.step_ms == 0 {
            return Err(invalid("step_ms", "must be at least 1"));
        }
        if self.nodes.is_empty() {
            return Err(invalid("nodes", "at least one node is required"));
        }
        let mut seen = HashSet::new();
        for n in &self.nodes {
            if n.is_empty() || n.contains(['/', '\\', '\t', '\n']) || n == "." || n == ".." {
                return Err(invalid("nodes", format!("`{n}` is not usable as a directory name")));
            }
            if !seen.insert(n) {
                return Err(invalid("nodes", format!("duplicate node `{n}`")));
            }
        }
        if !self.work_root.starts_with('/') {
            return Err(invalid("work_root", "must be an absolute path"));
        }
        if let Some(loss) = &self.loss {
            loss.validate()?;
        }

        let index = self.task_index();
        let mut names = HashSet::new();
        if let Some(t) = self.tasks.iter().find(|t| !names.insert(t.name.as_str())) {
            return Err(invalid("tasks.name", format!("duplicate task `{}`", t.name)));
        }
        let mut normalized = HashMap::new();
        let mut deps: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.tasks.len()];
        for (i, t) in self.tasks.iter().enumerate() {
            let key = |field: &str| format!("tasks[{i}].{field}");
            if t.name.trim().is_empty() || t.name.contains([';', ']', '\n', '\t']) {
                return Err(invalid(key("name"), "must be non-empty without `;`, `]`, tabs or newlines"));
            }
            if let Some(other) = normalized.insert(normalize_task_name(&t.name), i) {
                return Err(invalid(
                    key("name"),
                    format!("normalizes to the same label as `{}`", self.tasks[other].name),
                ));
            }
            if !self.nodes.contains(&t.node) {
                return Err(invalid(key("node"), format!("unknown node `{}`", t.node)));
            }
            for a in &t.after {
                let &j = index
                    .get(a.as_str())
                    .ok_or_else(|| invalid(key("after"), format!("unknown task `{a}`")))?;
                deps[i].insert(j);
            }
            for (s, step) in t.io.iter().enumerate() {
                let key = |field: &str| format!("tasks[{i}].io[{s}].{field}");
                if step.file.is_empty() {
                    return Err(invalid(key("file"), "must not be empty"));
                }
                if step.mode != IoMode::Delete && step.ops == 0 {
                    return Err(invalid(key("ops"), "must be at least 1"));
                }
                if step.process > t.processes {
                    return Err(invalid(
                        key("process"),
                        format!("task has only {} worker processes", t.processes),
                    ));
                }
                if let Some(from) = &step.from_task {
                    if step.mode != IoMode::Read {
                        return Err(invalid(key("from_task"), "only read steps can name a producer"));
                    }
                    let &j = index
                        .get(from.as_str())
                        .ok_or_else(|| invalid(key("from_task"), format!("unknown task `{from}`")))?;
                    deps[i].insert(j);
                }
            }
        }

        // Kahn's algorithm, lowest index first so the order is stable
        let mut indegree: Vec<usize> = deps.iter().map(BTreeSet::len).collect();
        let mut ready: BTreeSet<usize> = (0..self.tasks.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.tasks.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for (j, d) in deps.iter().enumerate() {
                if d.contains(&i) {
                    indegree[j] -= 1;
                    if indegree[j] == 0 {
                        ready.insert(j);
                    }
                }
            }
        }
        if order.len() != self.tasks.len() {
            let stuck = (0..self.tasks.len()).find(|&i| indegree[i] > 0).unwrap();
            return Err(invalid(
                format!("tasks[{stuck}].after"),
                format!("dependency cycle through `{}`", self.tasks[stuck].name),
            ));
        }
        Ok(order)
    }
}

/// The task behind one emitted I/O record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRow {
    pub node: String,
    /// Position in the node's lossless I/O trace.
    pub seq: usize,
    pub task: String,
    pub pid: u32,
    pub cgroupid: u64,
    pub dropped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFile {
    Io,
    Fork,
}

/// One record removed by loss injection.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub node: String,
    pub record: RecordFile,
    /// Position in the node's lossless trace of that kind.
    pub seq: usize,
    /// Operation letter for I/O records, `F` for forks.
    pub kind: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub rows: Vec<TruthRow>,
    pub drops: Vec<DroppedRecord>,
}

impl GroundTruth {
    /// Reads the label and drop ledger files of a run directory.
    pub fn read(dir: &Path) -> Result<GroundTruth, SimError> {
        fn rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, SimError> {
            let mut r = csv::Reader::from_path(path).map_err(|e| SimError::Table(format!("{}: {e}", path.display())))?;
            r.deserialize()
                .collect::<Result<_, _>>()
                .map_err(|e| SimError::Table(format!("{}: {e}", path.display())))
        }
        let ledger = dir.join(DROP_LEDGER_FILE);
        Ok(GroundTruth {
            rows: rows(&dir.join(GROUND_TRUTH_FILE))?,
            drops: if ledger.exists() { rows(&ledger)? } else { Vec::new() },
        })
    }
}

/// Generated records of one node; dropped records stay listed but flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct SimNode {
    pub node_id: String,
    pub io_events: Vec<IoEvent>,
    pub io_dropped: Vec<bool>,
    pub fork_events: Vec<ForkEvent>,
    pub fork_dropped: Vec<bool>,
    /// Task id owning each I/O record.
    pub io_task: Vec<u64>,
    pub io_cgroup: Vec<u64>,
}

impl SimNode {
    /// The trace as ingest would see it after loss.
    pub fn trace(&self) -> NodeTrace {
        let dropped = self.io_dropped.iter().filter(|d| **d).count() as u64;
        NodeTrace {
            node_id: self.node_id.clone(),
            io_events: self.surviving_io().map(|(_, e)| e.clone()).collect(),
            fork_events: self
                .fork_events
                .iter()
                .zip(&self.fork_dropped)
                .filter(|(_, d)| !**d)
                .map(|(f, _)| *f)
                .collect(),
            reported_lost: (dropped > 0).then_some(dropped),
        }
    }

    /// Surviving I/O records with their lossless sequence numbers.
    pub fn surviving_io(&self) -> impl Iterator<Item = (usize, &IoEvent)> {
        self.io_events
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.io_dropped[*i])
    }

    /// Owner task id of each surviving I/O record, in trace order.
    pub fn surviving_owners(&self) -> Vec<u64> {
        self.surviving_io().map(|(i, _)| self.io_task[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    /// Sorted by node id.
    pub nodes: Vec<SimNode>,
    /// Ids follow config order, starting at 1.
    pub tasks: Vec<TaskRecord>,
    pub pods: Vec<PodMeta>,
    pub nextflow_log: String,
    pub k8s_events: String,
}

impl SimRun {
    pub fn traces(&self) -> Vec<NodeTrace> {
        self.nodes.iter().map(SimNode::trace).collect()
    }

    pub fn task_name(&self, task_id: u64) -> &str {
        &self.tasks[(task_id - 1) as usize].name
    }

    pub fn drops(&self) -> Vec<DroppedRecord> {
        let mut out = Vec::new();
        for n in &self.nodes {
            for (seq, e) in n.io_events.iter().enumerate().filter(|(i, _)| n.io_dropped[*i]) {
                out.push(DroppedRecord {
                    node: n.node_id.clone(),
                    record: RecordFile::Io,
                    seq,
                    kind: e.kind.letter().to_string(),
                });
            }
            for seq in (0..n.fork_events.len()).filter(|i| n.fork_dropped[*i]) {
                out.push(DroppedRecord {
                    node: n.node_id.clone(),
                    record: RecordFile::Fork,
                    seq,
                    kind: "F".into(),
                });
            }
        }
        out
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let rows = self
            .nodes
            .iter()
            .flat_map(|n| {
                n.io_events.iter().enumerate().map(move |(seq, e)| TruthRow {
                    node: n.node_id.clone(),
                    seq,
                    task: self.task_name(n.io_task[seq]).to_string(),
                    pid: e.pid,
                    cgroupid: n.io_cgroup[seq],
                    dropped: n.io_dropped[seq],
                })
            })
            .collect();
        GroundTruth {
            rows,
            drops: self.drops(),
        }
    }

    /// Writes the run directory. Files that would be empty of records are
    /// still written, except the drop ledger and loss warnings of a lossless run.
    pub fn write_to(&self, dir: &Path) -> Result<(), SimError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |path: PathBuf, body: &str| fs::write(&path, body).map_err(io_err(&path));
        for n in &self.nodes {
            let nd = dir.join(&n.node_id);
            fs::create_dir_all(&nd).map_err(io_err(&nd))?;
            let mut io = String::with_capacity(n.io_events.len() * 120 + 200);
            io.push_str(IO_TRACE_HEADER);
            io.push('\n');
            for (_, e) in n.surviving_io() {
                io.push_str(&format_io_event(e));
                io.push('\n');
            }
            write(nd.join(IO_TRACE_FILE), &io)?;
            let mut fk = format!("{FORK_TRACE_HEADER}\n");
            for (f, _) in n.fork_events.iter().zip(&n.fork_dropped).filter(|(_, d)| !**d) {
                fk.push_str(&format_fork_event(f));
                fk.push('\n');
            }
            write(nd.join(FORK_TRACE_FILE), &fk)?;
            if let Some(lost) = n.trace().reported_lost {
                write(nd.join(LOSS_WARNINGS_FILE), &format!("Possibly lost {lost} samples\n"))?;
            }
        }
        write(dir.join(NEXTFLOW_LOG_FILE), &self.nextflow_log)?;
        let pods: String = self.pods.iter().map(|p| format_pod_meta(p) + "\n").collect();
        write(dir.join(POD_META_FILE), &pods)?;
        write(dir.join(K8S_EVENTS_FILE), &self.k8s_events)?;

        let truth = self.ground_truth();
        write_csv(&dir.join(GROUND_TRUTH_FILE), &truth.rows)?;
        if !truth.drops.is_empty() {
            write_csv(&dir.join(DROP_LEDGER_FILE), &truth.drops)?;
        }
        Ok(())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SimError::Table(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| SimError::Table(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io_err(path))
}

/// A record before handle and inode ids are assigned.
struct Pending {
    at_ms: u64,
    task: usize,
    pid: u32,
    kind: OpKind,
    path: String,
    /// Identifies one open-to-close lifecycle within the node.
    lifecycle: usize,
    offset: u64,
    size: u64,
    flags: u32,
}

struct NodeBuilder {
    pending: Vec<Pending>,
    forks: Vec<(u64, ForkEvent, usize)>,
    next_pid: u32,
    next_cgroup: u64,
    executor: u32,
    lifecycles: usize,
}

/// Generates a lossless run. Output depends only on `config`.
pub fn generate_run(config: &SimConfig) -> Result<SimRun, SimError> {
    let order = config.validate()?;
    let base: Seconds = config.clock_base.parse().expect("validated");
    let base_ms = base.nanos() / 1_000_000;
    let step = config.step_ms;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut builders: BTreeMap<&str, NodeBuilder> = config
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let slot = match config.pid_mode {
                PidMode::Disjoint => i as u32 + 1,
                PidMode::Collide => 1,
            };
            let executor = slot * 100_000;
            (
                n.as_str(),
                NodeBuilder {
                    pending: Vec::new(),
                    forks: Vec::new(),
                    next_pid: executor + 1,
                    next_cgroup: slot as u64 * 1_000_000,
                    executor,
                    lifecycles: 0,
                },
            )
        })
        .collect();

    let mut used_dirs = HashSet::new();
    let work_dirs: Vec<String> = config
        .tasks
        .iter()
        .map(|_| loop {
            let d = format!(
                "{}/{:02x}/{:030x}",
                config.work_root.trim_end_matches('/'),
                rng.gen::<u8>(),
                rng.gen::<u128>() >> 8
            );
            if used_dirs.insert(d.clone()) {
                break d;
            }
        })
        .collect();
    let pod_names: Vec<Option<String>> = config
        .tasks
        .iter()
        .map(|t| t.container.then(|| format!("nf-{:032x}", rng.gen::<u128>())))
        .collect();

    let index = config.task_index();
    let mut ends = vec![0u64; config.tasks.len()];
    let mut cgroups = vec![0u64; config.tasks.len()];
    for &ti in &order {
        let task = &config.tasks[ti];
        let start = task
            .after
            .iter()
            .map(String::as_str)
            .chain(task.io.iter().filter_map(|s| s.from_task.as_deref()))
            .map(|d| ends[index[d]] + step)
            .max()
            .unwrap_or(0);
        let nb = builders.get_mut(task.node.as_str()).unwrap();
        let cgroup = if task.container {
            nb.next_cgroup += 1;
            nb.next_cgroup
        } else {
            0
        };
        cgroups[ti] = cgroup;
        let mut pids = Vec::with_capacity(task.processes as usize + 1);
        for p in 0..=task.processes {
            let pid = nb.next_pid;
            nb.next_pid += 1;
            let parent = if p == 0 { nb.executor } else { pids[0] };
            let fork = ForkEvent {
                time: ms(base_ms + start as i64),
                parent_pid: parent,
                pid,
                cgroupid: cgroup,
            };
            nb.forks.push((start, fork, nb.forks.len()));
            pids.push(pid);
        }

        let work_dir = &work_dirs[ti];
        let root = pids[0];
        let emit = |nb: &mut NodeBuilder, at_ms, pid, kind, path: String, lifecycle, offset, size, flags| {
            nb.pending.push(Pending {
                at_ms,
                task: ti,
                pid,
                kind,
                path,
                lifecycle,
                offset,
                size,
                flags,
            })
        };
        let mut cursor = start;
        if config.markers {
            let lc = nb.lifecycles;
            nb.lifecycles += 1;
            let path = format!("{work_dir}/.command.sh");
            emit(nb, start, root, OpKind::Open, path, lc, 0, 0, O_RDONLY_LARGEFILE);
            emit(nb, start + step, root, OpKind::Close, String::new(), lc, 0, 0, O_RDONLY_LARGEFILE);
            cursor = start + 2 * step;
        }
        for s in &task.io {
            let begin = cursor.max(start + s.at_ms.unwrap_or(0));
            let pid = pids[s.process as usize];
            let path = if s.file.starts_with('/') {
                s.file.clone()
            } else {
                let dir = match &s.from_task {
                    Some(p) => &work_dirs[index[p.as_str()]],
                    None => work_dir,
                };
                format!("{dir}/{}", s.file)
            };
            if s.mode == IoMode::Delete {
                emit(nb, begin, pid, OpKind::Delete, path, usize::MAX, 0, 0, 0);
                cursor = begin + step;
                continue;
            }
            let (kind, flags) = match s.mode {
                IoMode::Read => (OpKind::Read, O_RDONLY_LARGEFILE),
                _ => (OpKind::Write, O_WRONLY_CREAT_TRUNC_LARGEFILE),
            };
            let gap = match s.pattern {
                Pattern::Bulk => step,
                _ => s.gap_ms.unwrap_or(step),
            };
            let stride = match s.pattern {
                Pattern::Strided => s.stride.unwrap_or(2 * s.size),
                _ => s.size,
            };
            let lc = nb.lifecycles;
            nb.lifecycles += 1;
            emit(nb, begin, pid, OpKind::Open, path, lc, 0, 0, flags);
            let mut t = begin;
            for i in 0..s.ops {
                t = begin + step + i * gap;
                emit(nb, t, pid, kind, String::new(), lc, i * stride, s.size, flags);
            }
            emit(nb, t + step, pid, OpKind::Close, String::new(), lc, 0, 0, flags);
            cursor = t + 2 * step;
        }
        let end = if config.markers {
            let exit_open = cursor.max(start + task.duration_ms.unwrap_or(0).saturating_sub(step));
            let lc = nb.lifecycles;
            nb.lifecycles += 1;
            let path = format!("{work_dir}/.exitcode");
            let f = O_WRONLY_CREAT_TRUNC_LARGEFILE;
            emit(nb, exit_open, root, OpKind::Open, path, lc, 0, 0, f);
            emit(nb, exit_open + step, root, OpKind::Close, String::new(), lc, 0, 0, f);
            exit_open + step
        } else {
            (cursor.saturating_sub(step)).max(start + task.duration_ms.unwrap_or(0))
        };
        ends[ti] = end;
    }

    let mut nodes = Vec::with_capacity(builders.len());
    for (node_id, mut nb) in builders {
        nb.pending.sort_by_key(|p| p.at_ms);
        nb.forks.sort_by_key(|f| (f.0, f.2));
        let mut handles: HashMap<usize, u64> = HashMap::new();
        let mut inodes: HashMap<String, u64> = HashMap::new();
        let mut lifecycle_inode: HashMap<usize, u64> = HashMap::new();
        let (mut next_handle, mut next_inode) = (1_000u64, 5_000u64);
        let mut events = Vec::with_capacity(nb.pending.len());
        let mut owners = Vec::with_capacity(nb.pending.len());
        let mut cgs = Vec::with_capacity(nb.pending.len());
        for (counter, p) in nb.pending.into_iter().enumerate() {
            let inode = match p.kind {
                OpKind::Open | OpKind::Delete => {
                    let inode = *inodes.entry(p.path.clone()).or_insert_with(|| {
                        next_inode += 1;
                        next_inode
                    });
                    if p.kind == OpKind::Delete {
                        inodes.remove(&p.path);
                    } else {
                        lifecycle_inode.insert(p.lifecycle, inode);
                    }
                    inode
                }
                _ => lifecycle_inode[&p.lifecycle],
            };
            let handle = match p.kind {
                OpKind::Delete => 0,
                OpKind::Open => {
                    next_handle += 1;
                    handles.insert(p.lifecycle, next_handle);
                    next_handle
                }
                _ => handles[&p.lifecycle],
            };
            let result = if p.kind.is_data() { p.size as i64 } else { 0 };
            let cpu = Seconds::from_nanos(counter as i64 * 1_000_000, 3);
            let cpu_end = Seconds::from_nanos((counter as i64 + 1) * 1_000_000, 3);
            let t = ms(base_ms + p.at_ms as i64);
            events.push(IoEvent {
                time_start: t,
                time_end: t,
                pid: p.pid,
                utime_start: cpu,
                utime_end: cpu_end,
                stime_start: cpu,
                stime_end: cpu_end,
                inode_uid: inode,
                kind: p.kind,
                result,
                handle_uid: handle,
                offset: p.offset,
                size: if p.kind.is_data() { p.size } else { 0 },
                flags: p.flags,
                path: p.path,
            });
            owners.push(p.task as u64 + 1);
            cgs.push(cgroups[p.task]);
        }
        let forks: Vec<ForkEvent> = nb.forks.into_iter().map(|f| f.1).collect();
        nodes.push(SimNode {
            node_id: node_id.to_string(),
            io_dropped: vec![false; events.len()],
            fork_dropped: vec![false; forks.len()],
            io_events: events,
            fork_events: forks,
            io_task: owners,
            io_cgroup: cgs,
        });
    }

    let tasks: Vec<TaskRecord> = config
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| TaskRecord {
            task_id: i as u64 + 1,
            name: t.name.clone(),
            status: "COMPLETED".into(),
            exit_code: Some(0),
            work_dir: work_dirs[i].clone(),
            source: SwmsSource::Nextflow,
        })
        .collect();

    let mut by_end: Vec<usize> = (0..config.tasks.len()).collect();
    by_end.sort_by_key(|&i| (ends[i], i));
    let mut nextflow_log = String::new();
    for &i in &by_end {
        let t = &tasks[i];
        let _ = writeln!(
            nextflow_log,
            "{} [Task monitor] DEBUG n.processor.TaskPollingMonitor - Task completed > TaskHandler[id: {}; name: {}; status: {}; exit: 0; error: -; workDir: {}]",
            log_stamp(base_ms + ends[i] as i64),
            t.task_id,
            t.name,
            t.status,
            t.work_dir
        );
    }

    let run_end = ends.iter().copied().max().unwrap_or(0);
    let mut by_start: Vec<usize> = (0..config.tasks.len()).filter(|&i| pod_names[i].is_some()).collect();
    by_start.sort_by_key(|&i| (ends[i], i));
    let mut k8s_events = String::from("LAST SEEN   TYPE     REASON    OBJECT\n");
    let mut pods = Vec::new();
    for &i in &by_start {
        let name = pod_names[i].as_ref().unwrap();
        let age = (run_end - ends[i]) / 60_000;
        let _ = writeln!(k8s_events, "{:<11} Normal   Started   pod/{name}", format!("{age}m"));
        pods.push(PodMeta {
            node_id: config.tasks[i].node.clone(),
            pod_name: name.clone(),
            labels: BTreeMap::from([(
                PodMeta::TASK_LABEL.to_string(),
                normalize_task_name(&config.tasks[i].name),
            )]),
            cgroupid: cgroups[i],
        });
    }
    pods.sort_by(|a, b| (&a.node_id, &a.pod_name).cmp(&(&b.node_id, &b.pod_name)));

    Ok(SimRun {
        nodes,
        tasks,
        pods,
        nextflow_log,
        k8s_events,
    })
}

fn ms(millis: i64) -> Seconds {
    Seconds::from_millis(millis)
}

fn log_stamp(millis: i64) -> String {
    chrono::DateTime::from_timestamp_millis(millis)
        .map(|d| d.format("%b-%d %H:%M:%S%.3f").to_string())
        .unwrap_or_default()
}

/// A record offered to a drop predicate.
#[derive(Debug, Clone, Copy)]
pub enum Record<'a> {
    Io { seq: usize, event: &'a IoEvent },
    Fork { seq: usize, event: &'a ForkEvent },
}

/// Drops every still-present record the predicate selects.
pub fn drop_records(run: &SimRun, mut select: impl FnMut(&str, Record<'_>) -> bool) -> SimRun {
    let mut out = run.clone();
    for n in &mut out.nodes {
        for (seq, e) in n.io_events.iter().enumerate() {
            if !n.io_dropped[seq] && select(&n.node_id, Record::Io { seq, event: e }) {
                n.io_dropped[seq] = true;
            }
        }
        for (seq, f) in n.fork_events.iter().enumerate() {
            if !n.fork_dropped[seq] && select(&n.node_id, Record::Fork { seq, event: f }) {
                n.fork_dropped[seq] = true;
            }
        }
    }
    out
}

/// Drops records independently with the model's per-kind probability.
pub fn inject_loss(run: &SimRun, model: &LossModel, seed: u64) -> SimRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    drop_records(run, |_, r| {
        let p = match r {
            Record::Io { event, .. } => model.io(event.kind),
            Record::Fork { .. } => model.fork,
        };
        p > 0.0 && rng.gen_bool(p)
    })
}

/// A random valid config: 1 to 4 nodes, 2 to 20 tasks, mixed containers.
pub fn random_config(seed: u64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0f1);
    let nodes: Vec<String> = (1..=rng.gen_range(1..=4)).map(|i| format!("node{i}")).collect();
    let n_tasks = rng.gen_range(2..=20);
    let mut tasks: Vec<SimTask> = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks {
        let processes = rng.gen_range(0..=3);
        let mut io = vec![IoStep {
            file: format!("out_{i}.dat"),
            mode: IoMode::Write,
            pattern: Pattern::Sequential,
            ops: rng.gen_range(1..=8),
            size: 4096,
            stride: None,
            gap_ms: Some(rng.gen_range(1..=5)),
            at_ms: None,
            process: rng.gen_range(0..=processes),
            from_task: None,
        }];
        for k in 0..rng.gen_range(0..=4) {
            let pattern = [Pattern::Sequential, Pattern::Strided, Pattern::Bulk][rng.gen_range(0..3)];
            let mut step = IoStep {
                file: String::new(),
                mode: IoMode::Read,
                pattern,
                ops: rng.gen_range(1..=10),
                size: [512, 4096, 65536][rng.gen_range(0..3)],
                stride: None,
                gap_ms: Some(rng.gen_range(1..=5)),
                at_ms: None,
                process: rng.gen_range(0..=processes),
                from_task: None,
            };
            match rng.gen_range(0..4) {
                0 if i > 0 => {
                    let j = rng.gen_range(0..i);
                    step.file = format!("out_{j}.dat");
                    step.from_task = Some(tasks[j].name.clone());
                }
                1 => step.file = format!("/data/input_{}.fq", rng.gen_range(0..4)),
                2 => {
                    step.file = format!("scratch_{k}.tmp");
                    step.mode = IoMode::Write;
                    io.push(step.clone());
                    step.mode = IoMode::Delete;
                }
                _ => {
                    step.file = format!("part_{k}.bin");
                    step.mode = IoMode::Write;
                }
            }
            io.push(step);
        }
        tasks.push(SimTask {
            name: format!("PIPE:STAGE_{i} (sample_{})", rng.gen_range(0..100)),
            node: nodes[rng.gen_range(0..nodes.len())].clone(),
            container: rng.gen_bool(0.5),
            processes,
            after: Vec::new(),
            duration_ms: None,
            io,
        });
    }
    SimConfig {
        seed,
        pid_mode: if rng.gen_bool(0.25) { PidMode::Collide } else { PidMode::Disjoint },
        nodes,
        tasks,
        ..SimConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::{associate_kubernetes, associate_nextflow, build_graphs, MarkerRule, Method};
    use crate::model::event_identity_check;

    const CHAIN: &str = r#"
seed = 3

[[tasks]]
name = "WRITER"
node = "n1"
container = true

[[tasks.io]]
file = "out.txt"
mode = "write"
ops = 3

[[tasks]]
name = "READER"
node = "n1"

[[tasks.io]]
file = "out.txt"
mode = "read"
from_task = "WRITER"
ops = 2
pattern = "strided"
"#;

    #[test]
    fn empty_dag() {
        let run = generate_run(&SimConfig::default()).unwrap();
        assert_eq!(run.nodes.len(), 1);
        assert!(run.nodes[0].io_events.is_empty());
        assert!(run.nextflow_log.is_empty());
        let dir = tempfile::tempdir().unwrap();
        run.write_to(dir.path()).unwrap();
        assert!(dir.path().join("n1").join(IO_TRACE_FILE).exists());
    }

    #[test]
    fn chain_event_count_and_truth() {
        let config: SimConfig = CHAIN.parse().unwrap();
        let run = generate_run(&config).unwrap();
        // steps: (1 open + 3 writes + 1 close) + (1 open + 2 reads + 1 close); markers: 4 per task
        let expected = 5 + 4 + 2 * 4;
        assert_eq!(run.nodes[0].io_events.len(), expected);
        assert_eq!(config.record_count(), expected as u64);

        let traces = run.traces();
        assert!(event_identity_check(&traces[0]).is_empty());
        let graphs = build_graphs(&traces);
        let a = associate_nextflow(&traces, &graphs, &run.tasks, &MarkerRule::default()).unwrap();
        let links: Vec<u64> = a.nodes["n1"].events.iter().map(|l| l.unwrap().task_id).collect();
        assert_eq!(links, run.nodes[0].surviving_owners());
        let methods = a.methods();
        assert_eq!(methods[&1], BTreeSet::from([Method::WorkDirMarker]));
        assert_eq!(methods[&2], BTreeSet::from([Method::ProcessSubtree]));
    }

    #[test]
    fn reader_sees_producer_path_and_inode() {
        let run = generate_run(&CHAIN.parse().unwrap()).unwrap();
        let evs = &run.nodes[0].io_events;
        let opens: Vec<&IoEvent> = evs.iter().filter(|e| e.path.ends_with("/out.txt")).collect();
        assert_eq!(opens.len(), 2);
        assert_eq!(opens[0].path, opens[1].path);
        assert_eq!(opens[0].inode_uid, opens[1].inode_uid);
        assert!(opens[0].path.starts_with(&run.tasks[0].work_dir));
        let reads: Vec<u64> = evs.iter().filter(|e| e.kind == OpKind::Read).map(|e| e.offset).collect();
        assert_eq!(reads, vec![0, 8192]);
    }

    #[test]
    fn handles_and_inodes_increase() {
        let run = generate_run(&random_config(11)).unwrap();
        for n in &run.nodes {
            let opens: Vec<u64> = n.io_events.iter().filter(|e| e.kind == OpKind::Open).map(|e| e.handle_uid).collect();
            assert!(opens.windows(2).all(|w| w[0] < w[1]));
            let mut seen = BTreeSet::new();
            let mut last = 0;
            for e in n.io_events.iter().filter(|e| e.kind.has_path()) {
                if seen.insert(e.inode_uid) {
                    assert!(e.inode_uid > last);
                    last = e.inode_uid;
                }
            }
            assert!(n.io_events.windows(2).all(|w| w[0].time_start <= w[1].time_start));
        }
    }

    #[test]
    fn four_node_pods() {
        let mut config = SimConfig {
            nodes: (1..=4).map(|i| format!("n{i}")).collect(),
            ..SimConfig::default()
        };
        for i in 0..8 {
            config.tasks.push(SimTask {
                name: format!("T{i}"),
                node: format!("n{}", i % 4 + 1),
                container: true,
                processes: 1,
                after: vec![],
                duration_ms: None,
                io: vec![],
            });
        }
        let run = generate_run(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.write_to(dir.path()).unwrap();
        for i in 1..=4 {
            assert!(dir.path().join(format!("n{i}")).is_dir());
        }
        assert_eq!(run.pods.len(), 8);
        let pod_text = fs::read_to_string(dir.path().join(POD_META_FILE)).unwrap();
        assert_eq!(pod_text.lines().count(), 8);

        let traces = run.traces();
        let graphs = build_graphs(&traces);
        let a = associate_kubernetes(&traces, &graphs, &run.tasks, &run.pods).unwrap();
        for n in &run.nodes {
            let links: Vec<u64> = a.nodes[&n.node_id].events.iter().map(|l| l.unwrap().task_id).collect();
            assert_eq!(links, n.surviving_owners());
        }
        // one cgroup per containerized task, shared by its processes
        for n in &run.nodes {
            let cgs: BTreeSet<u64> = n.fork_events.iter().map(|f| f.cgroupid).collect();
            assert_eq!(cgs.len(), 2);
        }
    }

    #[test]
    fn deterministic_output() {
        let config = random_config(5);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_run(&config).unwrap().write_to(a.path()).unwrap();
        generate_run(&config).unwrap().write_to(b.path()).unwrap();
        assert_eq!(dir_digest(a.path()), dir_digest(b.path()));
    }

    fn dir_digest(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn zero_loss_is_identity() {
        let run = generate_run(&random_config(2)).unwrap();
        let degraded = inject_loss(&run, &LossModel::uniform(0.0, 1), 1);
        assert_eq!(degraded, run);
        assert!(degraded.drops().is_empty());
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run.write_to(a.path()).unwrap();
        degraded.write_to(b.path()).unwrap();
        assert_eq!(dir_digest(a.path()), dir_digest(b.path()));
    }

    #[test]
    fn loss_is_seeded() {
        let run = generate_run(&random_config(4)).unwrap();
        let m = LossModel::uniform(0.2, 0);
        assert_eq!(inject_loss(&run, &m, 9), inject_loss(&run, &m, 9));
        let d = inject_loss(&run, &m, 9);
        assert!(!d.drops().is_empty());
        let dir = tempfile::tempdir().unwrap();
        d.write_to(dir.path()).unwrap();
        let truth = GroundTruth::read(dir.path()).unwrap();
        assert_eq!(truth, d.ground_truth());
        let dropped_io = truth.drops.iter().filter(|r| r.record == RecordFile::Io).count();
        assert_eq!(truth.rows.iter().filter(|r| r.dropped).count(), dropped_io);
    }

    #[test]
    fn dropping_one_open_orphans_its_reads() {
        let run = generate_run(&CHAIN.parse().unwrap()).unwrap();
        let target = run.nodes[0]
            .io_events
            .iter()
            .position(|e| e.kind == OpKind::Open && e.path.ends_with("/out.txt"))
            .unwrap();
        let d = drop_records(&run, |_, r| matches!(r, Record::Io { seq, .. } if seq == target));
        assert_eq!(d.drops().len(), 1);
        let report = crate::analysis::loss_report(&d.traces(), None);
        // 3 writes and the close follow the dropped open
        assert_eq!(report.orphan_refs, 4);
        assert_eq!(report.orphan_handles, 1);
        assert_eq!(report.reported_lost, 1);
    }

    #[test]
    fn config_errors_name_the_key() {
        let err = "bogus = 1".parse::<SimConfig>().unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let err = "[[tasks]]\nname = \"a\"\nnode = \"n1\"\nspeed = 3\n"
            .parse::<SimConfig>()
            .unwrap_err()
            .to_string();
        assert!(err.contains("speed"), "{err}");
        let err = "[[tasks]]\nname = \"a\"\nnode = \"n9\"\n".parse::<SimConfig>().unwrap_err().to_string();
        assert!(err.contains("tasks[0].node"), "{err}");
    }

    #[test]
    fn cycles_rejected() {
        let cfg = r#"
[[tasks]]
name = "a"
node = "n1"
after = ["b"]
[[tasks]]
name = "b"
node = "n1"
after = ["a"]
"#;
        let err = cfg.parse::<SimConfig>().unwrap_err().to_string();
        assert!(err.contains("cycle"), "{err}");
    }

    #[test]
    fn consumers_start_after_producers() {
        let run = generate_run(&CHAIN.parse().unwrap()).unwrap();
        let n = &run.nodes[0];
        let last_writer = n.io_events.iter().zip(&n.io_task).filter(|(_, t)| **t == 1).map(|(e, _)| e.time_end).max();
        let first_reader = n.io_events.iter().zip(&n.io_task).filter(|(_, t)| **t == 2).map(|(e, _)| e.time_start).min();
        assert!(last_writer < first_reader);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = random_config(8);
        let back: SimConfig = c.to_toml().parse().unwrap();
        assert_eq!(back, c);
    }
}
