//! Parsers and writers for the on-disk trace and log formats, and the run
//! directory loader.
//!
//! I/O trace lines have 15 comma separated columns:
//!
//! ```text
//! time_start, time_end, pid, utime_start, utime_end, stime_start, stime_end, inode, type, result, handle, offset, size, flags, path
//! ```
//!
//! Fork trace lines have four: `time, parent pid, pid, cgroupid`. Lines starting
//! with `#` are comments in both.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::model::{ForkEvent, IoEvent, NodeTrace, OpKind, PodMeta, Seconds, SwmsSource, TaskRecord};
use crate::process::ProcessGraph;

pub const IO_TRACE_FILE: &str = "io_trace.csv";
pub const FORK_TRACE_FILE: &str = "fork_trace.csv";
/// Tracer stderr captured next to the traces; overflow warnings are counted from it.
pub const LOSS_WARNINGS_FILE: &str = "monitor.stderr";

pub const IO_TRACE_HEADER: &str = "# time_start, time_end, pid, utime_start, utime_end, stime_start, stime_end, inode, type, result, handle, offset, size, flags, path";
pub const FORK_TRACE_HEADER: &str = "# time, parent pid, pid, cgroupid";

const IO_FIELDS: [&str; 15] = [
    "time_start",
    "time_end",
    "pid",
    "utime_start",
    "utime_end",
    "stime_start",
    "stime_end",
    "inode",
    "type",
    "result",
    "handle",
    "offset",
    "size",
    "flags",
    "path",
];

const NEXTFLOW_MARKER: &str = "Task completed > TaskHandler[";
const AIRFLOW_MARKER: &str = "Sending TaskInstanceKey(";

/// A malformed line in one of the input formats.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}{}: {message}", field.map(|f| format!(", field `{f}`")).unwrap_or_default())]
pub struct ParseError {
    pub line: usize,
    pub field: Option<&'static str>,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, field: Option<&'static str>, message: impl Into<String>) -> ParseError {
        ParseError {
            line,
            field,
            message: message.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: ParseError },
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("no node trace directories given")]
    NoNodes,
}

impl IngestError {
    fn io(path: &Path, source: io::Error) -> IngestError {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn parse(path: &Path, source: ParseError) -> IngestError {
        IngestError::Parse {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Result of reading one physical line of a trace file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed<T> {
    Record(T),
    Skip,
}

fn is_comment_or_blank(line: &str) -> bool {
    let t = line.trim_start();
    t.is_empty() || t.starts_with('#')
}

fn field<T: std::str::FromStr>(raw: &str, line: usize, name: &'static str) -> Result<T, ParseError> {
    raw.trim()
        .parse()
        .map_err(|_| ParseError::new(line, Some(name), format!("cannot parse `{}`", raw.trim())))
}

fn parse_flags(raw: &str, line: usize) -> Result<u32, ParseError> {
    let t = raw.trim();
    let hex = t
        .strip_prefix("0x")
        .or_else(|| t.strip_prefix("0X"))
        .unwrap_or(t);
    if t == "0" || t.is_empty() {
        return Ok(0);
    }
    u32::from_str_radix(hex, 16).map_err(|_| ParseError::new(line, Some("flags"), format!("cannot parse `{t}`")))
}

/// Parses one line of an I/O trace. `line_no` is 1-based and only used in errors.
pub fn parse_io_trace_line(line: &str, line_no: usize) -> Result<Parsed<IoEvent>, ParseError> {
    if is_comment_or_blank(line) {
        return Ok(Parsed::Skip);
    }
    let line = line.trim_end_matches(['\n', '\r']);
    let cols: Vec<&str> = line.splitn(15, ',').collect();
    if cols.len() != 15 {
        return Err(ParseError::new(
            line_no,
            None,
            format!("expected 15 fields, found {}", cols.len()),
        ));
    }
    let kind_raw = cols[8].trim();
    let kind = OpKind::from_letter(kind_raw)
        .ok_or_else(|| ParseError::new(line_no, Some("type"), format!("unknown kind `{kind_raw}`")))?;
    let f = |i: usize| cols[i];
    let ev = IoEvent {
        time_start: field(f(0), line_no, IO_FIELDS[0])?,
        time_end: field(f(1), line_no, IO_FIELDS[1])?,
        pid: field(f(2), line_no, IO_FIELDS[2])?,
        utime_start: field(f(3), line_no, IO_FIELDS[3])?,
        utime_end: field(f(4), line_no, IO_FIELDS[4])?,
        stime_start: field(f(5), line_no, IO_FIELDS[5])?,
        stime_end: field(f(6), line_no, IO_FIELDS[6])?,
        inode_uid: field(f(7), line_no, IO_FIELDS[7])?,
        kind,
        result: field(f(9), line_no, IO_FIELDS[9])?,
        handle_uid: field(f(10), line_no, IO_FIELDS[10])?,
        offset: field(f(11), line_no, IO_FIELDS[11])?,
        size: field(f(12), line_no, IO_FIELDS[12])?,
        flags: parse_flags(f(13), line_no)?,
        path: f(14).trim().to_string(),
    };
    Ok(Parsed::Record(ev))
}

/// Formats an event as one trace line, without the newline.
pub fn format_io_event(ev: &IoEvent) -> String {
    let mut s = String::with_capacity(128 + ev.path.len());
    write!(
        s,
        "{}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {:#010x},",
        ev.time_start,
        ev.time_end,
        ev.pid,
        ev.utime_start,
        ev.utime_end,
        ev.stime_start,
        ev.stime_end,
        ev.inode_uid,
        ev.kind,
        ev.result,
        ev.handle_uid,
        ev.offset,
        ev.size,
        ev.flags,
    )
    .unwrap();
    if !ev.path.is_empty() {
        s.push(' ');
        s.push_str(&ev.path);
    }
    s
}

/// Parses a whole I/O trace, keeping file order.
pub fn parse_io_trace(reader: impl BufRead) -> Result<Vec<IoEvent>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ParseError::new(i + 1, None, e.to_string()))?;
        if let Parsed::Record(ev) = parse_io_trace_line(&line, i + 1)? {
            out.push(ev);
        }
    }
    Ok(out)
}

pub fn parse_fork_line(line: &str, line_no: usize) -> Result<Parsed<ForkEvent>, ParseError> {
    if is_comment_or_blank(line) {
        return Ok(Parsed::Skip);
    }
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 4 {
        return Err(ParseError::new(
            line_no,
            None,
            format!("expected 4 fields, found {}", cols.len()),
        ));
    }
    let time: Seconds = field(cols[0], line_no, "time")?;
    if time.nanos() == 0 {
        return Err(ParseError::new(line_no, Some("time"), "time must be positive"));
    }
    Ok(Parsed::Record(ForkEvent {
        time,
        parent_pid: field(cols[1], line_no, "parent_pid")?,
        pid: field(cols[2], line_no, "pid")?,
        cgroupid: field(cols[3], line_no, "cgroupid")?,
    }))
}

pub fn format_fork_event(ev: &ForkEvent) -> String {
    format!("{}, {}, {}, {}", ev.time, ev.parent_pid, ev.pid, ev.cgroupid)
}

/// Parses a fork trace and returns its records sorted by time (stable).
pub fn parse_fork_trace(reader: impl BufRead) -> Result<Vec<ForkEvent>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ParseError::new(i + 1, None, e.to_string()))?;
        if let Parsed::Record(ev) = parse_fork_line(&line, i + 1)? {
            out.push(ev);
        }
    }
    out.sort_by_key(|f| f.time);
    Ok(out)
}

/// Splits the `key: value; key: value` list of a Nextflow task handler.
fn handler_fields(body: &str) -> BTreeMap<&str, &str> {
    body.split("; ")
        .filter_map(|kv| kv.split_once(": ").or_else(|| kv.split_once(':')))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect()
}

/// Extracts completed tasks from a `.nextflow.log`.
pub fn parse_nextflow_log(reader: impl BufRead) -> Result<Vec<TaskRecord>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ParseError::new(line_no, None, e.to_string()))?;
        let Some(pos) = line.find(NEXTFLOW_MARKER) else {
            continue;
        };
        let rest = &line[pos + NEXTFLOW_MARKER.len()..];
        let body = rest.rfind(']').map_or(rest, |end| &rest[..end]);
        let kv = handler_fields(body);
        let get = |key: &'static str| {
            kv.get(key)
                .copied()
                .ok_or_else(|| ParseError::new(line_no, Some(key), format!("missing key `{key}`")))
        };
        let task_id = get("id")?
            .parse()
            .map_err(|_| ParseError::new(line_no, Some("id"), "task id is not an integer"))?;
        let exit = get("exit")?;
        let exit_code = match exit {
            "-" | "" => None,
            e => Some(
                e.parse()
                    .map_err(|_| ParseError::new(line_no, Some("exit"), format!("cannot parse `{e}`")))?,
            ),
        };
        let work_dir = get("workDir")?;
        if work_dir.is_empty() {
            return Err(ParseError::new(line_no, Some("workDir"), "empty work dir"));
        }
        out.push(TaskRecord {
            task_id,
            name: get("name")?.to_string(),
            status: get("status")?.to_string(),
            exit_code,
            work_dir: work_dir.to_string(),
            source: SwmsSource::Nextflow,
        });
    }
    Ok(out)
}

/// Parses `key='value', key=value` pairs of a Python repr tuple.
fn python_kwargs(body: &str) -> Option<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut chars = body.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| *c == ' ' || *c == ',') {
            chars.next();
        }
        if chars.peek().is_none() {
            return Some(out);
        }
        let mut key = String::new();
        for c in chars.by_ref() {
            if c == '=' {
                break;
            }
            key.push(c);
        }
        let key = key.trim().to_string();
        if key.is_empty() || !key.chars().all(|c| c.is_alphanumeric() || c == '_') {
            return None;
        }
        let mut value = String::new();
        match chars.peek() {
            Some(&q @ ('\'' | '"')) => {
                chars.next();
                let mut closed = false;
                for c in chars.by_ref() {
                    if c == q {
                        closed = true;
                        break;
                    }
                    value.push(c);
                }
                if !closed {
                    return None;
                }
            }
            Some(_) => {
                while let Some(&c) = chars.peek() {
                    if c == ',' {
                        break;
                    }
                    value.push(c);
                    chars.next();
                }
                value = value.trim().to_string();
            }
            None => return None,
        }
        out.insert(key, value);
    }
}

/// Extracts queued task instances from an Airflow scheduler log.
///
/// Task ids are assigned in order of appearance, starting at 1.
pub fn parse_airflow_log(reader: impl BufRead) -> Result<Vec<TaskRecord>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ParseError::new(line_no, None, e.to_string()))?;
        let Some(pos) = line.find(AIRFLOW_MARKER) else {
            continue;
        };
        let rest = &line[pos + AIRFLOW_MARKER.len()..];
        let malformed = || ParseError::new(line_no, None, "malformed TaskInstanceKey tuple");
        let end = rest.find(')').ok_or_else(malformed)?;
        let kv = python_kwargs(&rest[..end]).ok_or_else(malformed)?;
        let dag = kv
            .get("dag_id")
            .ok_or_else(|| ParseError::new(line_no, Some("dag_id"), "missing key `dag_id`"))?;
        let task = kv
            .get("task_id")
            .ok_or_else(|| ParseError::new(line_no, Some("task_id"), "missing key `task_id`"))?;
        out.push(TaskRecord {
            task_id: out.len() as u64 + 1,
            name: format!("{dag}.{task}"),
            status: "QUEUED".to_string(),
            exit_code: None,
            work_dir: String::new(),
            source: SwmsSource::Airflow,
        });
    }
    Ok(out)
}

/// Parses the tab separated pod metadata file:
/// `node_id <TAB> pod_name <TAB> cgroupid [<TAB> key=value]...`.
pub fn parse_pod_meta(reader: impl BufRead) -> Result<Vec<PodMeta>, ParseError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ParseError::new(line_no, None, e.to_string()))?;
        if is_comment_or_blank(&line) {
            continue;
        }
        let mut cols = line.trim_end_matches(['\r', '\n']).split('\t');
        let node_id = cols
            .next()
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| ParseError::new(line_no, Some("node_id"), "missing node column"))?;
        let pod_name = cols
            .next()
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| ParseError::new(line_no, Some("pod_name"), "missing pod column"))?;
        let cg_raw = cols
            .next()
            .ok_or_else(|| ParseError::new(line_no, Some("cgroupid"), "missing cgroupid column"))?;
        let cgroupid: u64 = field(cg_raw, line_no, "cgroupid")?;
        if cgroupid == 0 {
            return Err(ParseError::new(line_no, Some("cgroupid"), "cgroupid must be positive"));
        }
        let mut labels = BTreeMap::new();
        for label in cols.filter(|c| !c.trim().is_empty()) {
            let (k, v) = label
                .split_once('=')
                .ok_or_else(|| ParseError::new(line_no, Some("labels"), format!("label `{label}` is not key=value")))?;
            labels.insert(k.trim().to_string(), v.trim().to_string());
        }
        let (node_id, pod_name) = (node_id.trim().to_string(), pod_name.trim().to_string());
        if !seen.insert((node_id.clone(), pod_name.clone())) {
            return Err(ParseError::new(
                line_no,
                Some("pod_name"),
                format!("duplicate pod `{pod_name}` on node `{node_id}`"),
            ));
        }
        out.push(PodMeta {
            node_id,
            pod_name,
            labels,
            cgroupid,
        });
    }
    Ok(out)
}

pub fn format_pod_meta(pod: &PodMeta) -> String {
    let mut s = format!("{}\t{}\t{}", pod.node_id, pod.pod_name, pod.cgroupid);
    for (k, v) in &pod.labels {
        let _ = write!(s, "\t{k}={v}");
    }
    s
}

/// A `Started pod/<name>` line from a `kubectl get events --watch` capture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PodStart {
    pub pod_name: String,
    /// The LAST SEEN column as printed, e.g. `27m`.
    pub last_seen: String,
}

pub fn parse_k8s_events(reader: impl BufRead) -> Result<Vec<PodStart>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ParseError::new(i + 1, None, e.to_string()))?;
        if is_comment_or_blank(&line) {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let Some(pos) = tokens.iter().position(|t| *t == "Started") else {
            continue;
        };
        if let Some(name) = tokens.get(pos + 1).and_then(|t| t.strip_prefix("pod/")) {
            out.push(PodStart {
                pod_name: name.to_string(),
                last_seen: tokens.first().copied().unwrap_or_default().to_string(),
            });
        }
    }
    Ok(out)
}

/// Sums `Possibly lost N samples` warnings from captured tracer stderr.
pub fn count_reported_loss(reader: impl BufRead) -> io::Result<u64> {
    let mut total = 0;
    for line in reader.lines() {
        let line = line?;
        if let Some(rest) = line.split("Possibly lost ").nth(1) {
            if let Some(n) = rest.split_whitespace().next().and_then(|n| n.parse::<u64>().ok()) {
                total += n;
            }
        }
    }
    Ok(total)
}

/// Ingest-side filters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterSettings {
    /// Keep only files below one of these directories. Empty keeps everything.
    pub dir_prefixes: Vec<PathBuf>,
    /// Keep only files on these mount points, emulating a filesystem-specific
    /// open hook. Empty keeps everything.
    pub fs_mounts: Vec<PathBuf>,
    /// Keep only events of these pids. Empty keeps everything.
    pub pids: BTreeSet<u32>,
    /// Also keep events of fork descendants of `pids`.
    pub pid_subtree: bool,
}

impl FilterSettings {
    pub fn is_empty(&self) -> bool {
        self.dir_prefixes.is_empty() && self.fs_mounts.is_empty() && self.pids.is_empty()
    }

    fn path_allowed(&self, path: &str) -> bool {
        let p = Path::new(path);
        let under = |roots: &[PathBuf]| roots.is_empty() || roots.iter().any(|r| p.starts_with(r));
        under(&self.dir_prefixes) && under(&self.fs_mounts)
    }
}

/// Applies `filters` to a node trace in place.
///
/// An open outside the allowed directories drops the open and every later event
/// on its handle. Deletes are dropped by path. Events on handles whose open was
/// never seen are kept, since their path is unknown.
pub fn apply_filters(trace: &mut NodeTrace, filters: &FilterSettings) {
    if !filters.dir_prefixes.is_empty() || !filters.fs_mounts.is_empty() {
        let mut dropped: HashSet<u64> = HashSet::new();
        trace.io_events.retain(|ev| match ev.kind {
            OpKind::Open => {
                if filters.path_allowed(&ev.path) {
                    dropped.remove(&ev.handle_uid);
                    true
                } else {
                    dropped.insert(ev.handle_uid);
                    false
                }
            }
            OpKind::Delete => filters.path_allowed(&ev.path),
            _ => !dropped.contains(&ev.handle_uid),
        });
    }
    if !filters.pids.is_empty() {
        let keep: HashSet<u32> = if filters.pid_subtree {
            let graph = ProcessGraph::build(&trace.fork_events);
            filters
                .pids
                .iter()
                .flat_map(|&p| graph.descendants(p, Seconds::from_nanos(i64::MAX, 0)))
                .collect()
        } else {
            filters.pids.iter().copied().collect()
        };
        trace.io_events.retain(|ev| keep.contains(&ev.pid));
    }
}

/// Everything needed to analyze one workflow run.
#[derive(Debug, Clone, Default)]
pub struct RunInputs {
    /// One directory per node; the directory name is the node id.
    pub node_dirs: Vec<PathBuf>,
    pub nextflow_log: Option<PathBuf>,
    pub airflow_log: Option<PathBuf>,
    pub pod_meta: Option<PathBuf>,
    pub k8s_events: Option<PathBuf>,
    pub filters: FilterSettings,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedRun {
    /// Sorted by node id.
    pub traces: Vec<NodeTrace>,
    pub tasks: Vec<TaskRecord>,
    pub pods: Vec<PodMeta>,
    pub pod_starts: Vec<PodStart>,
}

fn open(path: &Path) -> Result<BufReader<File>, IngestError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| IngestError::io(path, e))
}

fn parse_file<T>(
    path: &Path,
    parse: impl FnOnce(BufReader<File>) -> Result<T, ParseError>,
) -> Result<T, IngestError> {
    parse(open(path)?).map_err(|e| IngestError::parse(path, e))
}

/// Loads one node directory without applying filters.
pub fn load_node_dir(dir: &Path) -> Result<NodeTrace, IngestError> {
    let node_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| IngestError::io(dir, io::Error::new(io::ErrorKind::InvalidInput, "not a directory name")))?;
    if !dir.is_dir() {
        return Err(IngestError::io(
            dir,
            io::Error::new(io::ErrorKind::NotFound, "node trace directory not found"),
        ));
    }
    let mut io_events = parse_file(&dir.join(IO_TRACE_FILE), parse_io_trace)?;
    if !io_events.is_sorted_by_key(|e| e.time_start) {
        io_events.sort_by_key(|e| e.time_start);
    }
    let fork_events = parse_file(&dir.join(FORK_TRACE_FILE), parse_fork_trace)?;
    let warn_path = dir.join(LOSS_WARNINGS_FILE);
    let reported_lost = if warn_path.exists() {
        Some(count_reported_loss(open(&warn_path)?).map_err(|e| IngestError::io(&warn_path, e))?)
    } else {
        None
    };
    Ok(NodeTrace {
        node_id,
        io_events,
        fork_events,
        reported_lost,
    })
}

/// Loads every input of a run and applies the ingest filters.
pub fn load_run(inputs: &RunInputs) -> Result<LoadedRun, IngestError> {
    if inputs.node_dirs.is_empty() {
        return Err(IngestError::NoNodes);
    }
    let mut traces = Vec::with_capacity(inputs.node_dirs.len());
    for dir in &inputs.node_dirs {
        let mut trace = load_node_dir(dir)?;
        apply_filters(&mut trace, &inputs.filters);
        traces.push(trace);
    }
    traces.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    if let Some(w) = traces.windows(2).find(|w| w[0].node_id == w[1].node_id) {
        return Err(IngestError::DuplicateNode(w[0].node_id.clone()));
    }

    let mut tasks = Vec::new();
    if let Some(p) = &inputs.nextflow_log {
        tasks.extend(parse_file(p, parse_nextflow_log)?);
    }
    if let Some(p) = &inputs.airflow_log {
        tasks.extend(parse_file(p, parse_airflow_log)?);
    }
    let pods = match &inputs.pod_meta {
        Some(p) => parse_file(p, parse_pod_meta)?,
        None => Vec::new(),
    };
    let pod_starts = match &inputs.k8s_events {
        Some(p) => parse_file(p, parse_k8s_events)?,
        None => Vec::new(),
    };
    Ok(LoadedRun {
        traces,
        tasks,
        pods,
        pod_starts,
    })
}
