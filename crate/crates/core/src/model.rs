//! In-memory trace and log records.
//!
//! Every record type here is plain data. Identity rules the rest of the crate
//! depends on:
//!
//! * `handle_uid` is assigned by the tracer per opened file handle and appears
//!   in exactly one `Open` event of a node trace.
//! * `inode_uid` is assigned per inode lifetime, so a recreated file gets a
//!   fresh id even when the filesystem reuses the raw inode number.
//! * pids and cgroupids are node-local. Records of different nodes never share
//!   a [`NodeTrace`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};

const MAX_SCALE: u8 = 9;
const POW10: [i64; 10] = [
    1,
    10,
    100,
    1_000,
    10_000,
    100_000,
    1_000_000,
    10_000_000,
    100_000_000,
    1_000_000_000,
];

/// A non-negative decimal number of seconds, stored as integer nanoseconds.
///
/// The number of fractional digits seen on input is kept so that formatting
/// reproduces the original text (`"1714067937.744"` stays three digits).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Seconds {
    nanos: i64,
    scale: u8,
}

impl Seconds {
    pub const ZERO: Seconds = Seconds { nanos: 0, scale: 0 };

    /// Builds a value from integer nanoseconds, printed with `scale` fractional digits.
    ///
    /// Digits beyond `scale` are truncated.
    pub fn from_nanos(nanos: i64, scale: u8) -> Seconds {
        let scale = scale.min(MAX_SCALE);
        let unit = POW10[(MAX_SCALE - scale) as usize];
        Seconds {
            nanos: nanos - nanos.rem_euclid(unit),
            scale,
        }
    }

    pub fn from_millis(millis: i64) -> Seconds {
        Seconds::from_nanos(millis * 1_000_000, 3)
    }

    pub fn nanos(self) -> i64 {
        self.nanos
    }

    pub fn scale(self) -> u8 {
        self.scale
    }

    pub fn as_f64(self) -> f64 {
        self.nanos as f64 / 1e9
    }

    /// Difference in seconds.
    pub fn since(self, earlier: Seconds) -> f64 {
        (self.nanos - earlier.nanos) as f64 / 1e9
    }
}

impl Ord for Seconds {
    fn cmp(&self, other: &Self) -> Ordering {
        self.nanos.cmp(&other.nanos)
    }
}

impl PartialOrd for Seconds {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid decimal seconds `{0}`")]
pub struct ParseSecondsError(pub String);

impl FromStr for Seconds {
    type Err = ParseSecondsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseSecondsError(s.to_string());
        let (int, frac) = match s.split_once('.') {
            Some((i, f)) => (i, Some(f)),
            None => (s, None),
        };
        if int.is_empty() || int.len() > 10 || !int.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        let whole: i64 = int.parse().map_err(|_| err())?;
        let (frac_nanos, scale) = match frac {
            None => (0, 0),
            Some(f) => {
                if f.is_empty() || f.len() > MAX_SCALE as usize || !f.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(err());
                }
                let digits: i64 = f.parse().map_err(|_| err())?;
                (digits * POW10[MAX_SCALE as usize - f.len()], f.len() as u8)
            }
        };
        Ok(Seconds {
            nanos: whole * 1_000_000_000 + frac_nanos,
            scale,
        })
    }
}

impl fmt::Display for Seconds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.nanos.div_euclid(1_000_000_000);
        let frac = self.nanos.rem_euclid(1_000_000_000);
        if self.scale == 0 {
            write!(f, "{whole}")
        } else {
            let digits = frac / POW10[(MAX_SCALE - self.scale) as usize];
            write!(f, "{whole}.{digits:0width$}", width = self.scale as usize)
        }
    }
}

impl Serialize for Seconds {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

/// Kind of a traced I/O operation; the on-disk letter is given in parentheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum OpKind {
    /// `O`
    Open,
    /// `R`
    Read,
    /// `W`
    Write,
    /// `C`
    Close,
    /// `D`
    Delete,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Open,
        OpKind::Read,
        OpKind::Write,
        OpKind::Close,
        OpKind::Delete,
    ];

    pub fn letter(self) -> char {
        match self {
            OpKind::Open => 'O',
            OpKind::Read => 'R',
            OpKind::Write => 'W',
            OpKind::Close => 'C',
            OpKind::Delete => 'D',
        }
    }

    pub fn from_letter(s: &str) -> Option<OpKind> {
        Some(match s {
            "O" => OpKind::Open,
            "R" => OpKind::Read,
            "W" => OpKind::Write,
            "C" => OpKind::Close,
            "D" => OpKind::Delete,
            _ => return None,
        })
    }

    /// Whether events of this kind carry a path.
    pub fn has_path(self) -> bool {
        matches!(self, OpKind::Open | OpKind::Delete)
    }

    /// Whether events of this kind refer to an already opened handle.
    pub fn uses_handle(self) -> bool {
        matches!(self, OpKind::Read | OpKind::Write | OpKind::Close)
    }

    pub fn is_data(self) -> bool {
        matches!(self, OpKind::Read | OpKind::Write)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// One low-level I/O record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoEvent {
    pub time_start: Seconds,
    pub time_end: Seconds,
    pub pid: u32,
    pub utime_start: Seconds,
    pub utime_end: Seconds,
    pub stime_start: Seconds,
    pub stime_end: Seconds,
    pub inode_uid: u64,
    pub kind: OpKind,
    /// Bytes transferred for reads and writes, an opaque status otherwise.
    pub result: i64,
    /// 0 when not applicable (deletes).
    pub handle_uid: u64,
    pub offset: u64,
    pub size: u64,
    pub flags: u32,
    /// Only set for opens and deletes.
    pub path: String,
}

impl IoEvent {
    /// Bytes actually moved by a read or write; failed calls count as zero.
    pub fn transferred(&self) -> u64 {
        if self.kind.is_data() {
            self.result.max(0) as u64
        } else {
            0
        }
    }
}

/// One process creation record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForkEvent {
    pub time: Seconds,
    pub parent_pid: u32,
    pub pid: u32,
    pub cgroupid: u64,
}

/// All records captured on one node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeTrace {
    pub node_id: String,
    pub io_events: Vec<IoEvent>,
    pub fork_events: Vec<ForkEvent>,
    /// Record counts from ring-buffer overflow warnings emitted by the tracer.
    pub reported_lost: Option<u64>,
}

impl NodeTrace {
    pub fn new(node_id: impl Into<String>) -> NodeTrace {
        NodeTrace {
            node_id: node_id.into(),
            ..NodeTrace::default()
        }
    }

    /// Maps each handle to the index of its (first) open event.
    pub fn open_index(&self) -> HashMap<u64, usize> {
        let mut opens = HashMap::new();
        for (i, ev) in self.io_events.iter().enumerate() {
            if ev.kind == OpKind::Open {
                opens.entry(ev.handle_uid).or_insert(i);
            }
        }
        opens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum SwmsSource {
    Nextflow,
    Airflow,
}

/// One physical task as reported by the workflow manager.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskRecord {
    pub task_id: u64,
    pub name: String,
    pub status: String,
    pub exit_code: Option<i32>,
    pub work_dir: String,
    pub source: SwmsSource,
}

/// Kubernetes pod metadata resolved on the executing node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PodMeta {
    pub node_id: String,
    pub pod_name: String,
    pub labels: BTreeMap<String, String>,
    pub cgroupid: u64,
}

impl PodMeta {
    pub const TASK_LABEL: &'static str = "taskName";

    pub fn task_name(&self) -> Option<&str> {
        self.labels.get(Self::TASK_LABEL).map(String::as_str)
    }

    /// Pods without a task label were not spawned by a workflow manager.
    pub fn is_workflow(&self) -> bool {
        self.task_name().is_some()
    }
}

/// A finding of [`event_identity_check`]. Findings are data, not failures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IdentityViolation {
    /// A handle opened more than once; `events` lists every open.
    DuplicateOpen { handle_uid: u64, events: Vec<usize> },
    /// A read, write or close without a preceding open of its handle.
    OrphanRef {
        event: usize,
        handle_uid: u64,
        op: OpKind,
    },
    /// An inode seen under a second path without a delete in between.
    InodePathConflict {
        event: usize,
        inode_uid: u64,
        first_path: String,
        second_path: String,
    },
}

/// Audits handle and inode identity in one node trace.
pub fn event_identity_check(trace: &NodeTrace) -> Vec<IdentityViolation> {
    let mut violations = Vec::new();
    let mut opens: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut opened: HashSet<u64> = HashSet::new();
    let mut inode_paths: HashMap<u64, &str> = HashMap::new();

    for (i, ev) in trace.io_events.iter().enumerate() {
        match ev.kind {
            OpKind::Open => {
                opens.entry(ev.handle_uid).or_default().push(i);
                opened.insert(ev.handle_uid);
            }
            k if k.uses_handle() && !opened.contains(&ev.handle_uid) => {
                violations.push(IdentityViolation::OrphanRef {
                    event: i,
                    handle_uid: ev.handle_uid,
                    op: k,
                });
            }
            _ => {}
        }
        if ev.kind.has_path() && !ev.path.is_empty() {
            match inode_paths.get(&ev.inode_uid) {
                Some(&seen) if seen != ev.path => {
                    violations.push(IdentityViolation::InodePathConflict {
                        event: i,
                        inode_uid: ev.inode_uid,
                        first_path: seen.to_string(),
                        second_path: ev.path.clone(),
                    });
                }
                Some(_) => {}
                None => {
                    inode_paths.insert(ev.inode_uid, &ev.path);
                }
            }
            if ev.kind == OpKind::Delete {
                inode_paths.remove(&ev.inode_uid);
            }
        }
    }

    let mut dups: Vec<IdentityViolation> = opens
        .into_iter()
        .filter(|(_, evs)| evs.len() > 1)
        .map(|(handle_uid, events)| IdentityViolation::DuplicateOpen { handle_uid, events })
        .collect();
    dups.append(&mut violations);
    dups
}
