//! Per-task file access metrics derived from an attributed run.
//!
//! A task's runtime window spans its first observed event start to its last
//! event end. A file's *span fraction* is the time between the task's first and
//! last read or write of the file divided by that window: close to 1 for
//! streaming access, close to 0 for bulk access.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::association::Attribution;
use crate::model::{IoEvent, NodeTrace, OpKind, Seconds};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("task {0} has no attributed I/O")]
    NoObservedIo(u64),
    #[error("task {task_id} never read or wrote {file}")]
    FileNotAccessed { task_id: u64, file: FileKey },
    #[error("bucket count must be at least 1")]
    NoBuckets,
}

/// A file as seen by one node's tracer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct FileKey {
    pub node_id: String,
    pub inode_uid: u64,
}

impl std::fmt::Display for FileKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "inode {} on {}", self.inode_uid, self.node_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Runtime {
    pub t0: Seconds,
    pub t1: Seconds,
}

impl Runtime {
    pub fn duration(&self) -> f64 {
        self.t1.since(self.t0)
    }

    /// Position of `t` inside the window; 0 for an empty window.
    pub fn relative(&self, t: Seconds) -> f64 {
        let d = self.t1.nanos() - self.t0.nanos();
        if d == 0 {
            0.0
        } else {
            (t.nanos() - self.t0.nanos()) as f64 / d as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineRow {
    pub t_rel: f64,
    pub kind: OpKind,
    pub offset: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileProfile {
    pub node_id: String,
    pub path: String,
    pub inode_uid: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub opens: u64,
    pub reads: u64,
    pub writes: u64,
    pub closes: u64,
    pub deletes: u64,
    pub first_access: Seconds,
    pub last_access: Seconds,
    pub first_read: Option<Seconds>,
    pub first_write: Option<Seconds>,
    pub span_fraction: f64,
    pub timeline: Vec<TimelineRow>,
}

impl FileProfile {
    pub fn key(&self) -> FileKey {
        FileKey {
            node_id: self.node_id.clone(),
            inode_uid: self.inode_uid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskIoProfile {
    pub task_id: u64,
    pub runtime: Runtime,
    /// Files the task read or wrote, by node and inode.
    pub files: Vec<FileProfile>,
}

/// A file written by one task and read later by another.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct LineageEdge {
    pub path: String,
    pub inode_uid: u64,
    pub producer: u64,
    pub producer_node: String,
    pub consumer: u64,
    pub consumer_node: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct EventRef {
    node: usize,
    event: usize,
}

/// Attributed events grouped by task, with path lookup for handle-based events.
pub struct TaskEvents<'a> {
    traces: &'a [NodeTrace],
    by_task: BTreeMap<u64, Vec<EventRef>>,
    handle_paths: Vec<HashMap<u64, &'a str>>,
}

impl<'a> TaskEvents<'a> {
    pub fn new(traces: &'a [NodeTrace], attribution: &Attribution) -> TaskEvents<'a> {
        let mut by_task: BTreeMap<u64, Vec<EventRef>> = BTreeMap::new();
        let mut handle_paths = Vec::with_capacity(traces.len());
        for (n, trace) in traces.iter().enumerate() {
            let mut paths = HashMap::new();
            for ev in trace.io_events.iter().filter(|e| e.kind == OpKind::Open) {
                paths.entry(ev.handle_uid).or_insert(ev.path.as_str());
            }
            handle_paths.push(paths);
            let Some(node) = attribution.nodes.get(&trace.node_id) else {
                continue;
            };
            for (i, link) in node.events.iter().enumerate() {
                if let Some(l) = link {
                    by_task.entry(l.task_id).or_default().push(EventRef { node: n, event: i });
                }
            }
        }
        // trace order within a node is time order; across nodes sort by time,
        // then node id, so node input order does not matter
        for refs in by_task.values_mut() {
            refs.sort_by(|a, b| {
                let (ea, eb) = (&traces[a.node].io_events[a.event], &traces[b.node].io_events[b.event]);
                ea.time_start
                    .cmp(&eb.time_start)
                    .then_with(|| traces[a.node].node_id.cmp(&traces[b.node].node_id))
                    .then(a.event.cmp(&b.event))
            });
        }
        TaskEvents {
            traces,
            by_task,
            handle_paths,
        }
    }

    pub fn tasks(&self) -> impl Iterator<Item = u64> + '_ {
        self.by_task.keys().copied()
    }

    fn events(&self, task_id: u64) -> impl Iterator<Item = (EventRef, &'a IoEvent)> + '_ {
        self.by_task
            .get(&task_id)
            .into_iter()
            .flatten()
            .map(|r| (*r, &self.traces[r.node].io_events[r.event]))
    }

    fn key_of(&self, r: EventRef, ev: &IoEvent) -> FileKey {
        FileKey {
            node_id: self.traces[r.node].node_id.clone(),
            inode_uid: ev.inode_uid,
        }
    }

    fn path_of(&self, r: EventRef, ev: &'a IoEvent) -> &'a str {
        if ev.kind.has_path() {
            &ev.path
        } else {
            self.handle_paths[r.node].get(&ev.handle_uid).copied().unwrap_or("")
        }
    }

    /// Count of attributed events of `task_id`.
    pub fn event_count(&self, task_id: u64) -> usize {
        self.by_task.get(&task_id).map_or(0, Vec::len)
    }

    pub fn task_runtime(&self, task_id: u64) -> Result<Runtime, AnalysisError> {
        let mut it = self.events(task_id).map(|(_, e)| (e.time_start, e.time_end));
        let (mut t0, mut t1) = it.next().ok_or(AnalysisError::NoObservedIo(task_id))?;
        for (s, e) in it {
            t0 = t0.min(s);
            t1 = t1.max(e);
        }
        Ok(Runtime { t0, t1 })
    }

    /// Finds a file the task read or wrote by its path.
    pub fn file_by_path(&self, task_id: u64, path: &str) -> Option<FileKey> {
        self.events(task_id)
            .find(|(r, e)| e.kind.is_data() && self.path_of(*r, e) == path)
            .map(|(r, e)| self.key_of(r, e))
    }

    fn data_accesses<'s>(
        &'s self,
        task_id: u64,
        file: &'s FileKey,
    ) -> impl Iterator<Item = &'a IoEvent> + 's {
        self.events(task_id)
            .filter(move |(r, e)| {
                e.kind.is_data()
                    && e.inode_uid == file.inode_uid
                    && self.traces[r.node].node_id == file.node_id
            })
            .map(|(_, e)| e)
    }

    pub fn span_fraction(&self, task_id: u64, file: &FileKey) -> Result<f64, AnalysisError> {
        let runtime = self.task_runtime(task_id)?;
        let mut times = self.data_accesses(task_id, file).map(|e| e.time_start);
        let first = times.next().ok_or_else(|| AnalysisError::FileNotAccessed {
            task_id,
            file: file.clone(),
        })?;
        let (lo, hi) = times.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t)));
        Ok(runtime.relative(hi) - runtime.relative(lo))
    }

    pub fn access_timeline(&self, task_id: u64, file: &FileKey) -> Result<Vec<TimelineRow>, AnalysisError> {
        let runtime = self.task_runtime(task_id)?;
        let rows: Vec<TimelineRow> = self
            .data_accesses(task_id, file)
            .map(|e| TimelineRow {
                t_rel: runtime.relative(e.time_start),
                kind: e.kind,
                offset: e.offset,
                size: e.size,
            })
            .collect();
        if rows.is_empty() && !self.events(task_id).any(|(r, e)| &self.key_of(r, e) == file) {
            return Err(AnalysisError::FileNotAccessed {
                task_id,
                file: file.clone(),
            });
        }
        Ok(rows)
    }

    pub fn profile(&self, task_id: u64) -> Result<TaskIoProfile, AnalysisError> {
        let runtime = self.task_runtime(task_id)?;
        let mut files: BTreeMap<FileKey, FileProfile> = BTreeMap::new();
        let mut counts: HashMap<FileKey, [u64; 3]> = HashMap::new();
        for (r, e) in self.events(task_id) {
            let key = self.key_of(r, e);
            if !e.kind.is_data() {
                let c = counts.entry(key).or_default();
                match e.kind {
                    OpKind::Open => c[0] += 1,
                    OpKind::Close => c[1] += 1,
                    _ => c[2] += 1,
                }
                continue;
            }
            let fp = files.entry(key).or_insert_with(|| FileProfile {
                node_id: self.traces[r.node].node_id.clone(),
                path: self.path_of(r, e).to_string(),
                inode_uid: e.inode_uid,
                bytes_read: 0,
                bytes_written: 0,
                opens: 0,
                reads: 0,
                writes: 0,
                closes: 0,
                deletes: 0,
                first_access: e.time_start,
                last_access: e.time_start,
                first_read: None,
                first_write: None,
                span_fraction: 0.0,
                timeline: Vec::new(),
            });
            if fp.path.is_empty() {
                fp.path = self.path_of(r, e).to_string();
            }
            fp.first_access = fp.first_access.min(e.time_start);
            fp.last_access = fp.last_access.max(e.time_start);
            if e.kind == OpKind::Read {
                fp.reads += 1;
                fp.bytes_read += e.transferred();
                fp.first_read = Some(fp.first_read.map_or(e.time_start, |t| t.min(e.time_start)));
            } else {
                fp.writes += 1;
                fp.bytes_written += e.transferred();
                fp.first_write = Some(fp.first_write.map_or(e.time_start, |t| t.min(e.time_start)));
            }
            fp.timeline.push(TimelineRow {
                t_rel: runtime.relative(e.time_start),
                kind: e.kind,
                offset: e.offset,
                size: e.size,
            });
        }
        for (key, fp) in files.iter_mut() {
            if let Some([o, c, d]) = counts.get(key) {
                (fp.opens, fp.closes, fp.deletes) = (*o, *c, *d);
            }
            fp.span_fraction = runtime.relative(fp.last_access) - runtime.relative(fp.first_access);
        }
        Ok(TaskIoProfile {
            task_id,
            runtime,
            files: files.into_values().collect(),
        })
    }

    /// Profiles of every task with at least one attributed event.
    pub fn profiles(&self) -> Vec<TaskIoProfile> {
        self.tasks().filter_map(|t| self.profile(t).ok()).collect()
    }
}

/// Buckets the span fraction of every (task, file) pair into equal-width bins
/// over [0, 1]. A fraction of exactly 1 lands in the last bin.
pub fn bulkiness_histogram(profiles: &[TaskIoProfile], bucket_count: usize) -> Result<Vec<u64>, AnalysisError> {
    histogram(
        profiles.iter().flat_map(|p| p.files.iter().map(|f| f.span_fraction)),
        bucket_count,
    )
}

pub fn histogram(fractions: impl IntoIterator<Item = f64>, bucket_count: usize) -> Result<Vec<u64>, AnalysisError> {
    if bucket_count < 1 {
        return Err(AnalysisError::NoBuckets);
    }
    let mut bins = vec![0; bucket_count];
    for f in fractions {
        let b = (f.clamp(0.0, 1.0) * bucket_count as f64).floor() as usize;
        bins[b.min(bucket_count - 1)] += 1;
    }
    Ok(bins)
}

/// Producer to consumer edges between tasks sharing a file.
///
/// An edge is emitted when the producer wrote the file before the consumer
/// first read it. Files on the same node are matched by inode; across nodes,
/// where inode ids are unrelated, by path.
pub fn cross_task_lineage(profiles: &[TaskIoProfile]) -> Vec<LineageEdge> {
    struct Use<'p> {
        task: u64,
        file: &'p FileProfile,
    }
    let mut by_inode: BTreeMap<(&str, u64), Vec<Use>> = BTreeMap::new();
    let mut by_path: BTreeMap<&str, Vec<Use>> = BTreeMap::new();
    for p in profiles {
        for f in &p.files {
            by_inode
                .entry((f.node_id.as_str(), f.inode_uid))
                .or_default()
                .push(Use { task: p.task_id, file: f });
            if !f.path.is_empty() {
                by_path.entry(f.path.as_str()).or_default().push(Use { task: p.task_id, file: f });
            }
        }
    }

    let mut edges = BTreeSet::new();
    let mut scan = |group: &[Use], same_node: bool| {
        for a in group {
            let Some(w) = a.file.first_write else { continue };
            for b in group {
                if a.task == b.task || (a.file.node_id == b.file.node_id) != same_node {
                    continue;
                }
                if b.file.first_read.is_some_and(|r| w < r) {
                    edges.insert(LineageEdge {
                        path: a.file.path.clone(),
                        inode_uid: a.file.inode_uid,
                        producer: a.task,
                        producer_node: a.file.node_id.clone(),
                        consumer: b.task,
                        consumer_node: b.file.node_id.clone(),
                    });
                }
            }
        }
    };
    for group in by_inode.values() {
        scan(group, true);
    }
    for group in by_path.values() {
        scan(group, false);
    }
    edges.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum OrphanCause {
    /// The handle predates every open seen on the node: opened before monitoring started.
    PreExistingHandle,
    /// The handle falls between observed opens: its open record was lost.
    DroppedOpen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OrphanHandle {
    pub handle_uid: u64,
    pub refs: u64,
    pub cause: OrphanCause,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NodeLoss {
    pub node_id: String,
    /// Reads, writes and closes whose handle was never opened.
    pub orphan_refs: u64,
    pub orphan_handles: Vec<OrphanHandle>,
    pub unattributed_events: u64,
    /// Records the tracer itself reported as lost.
    pub reported_lost: Option<u64>,
}

impl NodeLoss {
    pub fn orphan_handle_count(&self, cause: OrphanCause) -> usize {
        self.orphan_handles.iter().filter(|h| h.cause == cause).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LossReport {
    pub orphan_refs: u64,
    pub orphan_handles: u64,
    pub unattributed_events: u64,
    pub reported_lost: u64,
    pub nodes: Vec<NodeLoss>,
}

/// Counts evidence of lost or missing records.
///
/// Handle ids come from a per-node counter, so an orphan handle smaller than
/// every observed open was opened before monitoring began, while one inside the
/// observed range lost its open record.
pub fn loss_report(traces: &[NodeTrace], attribution: Option<&Attribution>) -> LossReport {
    let mut nodes: Vec<NodeLoss> = traces
        .iter()
        .map(|trace| {
            let mut opened = BTreeSet::new();
            let mut orphans: BTreeMap<u64, u64> = BTreeMap::new();
            for ev in &trace.io_events {
                if ev.kind == OpKind::Open {
                    opened.insert(ev.handle_uid);
                } else if ev.kind.uses_handle() && !opened.contains(&ev.handle_uid) {
                    *orphans.entry(ev.handle_uid).or_default() += 1;
                }
            }
            let first_open = trace
                .io_events
                .iter()
                .filter(|e| e.kind == OpKind::Open)
                .map(|e| e.handle_uid)
                .min();
            let orphan_handles = orphans
                .into_iter()
                .map(|(handle_uid, refs)| OrphanHandle {
                    handle_uid,
                    refs,
                    cause: match first_open {
                        Some(m) if handle_uid > m => OrphanCause::DroppedOpen,
                        _ => OrphanCause::PreExistingHandle,
                    },
                })
                .collect::<Vec<_>>();
            let unattributed_events = match attribution.and_then(|a| a.nodes.get(&trace.node_id)) {
                Some(n) => n.orphans().count() as u64,
                None => trace.io_events.len() as u64,
            };
            NodeLoss {
                node_id: trace.node_id.clone(),
                orphan_refs: orphan_handles.iter().map(|h| h.refs).sum(),
                orphan_handles,
                unattributed_events,
                reported_lost: trace.reported_lost,
            }
        })
        .collect();
    nodes.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    LossReport {
        orphan_refs: nodes.iter().map(|n| n.orphan_refs).sum(),
        orphan_handles: nodes.iter().map(|n| n.orphan_handles.len() as u64).sum(),
        unattributed_events: nodes.iter().map(|n| n.unattributed_events).sum(),
        reported_lost: nodes.iter().filter_map(|n| n.reported_lost).sum(),
        nodes,
    }
}
