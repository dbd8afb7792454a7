//! Attribution of I/O events to workflow tasks.
//!
//! Three kinds of links tie a node-local process to a task:
//!
//! * [`Method::WorkDirMarker`]: a process opened a workflow-manager private
//!   file (wrapper script, exit code file) directly inside a task's work dir.
//!   The cgroup of that process is bound to the task.
//! * [`Method::ProcessSubtree`]: same trigger, but the process runs outside
//!   any container (cgroup 0 or unknown). The process and everything it forks
//!   are bound instead.
//! * [`Method::PodLabel`]: a Kubernetes pod carries the task name as a label
//!   and its cgroup on the executing node is known.
//!
//! Once bindings exist, every I/O event of a node is labeled with at most one
//! task; the rest are orphans.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::model::{NodeTrace, OpKind, PodMeta, Seconds, TaskRecord};
use crate::process::{IncarnationId, ProcessGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Method {
    WorkDirMarker,
    PodLabel,
    ProcessSubtree,
}

impl Method {
    /// Higher wins when two attributions disagree.
    fn precedence(self) -> u8 {
        match self {
            Method::WorkDirMarker => 2,
            Method::ProcessSubtree => 1,
            Method::PodLabel => 0,
        }
    }
}

/// File names that only the workflow manager's own wrapper touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MarkerRule {
    names: BTreeSet<String>,
}

impl Default for MarkerRule {
    fn default() -> Self {
        MarkerRule::new([".command.sh", ".command.run", ".command.begin", ".exitcode"]).unwrap()
    }
}

impl MarkerRule {
    pub fn new<I, S>(names: I) -> Result<MarkerRule, AssociationError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(AssociationError::InvalidMarkerRule("no marker names".into()));
        }
        if let Some(bad) = names.iter().find(|n| n.is_empty() || n.contains('/')) {
            return Err(AssociationError::InvalidMarkerRule(format!(
                "`{bad}` is not a plain file name"
            )));
        }
        Ok(MarkerRule { names })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn matches(&self, file_name: &str) -> bool {
        self.names.contains(file_name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AssociationError {
    #[error("tasks {first} and {second} share work dir `{work_dir}`")]
    DuplicateWorkDir {
        work_dir: String,
        first: u64,
        second: u64,
    },
    #[error("pod `{pod}` label `{task_name}` matches several tasks: {tasks:?}")]
    AmbiguousTaskName {
        pod: String,
        task_name: String,
        tasks: Vec<u64>,
    },
    #[error("invalid marker rule: {0}")]
    InvalidMarkerRule(String),
    #[error("{traces} traces but {graphs} process graphs")]
    GraphMismatch { traces: usize, graphs: usize },
}

/// Collapses every run of non-alphanumeric characters to one `_` and trims
/// leading and trailing underscores.
pub fn normalize_task_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut pending = false;
    for c in name.chars() {
        if c.is_alphanumeric() {
            if pending && !out.is_empty() {
                out.push('_');
            }
            pending = false;
            out.push(c);
        } else {
            pending = true;
        }
    }
    out
}

/// An open of a marker file inside a task's work dir.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MarkerAccess {
    /// Index into the node's I/O events.
    pub event: usize,
    pub pid: u32,
    pub time: Seconds,
    pub task_id: u64,
}

fn work_dir_index(tasks: &[TaskRecord]) -> Result<HashMap<&str, u64>, AssociationError> {
    let mut by_dir: HashMap<&str, u64> = HashMap::new();
    for t in tasks.iter().filter(|t| !t.work_dir.is_empty()) {
        let dir = t.work_dir.trim_end_matches('/');
        if let Some(&first) = by_dir.get(dir) {
            return Err(AssociationError::DuplicateWorkDir {
                work_dir: t.work_dir.clone(),
                first,
                second: t.task_id,
            });
        }
        by_dir.insert(dir, t.task_id);
    }
    Ok(by_dir)
}

fn marker_hits(
    trace: &NodeTrace,
    by_dir: &HashMap<&str, u64>,
    rule: &MarkerRule,
) -> Vec<MarkerAccess> {
    trace
        .io_events
        .iter()
        .enumerate()
        .filter(|(_, ev)| ev.kind == OpKind::Open)
        .filter_map(|(i, ev)| {
            let (dir, name) = ev.path.rsplit_once('/')?;
            if !rule.matches(name) {
                return None;
            }
            by_dir.get(dir).map(|&task_id| MarkerAccess {
                event: i,
                pid: ev.pid,
                time: ev.time_start,
                task_id,
            })
        })
        .collect()
}

/// Finds opens of marker files located directly inside some task's work dir.
pub fn detect_marker_accesses(
    trace: &NodeTrace,
    tasks: &[TaskRecord],
    rule: &MarkerRule,
) -> Result<Vec<MarkerAccess>, AssociationError> {
    let by_dir = work_dir_index(tasks)?;
    Ok(marker_hits(trace, &by_dir, rule))
}

/// The task an event belongs to and how that was established.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Link {
    pub task_id: u64,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Binding {
    pub task_id: u64,
    pub method: Method,
    /// When the link was observed; pod metadata carries no time.
    pub since: Option<Seconds>,
}

impl Binding {
    fn link(&self) -> Link {
        Link {
            task_id: self.task_id,
            method: self.method,
        }
    }
}

/// A process subtree bound to a task, valid for one incarnation of `pid`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PidBinding {
    pub pid: u32,
    /// Birth of the bound incarnation; `None` when it was never observed.
    pub valid_from: Option<Seconds>,
    /// Birth of the next process reusing `pid`.
    pub valid_until: Option<Seconds>,
    pub task_id: u64,
    pub method: Method,
    pub since: Seconds,
}

impl PidBinding {
    fn key(&self) -> (u32, Option<Seconds>) {
        (self.pid, self.valid_from)
    }

    fn link(&self) -> Link {
        Link {
            task_id: self.task_id,
            method: self.method,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum OrphanReason {
    /// No binding covers the event's process.
    Unbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Orphan {
    pub event: usize,
    pub reason: OrphanReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Cgroup(u64),
    Pid(u32),
}

/// Two links claimed the same cgroup or process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Conflict {
    pub node_id: String,
    pub subject: Subject,
    pub kept: Link,
    pub rejected: Link,
    pub at: Option<Seconds>,
}

/// A workflow pod whose task label names no known task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnmatchedPod {
    pub node_id: String,
    pub pod_name: String,
    pub task_name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NodeAttribution {
    pub cgroups: BTreeMap<u64, Binding>,
    pub pids: Vec<PidBinding>,
    /// One entry per I/O event of the node, in trace order.
    pub events: Vec<Option<Link>>,
}

impl NodeAttribution {
    pub fn orphans(&self) -> impl Iterator<Item = Orphan> + '_ {
        self.events.iter().enumerate().filter_map(|(event, l)| {
            l.is_none().then_some(Orphan {
                event,
                reason: OrphanReason::Unbound,
            })
        })
    }

    pub fn attributed(&self) -> usize {
        self.events.iter().filter(|l| l.is_some()).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Attribution {
    pub nodes: BTreeMap<String, NodeAttribution>,
    pub conflicts: Vec<Conflict>,
    pub unmatched_pods: Vec<UnmatchedPod>,
}

impl Attribution {
    pub fn link(&self, node_id: &str, event: usize) -> Option<Link> {
        self.nodes.get(node_id)?.events.get(event).copied().flatten()
    }

    pub fn orphan_count(&self) -> usize {
        self.nodes.values().map(|n| n.orphans().count()).sum()
    }

    /// Task ids that received at least one event.
    pub fn tasks(&self) -> BTreeSet<u64> {
        self.nodes
            .values()
            .flat_map(|n| n.events.iter().flatten().map(|l| l.task_id))
            .collect()
    }

    /// Methods by which each task received events.
    pub fn methods(&self) -> BTreeMap<u64, BTreeSet<Method>> {
        let mut out: BTreeMap<u64, BTreeSet<Method>> = BTreeMap::new();
        for n in self.nodes.values() {
            for b in n.cgroups.values() {
                out.entry(b.task_id).or_default().insert(b.method);
            }
            for b in &n.pids {
                out.entry(b.task_id).or_default().insert(b.method);
            }
        }
        out
    }
}

/// Builds one process graph per trace, in the same order.
pub fn build_graphs(traces: &[NodeTrace]) -> Vec<ProcessGraph> {
    traces.iter().map(|t| ProcessGraph::build(&t.fork_events)).collect()
}

fn check_graphs(traces: &[NodeTrace], graphs: &[ProcessGraph]) -> Result<(), AssociationError> {
    if traces.len() != graphs.len() {
        return Err(AssociationError::GraphMismatch {
            traces: traces.len(),
            graphs: graphs.len(),
        });
    }
    Ok(())
}

/// Subtree roots resolved against the node's graph.
#[derive(Default)]
struct Roots {
    incarnations: HashMap<IncarnationId, Link>,
    /// Pids with no fork record at all, bound as-is.
    bare: HashMap<u32, Link>,
}

/// Labels every event of `trace`. Cgroup bindings are consulted first, then
/// the nearest bound ancestor incarnation of the event's process.
fn label_events(
    trace: &NodeTrace,
    graph: &ProcessGraph,
    cgroups: &BTreeMap<u64, Binding>,
    roots: &Roots,
) -> Vec<Option<Link>> {
    trace
        .io_events
        .iter()
        .map(|ev| {
            let inc = graph.incarnation_at(ev.pid, ev.time_start);
            if let Some(cg) = inc.and_then(|i| graph.incarnation(i).cgroupid) {
                if let Some(b) = cgroups.get(&cg) {
                    return Some(b.link());
                }
            }
            match inc {
                None => roots.bare.get(&ev.pid).copied(),
                Some(mut id) => loop {
                    if let Some(l) = roots.incarnations.get(&id) {
                        return Some(*l);
                    }
                    id = graph.incarnation(id).parent?;
                },
            }
        })
        .collect()
}

fn resolve_roots(graph: &ProcessGraph, pids: &[PidBinding]) -> Roots {
    let mut roots = Roots::default();
    for b in pids {
        match graph.incarnation_at(b.pid, b.since) {
            Some(id) => {
                roots.incarnations.entry(id).or_insert(b.link());
            }
            None => {
                roots.bare.entry(b.pid).or_insert(b.link());
            }
        }
    }
    roots
}

fn relabel(trace: &NodeTrace, graph: &ProcessGraph, node: &mut NodeAttribution) {
    let roots = resolve_roots(graph, &node.pids);
    node.events = label_events(trace, graph, &node.cgroups, &roots);
}

/// Attributes events through marker-file accesses in task work dirs.
///
/// The first marker access binding a cgroup (or process) wins; later accesses
/// claiming it for another task are reported as conflicts.
pub fn associate_nextflow(
    traces: &[NodeTrace],
    graphs: &[ProcessGraph],
    tasks: &[TaskRecord],
    rule: &MarkerRule,
) -> Result<Attribution, AssociationError> {
    check_graphs(traces, graphs)?;
    let by_dir = work_dir_index(tasks)?;
    let mut out = Attribution::default();
    for (trace, graph) in traces.iter().zip(graphs) {
        let mut node = NodeAttribution::default();
        for hit in marker_hits(trace, &by_dir, rule) {
            let link = Link {
                task_id: hit.task_id,
                method: Method::WorkDirMarker,
            };
            let inc = graph.incarnation_at(hit.pid, hit.time);
            let cgroup = inc
                .and_then(|i| graph.incarnation(i).cgroupid)
                .filter(|&c| c != 0);
            if let Some(cg) = cgroup {
                match node.cgroups.get(&cg) {
                    Some(b) if b.task_id != hit.task_id => out.conflicts.push(Conflict {
                        node_id: trace.node_id.clone(),
                        subject: Subject::Cgroup(cg),
                        kept: b.link(),
                        rejected: link,
                        at: Some(hit.time),
                    }),
                    Some(_) => {}
                    None => {
                        node.cgroups.insert(
                            cg,
                            Binding {
                                task_id: hit.task_id,
                                method: Method::WorkDirMarker,
                                since: Some(hit.time),
                            },
                        );
                    }
                }
                continue;
            }
            let (valid_from, valid_until) = match inc {
                Some(id) => graph.lifetime(id),
                None => (None, None),
            };
            let binding = PidBinding {
                pid: hit.pid,
                valid_from,
                valid_until,
                task_id: hit.task_id,
                method: Method::ProcessSubtree,
                since: hit.time,
            };
            match node.pids.iter().find(|b| b.key() == binding.key()) {
                Some(b) if b.task_id != hit.task_id => out.conflicts.push(Conflict {
                    node_id: trace.node_id.clone(),
                    subject: Subject::Pid(hit.pid),
                    kept: b.link(),
                    rejected: binding.link(),
                    at: Some(hit.time),
                }),
                Some(_) => {}
                None => node.pids.push(binding),
            }
        }
        relabel(trace, graph, &mut node);
        out.nodes.insert(trace.node_id.clone(), node);
    }
    Ok(out)
}

/// Attributes events through Kubernetes pod labels and their cgroups.
pub fn associate_kubernetes(
    traces: &[NodeTrace],
    graphs: &[ProcessGraph],
    tasks: &[TaskRecord],
    pods: &[PodMeta],
) -> Result<Attribution, AssociationError> {
    check_graphs(traces, graphs)?;
    let mut by_name: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for t in tasks {
        by_name
            .entry(normalize_task_name(&t.name))
            .or_default()
            .push(t.task_id);
    }

    let mut out = Attribution::default();
    let mut bindings: BTreeMap<&str, BTreeMap<u64, Binding>> = BTreeMap::new();
    for pod in pods {
        let Some(label) = pod.task_name() else {
            continue;
        };
        let name = normalize_task_name(label);
        let task_id = match by_name.get(&name).map(Vec::as_slice) {
            None | Some([]) => {
                out.unmatched_pods.push(UnmatchedPod {
                    node_id: pod.node_id.clone(),
                    pod_name: pod.pod_name.clone(),
                    task_name: label.to_string(),
                });
                continue;
            }
            Some([id]) => *id,
            Some(ids) => {
                return Err(AssociationError::AmbiguousTaskName {
                    pod: pod.pod_name.clone(),
                    task_name: label.to_string(),
                    tasks: ids.to_vec(),
                })
            }
        };
        let node = bindings.entry(&pod.node_id).or_default();
        let link = Link {
            task_id,
            method: Method::PodLabel,
        };
        match node.get(&pod.cgroupid) {
            Some(b) if b.task_id != task_id => out.conflicts.push(Conflict {
                node_id: pod.node_id.clone(),
                subject: Subject::Cgroup(pod.cgroupid),
                kept: b.link(),
                rejected: link,
                at: None,
            }),
            Some(_) => {}
            None => {
                node.insert(
                    pod.cgroupid,
                    Binding {
                        task_id,
                        method: Method::PodLabel,
                        since: None,
                    },
                );
            }
        }
    }

    for (trace, graph) in traces.iter().zip(graphs) {
        let mut node = NodeAttribution {
            cgroups: bindings.remove(trace.node_id.as_str()).unwrap_or_default(),
            ..NodeAttribution::default()
        };
        relabel(trace, graph, &mut node);
        out.nodes.insert(trace.node_id.clone(), node);
    }
    Ok(out)
}

fn prefer(primary: Link, secondary: Link) -> Link {
    if secondary.method.precedence() > primary.method.precedence() {
        secondary
    } else {
        primary
    }
}

/// Unions two attributions of the same run.
///
/// Where both link the same cgroup, process or event to different tasks the
/// higher-precedence method wins (marker over subtree over pod label, `primary`
/// on ties) and a conflict is reported for each disagreeing binding.
pub fn merge_attributions(primary: &Attribution, secondary: &Attribution) -> Attribution {
    let mut out = Attribution {
        nodes: BTreeMap::new(),
        conflicts: primary.conflicts.clone(),
        unmatched_pods: primary.unmatched_pods.clone(),
    };
    out.conflicts.extend(secondary.conflicts.iter().cloned());
    out.unmatched_pods.extend(secondary.unmatched_pods.iter().cloned());

    let node_ids: BTreeSet<&String> = primary.nodes.keys().chain(secondary.nodes.keys()).collect();
    for node_id in node_ids {
        let (a, b) = match (primary.nodes.get(node_id), secondary.nodes.get(node_id)) {
            (Some(a), Some(b)) => (a, b),
            (Some(only), None) | (None, Some(only)) => {
                out.nodes.insert(node_id.clone(), only.clone());
                continue;
            }
            (None, None) => unreachable!(),
        };
        let mut merged = a.clone();

        for (cg, sb) in &b.cgroups {
            match merged.cgroups.get(cg) {
                None => {
                    merged.cgroups.insert(*cg, sb.clone());
                }
                Some(pb) if pb.task_id == sb.task_id => {}
                Some(pb) => {
                    let kept = prefer(pb.link(), sb.link());
                    let rejected = if kept == pb.link() { sb.link() } else { pb.link() };
                    out.conflicts.push(Conflict {
                        node_id: node_id.clone(),
                        subject: Subject::Cgroup(*cg),
                        kept,
                        rejected,
                        at: pb.since.or(sb.since),
                    });
                    if kept != pb.link() {
                        merged.cgroups.insert(*cg, sb.clone());
                    }
                }
            }
        }

        for sb in &b.pids {
            match merged.pids.iter().position(|p| p.key() == sb.key()) {
                None => merged.pids.push(sb.clone()),
                Some(i) if merged.pids[i].task_id == sb.task_id => {}
                Some(i) => {
                    let pb = &merged.pids[i];
                    let kept = prefer(pb.link(), sb.link());
                    let rejected = if kept == pb.link() { sb.link() } else { pb.link() };
                    out.conflicts.push(Conflict {
                        node_id: node_id.clone(),
                        subject: Subject::Pid(sb.pid),
                        kept,
                        rejected,
                        at: Some(pb.since),
                    });
                    if kept != pb.link() {
                        merged.pids[i] = sb.clone();
                    }
                }
            }
        }

        let len = a.events.len().max(b.events.len());
        merged.events = (0..len)
            .map(|i| {
                match (a.events.get(i).copied().flatten(), b.events.get(i).copied().flatten()) {
                    (Some(x), Some(y)) => Some(prefer(x, y)),
                    (x, y) => x.or(y),
                }
            })
            .collect();
        out.nodes.insert(node_id.clone(), merged);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::ingest::{parse_fork_trace, parse_io_trace, parse_nextflow_log, parse_pod_meta};
    use crate::model::{ForkEvent, IoEvent, SwmsSource};
    use proptest::prelude::*;

    fn golden_trace(with_marker: bool) -> NodeTrace {
        let mut text = String::new();
        if with_marker {
            text.push_str(&fixtures::marker_open_line());
            text.push('\n');
        }
        text.push_str(fixtures::IO_TRACE);
        NodeTrace {
            io_events: parse_io_trace(text.as_bytes()).unwrap(),
            fork_events: parse_fork_trace(fixtures::FORK_TRACE.as_bytes()).unwrap(),
            ..NodeTrace::new("n1")
        }
    }

    fn golden_tasks() -> Vec<TaskRecord> {
        parse_nextflow_log(fixtures::NEXTFLOW_LOG.as_bytes()).unwrap()
    }

    fn task(id: u64, name: &str, dir: &str) -> TaskRecord {
        TaskRecord {
            task_id: id,
            name: name.into(),
            status: "COMPLETED".into(),
            exit_code: Some(0),
            work_dir: dir.into(),
            source: SwmsSource::Nextflow,
        }
    }

    fn ev(t_ms: i64, pid: u32, kind: OpKind, handle: u64, path: &str) -> IoEvent {
        IoEvent {
            time_start: Seconds::from_millis(t_ms),
            time_end: Seconds::from_millis(t_ms),
            pid,
            kind,
            handle_uid: handle,
            path: path.into(),
            ..fixtures::blank_event()
        }
    }

    fn fork(t_ms: i64, parent: u32, pid: u32, cg: u64) -> ForkEvent {
        ForkEvent {
            time: Seconds::from_millis(t_ms),
            parent_pid: parent,
            pid,
            cgroupid: cg,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_task_name("NFCORE_RNASEQ:RNASEQ:FASTQ_FASTQC_UMITOOLS_TRIMGALORE:TRIMGALORE (WT_REP2)"),
            "NFCORE_RNASEQ_RNASEQ_FASTQ_FASTQC_UMITOOLS_TRIMGALORE_TRIMGALORE_WT_REP2"
        );
        assert_eq!(normalize_task_name("ABC"), "ABC");
        assert_eq!(normalize_task_name("a  (b)"), "a_b");
        assert_eq!(normalize_task_name("__"), "");
    }

    #[test]
    fn marker_detection() {
        let tasks = golden_tasks();
        let rule = MarkerRule::default();
        let hits = detect_marker_accesses(&golden_trace(true), &tasks, &rule).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!((hits[0].pid, hits[0].task_id, hits[0].event), (1169224, 6, 0));

        // the data file in the same work dir is not a marker
        assert!(detect_marker_accesses(&golden_trace(false), &tasks, &rule)
            .unwrap()
            .is_empty());

        let mut t = NodeTrace::new("n");
        t.io_events.push(ev(1, 1, OpKind::Open, 1, "/tmp/x"));
        assert!(detect_marker_accesses(&t, &tasks, &rule).unwrap().is_empty());
    }

    #[test]
    fn markers_in_subdirectories_do_not_count() {
        let tasks = vec![task(1, "A", "/w/aa")];
        let mut t = NodeTrace::new("n");
        t.io_events.push(ev(1, 1, OpKind::Open, 1, "/w/aa/sub/.command.sh"));
        t.io_events.push(ev(2, 1, OpKind::Open, 2, "/w/aa/.exitcode"));
        let hits = detect_marker_accesses(&t, &tasks, &MarkerRule::default()).unwrap();
        assert_eq!(hits.iter().map(|h| h.event).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn duplicate_work_dirs_rejected() {
        let tasks = vec![task(1, "A", "/w/x"), task(2, "B", "/w/x")];
        let err = detect_marker_accesses(&NodeTrace::new("n"), &tasks, &MarkerRule::default()).unwrap_err();
        assert!(matches!(err, AssociationError::DuplicateWorkDir { first: 1, second: 2, .. }));
    }

    #[test]
    fn marker_rule_validation() {
        assert!(MarkerRule::new(Vec::<String>::new()).is_err());
        assert!(MarkerRule::new(["a/b"]).is_err());
        assert!(MarkerRule::new([".command.sh"]).unwrap().matches(".command.sh"));
    }

    #[test]
    fn golden_nextflow_binds_cgroup() {
        let traces = vec![golden_trace(true)];
        let graphs = build_graphs(&traces);
        let attr = associate_nextflow(&traces, &graphs, &golden_tasks(), &MarkerRule::default()).unwrap();
        let node = &attr.nodes["n1"];
        assert_eq!(
            node.cgroups[&131863],
            Binding {
                task_id: 6,
                method: Method::WorkDirMarker,
                since: Some("1714067937.500".parse().unwrap())
            }
        );
        assert!(node.events.iter().all(|l| l.map(|l| l.task_id) == Some(6)));
        assert!(attr.conflicts.is_empty());
    }

    #[test]
    fn no_markers_means_all_unbound() {
        let traces = vec![golden_trace(false)];
        let graphs = build_graphs(&traces);
        let attr = associate_nextflow(&traces, &graphs, &golden_tasks(), &MarkerRule::default()).unwrap();
        let orphans: Vec<Orphan> = attr.nodes["n1"].orphans().collect();
        assert_eq!(orphans.len(), 2);
        assert!(orphans.iter().all(|o| o.reason == OrphanReason::Unbound));
    }

    #[test]
    fn golden_pod_label_binds_task() {
        let traces = vec![golden_trace(false)];
        let graphs = build_graphs(&traces);
        let pods = parse_pod_meta(fixtures::POD_META.as_bytes()).unwrap();
        let attr = associate_kubernetes(&traces, &graphs, &golden_tasks(), &pods).unwrap();
        assert_eq!(attr.nodes["n1"].cgroups[&131863].task_id, 6);
        assert_eq!(attr.nodes["n1"].cgroups[&131863].method, Method::PodLabel);
        assert_eq!(attr.nodes["n1"].attributed(), 2);
    }

    #[test]
    fn unlabeled_and_unmatched_pods() {
        let traces = vec![golden_trace(false)];
        let graphs = build_graphs(&traces);
        let pods = parse_pod_meta("n1\tp1\t131863\n n1\tp2\t5\ttaskName=OTHER\n".as_bytes()).unwrap();
        let attr = associate_kubernetes(&traces, &graphs, &golden_tasks(), &pods).unwrap();
        assert!(attr.nodes["n1"].cgroups.is_empty());
        assert_eq!(attr.unmatched_pods.len(), 1);
        assert_eq!(attr.unmatched_pods[0].pod_name, "p2");
    }

    #[test]
    fn ambiguous_pod_label() {
        let tasks = vec![task(1, "A:B", "/w/1"), task(2, "A B", "/w/2")];
        let pods = parse_pod_meta("n1\tp\t3\ttaskName=A_B\n".as_bytes()).unwrap();
        let err = associate_kubernetes(&[], &[], &tasks, &pods).unwrap_err();
        assert!(matches!(err, AssociationError::AmbiguousTaskName { .. }));
    }

    #[test]
    fn subtree_fallback_without_containers() {
        // executor 10 forks task roots 20 and 30 with no cgroup; 20 forks 21
        let tasks = vec![task(1, "A", "/w/a"), task(2, "B", "/w/b")];
        let mut t = NodeTrace::new("n");
        t.fork_events = vec![fork(1, 10, 20, 0), fork(2, 10, 30, 0), fork(5, 20, 21, 0)];
        t.io_events = vec![
            ev(3, 20, OpKind::Open, 1, "/w/a/.command.sh"),
            ev(4, 30, OpKind::Open, 2, "/w/b/.command.sh"),
            ev(6, 21, OpKind::Open, 3, "/data/in"),
            ev(7, 21, OpKind::Read, 3, ""),
            ev(8, 30, OpKind::Open, 4, "/data/other"),
            ev(9, 10, OpKind::Open, 5, "/var/log/x"),
        ];
        let traces = vec![t];
        let graphs = build_graphs(&traces);
        let attr = associate_nextflow(&traces, &graphs, &tasks, &MarkerRule::default()).unwrap();
        let tasks_of: Vec<Option<u64>> = attr.nodes["n"].events.iter().map(|l| l.map(|l| l.task_id)).collect();
        assert_eq!(tasks_of, vec![Some(1), Some(2), Some(1), Some(1), Some(2), None]);
        assert!(attr.nodes["n"].events[2].unwrap().method == Method::ProcessSubtree);
        assert_eq!(attr.nodes["n"].pids.len(), 2);
    }

    #[test]
    fn marker_cgroup_conflict_first_wins() {
        let tasks = vec![task(1, "A", "/w/a"), task(2, "B", "/w/b")];
        let mut t = NodeTrace::new("n");
        t.fork_events = vec![fork(1, 10, 20, 7)];
        t.io_events = vec![
            ev(3, 20, OpKind::Open, 1, "/w/a/.command.sh"),
            ev(4, 20, OpKind::Open, 2, "/w/b/.command.sh"),
        ];
        let traces = vec![t];
        let graphs = build_graphs(&traces);
        let attr = associate_nextflow(&traces, &graphs, &tasks, &MarkerRule::default()).unwrap();
        assert_eq!(attr.nodes["n"].cgroups[&7].task_id, 1);
        assert_eq!(attr.conflicts.len(), 1);
        assert_eq!(attr.conflicts[0].rejected.task_id, 2);
    }

    #[test]
    fn per_node_namespacing() {
        // same pid and cgroup values on two nodes, different tasks
        let tasks = vec![task(1, "A", "/w/a"), task(2, "B", "/w/b")];
        let mk = |node: &str, dir: &str| NodeTrace {
            fork_events: vec![fork(1, 10, 20, 7)],
            io_events: vec![
                ev(2, 20, OpKind::Open, 1, &format!("{dir}/.command.sh")),
                ev(3, 20, OpKind::Open, 2, "/data/f"),
            ],
            ..NodeTrace::new(node)
        };
        let traces = vec![mk("n1", "/w/a"), mk("n2", "/w/b")];
        let graphs = build_graphs(&traces);
        let attr = associate_nextflow(&traces, &graphs, &tasks, &MarkerRule::default()).unwrap();
        assert_eq!(attr.link("n1", 1).unwrap().task_id, 1);
        assert_eq!(attr.link("n2", 1).unwrap().task_id, 2);
        assert!(attr.conflicts.is_empty());
    }

    fn attribution_with(cg: u64, link: Link, events: Vec<Option<Link>>) -> Attribution {
        let mut node = NodeAttribution {
            events,
            ..Default::default()
        };
        node.cgroups.insert(
            cg,
            Binding {
                task_id: link.task_id,
                method: link.method,
                since: None,
            },
        );
        Attribution {
            nodes: BTreeMap::from([("n".to_string(), node)]),
            ..Default::default()
        }
    }

    #[test]
    fn merge_identity_and_union() {
        let marker = Link {
            task_id: 1,
            method: Method::WorkDirMarker,
        };
        let a = attribution_with(5, marker, vec![Some(marker), None]);
        assert_eq!(merge_attributions(&a, &a), a);

        let pod = Link {
            task_id: 2,
            method: Method::PodLabel,
        };
        let b = attribution_with(6, pod, vec![None, Some(pod)]);
        let m = merge_attributions(&a, &b);
        assert_eq!(m.nodes["n"].cgroups.len(), 2);
        assert_eq!(m.nodes["n"].events, vec![Some(marker), Some(pod)]);
        assert!(m.conflicts.is_empty());
    }

    #[test]
    fn merge_conflict_keeps_marker() {
        let marker = Link {
            task_id: 1,
            method: Method::WorkDirMarker,
        };
        let pod = Link {
            task_id: 2,
            method: Method::PodLabel,
        };
        let a = attribution_with(5, marker, vec![Some(marker)]);
        let b = attribution_with(5, pod, vec![Some(pod)]);
        for m in [merge_attributions(&a, &b), merge_attributions(&b, &a)] {
            assert_eq!(m.nodes["n"].cgroups[&5].task_id, 1);
            assert_eq!(m.nodes["n"].events, vec![Some(marker)]);
            assert_eq!(m.conflicts.len(), 1);
            assert_eq!(m.conflicts[0].kept, marker);
            assert_eq!(m.conflicts[0].rejected, pod);
        }
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_task_name(&s);
            prop_assert_eq!(normalize_task_name(&once), once.clone());
            prop_assert!(!once.starts_with('_') && !once.ends_with('_'));
            prop_assert!(!once.contains("__"));
        }
    }
}
