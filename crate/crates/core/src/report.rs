//! The run report: one serializable document plus flat CSV projections of it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::Serialize;

use crate::analysis::{bulkiness_histogram, cross_task_lineage, loss_report, LineageEdge, LossReport, TaskEvents, TaskIoProfile};
use crate::association::{
    associate_kubernetes, associate_nextflow, build_graphs, merge_attributions, AssociationError, Attribution,
    Conflict, MarkerRule, Method, UnmatchedPod,
};
use crate::ingest::{FilterSettings, LoadedRun, RunInputs};
use crate::model::{event_identity_check, OpKind, TaskRecord};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub markers: MarkerRule,
    pub buckets: usize,
    /// Skip association and analysis; report per-node statistics only.
    pub raw: bool,
}

impl Default for ReportOptions {
    fn default() -> ReportOptions {
        ReportOptions {
            markers: MarkerRule::default(),
            buckets: 20,
            raw: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportInputs {
    pub trace_dirs: Vec<String>,
    pub nextflow_log: Option<String>,
    pub airflow_log: Option<String>,
    pub pod_meta: Option<String>,
    pub k8s_events: Option<String>,
}

impl ReportInputs {
    fn from(inputs: &RunInputs) -> ReportInputs {
        let s = |p: &Option<std::path::PathBuf>| p.as_ref().map(|p| p.display().to_string());
        ReportInputs {
            trace_dirs: inputs.node_dirs.iter().map(|p| p.display().to_string()).collect(),
            nextflow_log: s(&inputs.nextflow_log),
            airflow_log: s(&inputs.airflow_log),
            pod_meta: s(&inputs.pod_meta),
            k8s_events: s(&inputs.k8s_events),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeStats {
    pub node_id: String,
    pub io_events: usize,
    pub fork_events: usize,
    /// Keyed by operation letter.
    pub ops: BTreeMap<char, usize>,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub attributed_events: usize,
    pub identity_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSection {
    pub record: TaskRecord,
    pub methods: BTreeSet<Method>,
    pub events: usize,
    /// Absent when no I/O was attributed to the task.
    pub profile: Option<TaskIoProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bulkiness {
    pub buckets: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub tool_version: String,
    pub inputs: ReportInputs,
    pub filters: FilterSettings,
    pub markers: Vec<String>,
    pub nodes: Vec<NodeStats>,
    /// Absent in raw mode or without a workflow log.
    pub tasks: Option<Vec<TaskSection>>,
    pub bulkiness: Option<Bulkiness>,
    pub lineage: Vec<LineageEdge>,
    pub loss: LossReport,
    pub conflicts: Vec<Conflict>,
    pub unmatched_pods: Vec<UnmatchedPod>,
    /// Started pods without a metadata row.
    pub missed_pods: Vec<String>,
}

/// Associates, analyzes and assembles the report of a loaded run.
pub fn build_report(
    inputs: &RunInputs,
    run: &LoadedRun,
    options: &ReportOptions,
) -> Result<ReportDocument, AssociationError> {
    let traces = &run.traces;
    let attribution = if options.raw || run.tasks.is_empty() {
        None
    } else {
        let graphs = build_graphs(traces);
        let nf = associate_nextflow(traces, &graphs, &run.tasks, &options.markers)?;
        Some(if run.pods.is_empty() {
            nf
        } else {
            let k8s = associate_kubernetes(traces, &graphs, &run.tasks, &run.pods)?;
            merge_attributions(&nf, &k8s)
        })
    };

    let nodes = traces
        .iter()
        .map(|t| {
            let mut ops = BTreeMap::new();
            let (mut bytes_read, mut bytes_written) = (0, 0);
            for e in &t.io_events {
                *ops.entry(e.kind.letter()).or_insert(0) += 1;
                match e.kind {
                    OpKind::Read => bytes_read += e.transferred(),
                    OpKind::Write => bytes_written += e.transferred(),
                    _ => {}
                }
            }
            NodeStats {
                node_id: t.node_id.clone(),
                io_events: t.io_events.len(),
                fork_events: t.fork_events.len(),
                ops,
                bytes_read,
                bytes_written,
                attributed_events: attribution
                    .as_ref()
                    .and_then(|a| a.nodes.get(&t.node_id))
                    .map_or(0, |n| n.attributed()),
                identity_violations: event_identity_check(t).len(),
            }
        })
        .collect();

    let known_pods: BTreeSet<&str> = run.pods.iter().map(|p| p.pod_name.as_str()).collect();
    let missed_pods: BTreeSet<String> = run
        .pod_starts
        .iter()
        .filter(|s| !known_pods.contains(s.pod_name.as_str()))
        .map(|s| s.pod_name.clone())
        .collect();

    let mut doc = ReportDocument {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        inputs: ReportInputs::from(inputs),
        filters: inputs.filters.clone(),
        markers: options.markers.names().map(str::to_string).collect(),
        nodes,
        tasks: None,
        bulkiness: None,
        lineage: Vec::new(),
        loss: loss_report(traces, attribution.as_ref()),
        conflicts: Vec::new(),
        unmatched_pods: Vec::new(),
        missed_pods: missed_pods.into_iter().collect(),
    };
    let Some(attribution) = attribution else {
        return Ok(doc);
    };

    let (sections, profiles) = task_sections(traces, &attribution, &run.tasks);
    doc.bulkiness = Some(Bulkiness {
        buckets: options.buckets,
        counts: bulkiness_histogram(&profiles, options.buckets).unwrap_or_default(),
    });
    doc.lineage = cross_task_lineage(&profiles);
    doc.tasks = Some(sections);
    doc.conflicts = attribution.conflicts;
    doc.unmatched_pods = attribution.unmatched_pods;
    Ok(doc)
}

fn task_sections(
    traces: &[crate::model::NodeTrace],
    attribution: &Attribution,
    tasks: &[TaskRecord],
) -> (Vec<TaskSection>, Vec<TaskIoProfile>) {
    let te = TaskEvents::new(traces, attribution);
    let methods = attribution.methods();
    let mut records: Vec<&TaskRecord> = tasks.iter().collect();
    records.sort_by_key(|t| (t.source, t.task_id));
    let mut profiles = Vec::new();
    let sections = records
        .into_iter()
        .map(|t| {
            let profile = te.profile(t.task_id).ok();
            if let Some(p) = &profile {
                profiles.push(p.clone());
            }
            TaskSection {
                record: t.clone(),
                methods: methods.get(&t.task_id).cloned().unwrap_or_default(),
                events: te.event_count(t.task_id),
                profile,
            }
        })
        .collect();
    (sections, profiles)
}

impl ReportDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Short human-readable summary.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "schema {} (wfio {})", self.schema_version, self.tool_version);
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "node {}: {} io events, {} forks, {} B read, {} B written, {} attributed, {} identity violations",
                n.node_id, n.io_events, n.fork_events, n.bytes_read, n.bytes_written, n.attributed_events, n.identity_violations
            );
        }
        if let Some(tasks) = &self.tasks {
            for t in tasks {
                let methods: Vec<String> = t.methods.iter().map(|m| format!("{m:?}")).collect();
                match &t.profile {
                    Some(p) => {
                        let _ = writeln!(
                            s,
                            "task {} {}: {} events, {:.3} s, {} files, via {}",
                            t.record.task_id,
                            t.record.name,
                            t.events,
                            p.runtime.duration(),
                            p.files.len(),
                            methods.join("+")
                        );
                    }
                    None => {
                        let _ = writeln!(s, "task {} {}: no attributed I/O", t.record.task_id, t.record.name);
                    }
                }
            }
        }
        for e in &self.lineage {
            let _ = writeln!(s, "lineage {} -> {}: {}", e.producer, e.consumer, e.path);
        }
        let _ = writeln!(
            s,
            "loss: {} orphan refs on {} handles, {} unattributed events, {} reported lost",
            self.loss.orphan_refs, self.loss.orphan_handles, self.loss.unattributed_events, self.loss.reported_lost
        );
        let _ = writeln!(
            s,
            "{} conflicts, {} unmatched pods, {} pods without metadata",
            self.conflicts.len(),
            self.unmatched_pods.len(),
            self.missed_pods.len()
        );
        s
    }

    fn profiles(&self) -> impl Iterator<Item = &TaskIoProfile> {
        self.tasks.iter().flatten().filter_map(|t| t.profile.as_ref())
    }

    /// `bucket, lower, upper, count`
    pub fn write_histogram_csv(&self, w: impl Write) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["bucket", "lower", "upper", "count"])?;
        if let Some(b) = &self.bulkiness {
            for (i, c) in b.counts.iter().enumerate() {
                let lo = i as f64 / b.buckets as f64;
                let hi = (i + 1) as f64 / b.buckets as f64;
                w.write_record([i.to_string(), lo.to_string(), hi.to_string(), c.to_string()])?;
            }
        }
        w.flush()
    }

    /// One row per (task, file) with its span fraction.
    pub fn write_bulkiness_csv(&self, w: impl Write) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "task_id",
            "node",
            "path",
            "inode",
            "bytes_read",
            "bytes_written",
            "span_fraction",
        ])?;
        for p in self.profiles() {
            for f in &p.files {
                w.write_record([
                    p.task_id.to_string(),
                    f.node_id.clone(),
                    f.path.clone(),
                    f.inode_uid.to_string(),
                    f.bytes_read.to_string(),
                    f.bytes_written.to_string(),
                    f.span_fraction.to_string(),
                ])?;
            }
        }
        w.flush()
    }

    pub fn write_timelines_csv(&self, w: impl Write) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["task_id", "node", "path", "inode", "t_rel", "kind", "offset", "size"])?;
        for p in self.profiles() {
            for f in &p.files {
                for r in &f.timeline {
                    w.write_record([
                        p.task_id.to_string(),
                        f.node_id.clone(),
                        f.path.clone(),
                        f.inode_uid.to_string(),
                        r.t_rel.to_string(),
                        r.kind.letter().to_string(),
                        r.offset.to_string(),
                        r.size.to_string(),
                    ])?;
                }
            }
        }
        w.flush()
    }

    pub fn write_lineage_csv(&self, w: impl Write) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["producer", "producer_node", "consumer", "consumer_node", "path", "inode"])?;
        for e in &self.lineage {
            w.write_record([
                e.producer.to_string(),
                e.producer_node.clone(),
                e.consumer.to_string(),
                e.consumer_node.clone(),
                e.path.clone(),
                e.inode_uid.to_string(),
            ])?;
        }
        w.flush()
    }

    /// Writes `report.json` (or `report.txt`) and the CSV tables into `dir`.
    pub fn write_dir(&self, dir: &std::path::Path, text: bool) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let file = |name: &str| std::fs::File::create(dir.join(name)).map(io::BufWriter::new);
        if text {
            file("report.txt")?.write_all(self.to_text().as_bytes())?;
        } else {
            file("report.json")?.write_all(self.to_json().as_bytes())?;
        }
        self.write_histogram_csv(file("histogram.csv")?)?;
        self.write_bulkiness_csv(file("bulkiness.csv")?)?;
        self.write_timelines_csv(file("timelines.csv")?)?;
        self.write_lineage_csv(file("lineage.csv")?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::load_run;
    use crate::sim::{generate_run, random_config, NEXTFLOW_LOG_FILE, POD_META_FILE};

    fn sim_inputs(dir: &std::path::Path, nodes: &[String]) -> RunInputs {
        RunInputs {
            node_dirs: nodes.iter().map(|n| dir.join(n)).collect(),
            nextflow_log: Some(dir.join(NEXTFLOW_LOG_FILE)),
            pod_meta: Some(dir.join(POD_META_FILE)),
            ..Default::default()
        }
    }

    #[test]
    fn report_on_simulated_run() {
        let config = random_config(3);
        let run = generate_run(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.write_to(dir.path()).unwrap();
        let inputs = sim_inputs(dir.path(), &config.nodes);
        let doc = build_report(&inputs, &load_run(&inputs).unwrap(), &ReportOptions::default()).unwrap();
        let tasks = doc.tasks.as_ref().unwrap();
        assert_eq!(tasks.len(), config.tasks.len());
        assert_eq!(doc.loss.unattributed_events, 0);
        let files: usize = doc.profiles().map(|p| p.files.len()).sum();
        assert_eq!(doc.bulkiness.as_ref().unwrap().counts.iter().sum::<u64>() as usize, files);
        assert!(doc.nodes.iter().all(|n| n.identity_violations == 0));
    }

    #[test]
    fn raw_mode_has_no_tasks() {
        let config = random_config(3);
        let run = generate_run(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.write_to(dir.path()).unwrap();
        let inputs = RunInputs {
            nextflow_log: None,
            ..sim_inputs(dir.path(), &config.nodes)
        };
        let opts = ReportOptions {
            raw: true,
            ..Default::default()
        };
        let doc = build_report(&inputs, &load_run(&inputs).unwrap(), &opts).unwrap();
        assert!(doc.tasks.is_none() && doc.bulkiness.is_none());
        let total: usize = doc.nodes.iter().map(|n| n.io_events).sum();
        assert_eq!(doc.loss.unattributed_events as usize, total);
        assert!(!doc.to_json().contains("\"profile\""));
    }

    #[test]
    fn tables_project_the_document() {
        let config = random_config(6);
        let run = generate_run(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.write_to(dir.path()).unwrap();
        let inputs = sim_inputs(dir.path(), &config.nodes);
        let doc = build_report(&inputs, &load_run(&inputs).unwrap(), &ReportOptions::default()).unwrap();
        let mut buf = Vec::new();
        doc.write_timelines_csv(&mut buf).unwrap();
        let rows = String::from_utf8(buf).unwrap().lines().count() - 1;
        let expected: usize = doc.profiles().flat_map(|p| &p.files).map(|f| f.timeline.len()).sum();
        assert_eq!(rows, expected);
        let mut buf = Vec::new();
        doc.write_lineage_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count() - 1, doc.lineage.len());
        assert!(doc.to_text().contains("loss:"));
    }
}
