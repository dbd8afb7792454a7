//! Command implementations behind the `wfio` binary.
//!
//! Every command returns its exit status: 0 on success, 1 for bad input or
//! failed checks, 2 when an internal invariant breaks.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use wfio::association::{
    associate_kubernetes, associate_nextflow, build_graphs, merge_attributions, AssociationError, MarkerRule,
};
use wfio::ingest::{load_node_dir, load_run, FilterSettings, LoadedRun, RunInputs};
use wfio::model::{event_identity_check, IdentityViolation};
use wfio::report::{build_report, ReportOptions};
use wfio::sim::{generate_run, inject_loss, LossModel, SimConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "wfio", version, about = "Attribute node-level I/O traces to workflow tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic run directory from a config file.
    Simulate(SimulateArgs),
    /// Audit trace identity invariants.
    Check(CheckArgs),
    /// Attribute events to tasks and print per-task counts.
    Associate(AssociateArgs),
    /// Build the full report and its CSV tables.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Text,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop every record kind with this probability, replacing the config's loss table.
    #[arg(long)]
    pub drop: Option<f64>,
    #[arg(long)]
    pub loss_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long = "trace-dir", required = true)]
    pub trace_dirs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// One directory per node, named after the node.
    #[arg(long = "trace-dir", required = true)]
    pub trace_dirs: Vec<PathBuf>,
    #[arg(long)]
    pub nextflow_log: Option<PathBuf>,
    #[arg(long)]
    pub airflow_log: Option<PathBuf>,
    #[arg(long)]
    pub pod_meta: Option<PathBuf>,
    #[arg(long)]
    pub k8s_events: Option<PathBuf>,
    /// Keep only files below this directory; repeatable.
    #[arg(long = "dir-prefix")]
    pub dir_prefixes: Vec<PathBuf>,
    /// Keep only files on this mount point; repeatable.
    #[arg(long = "fs-mount")]
    pub fs_mounts: Vec<PathBuf>,
    /// Keep only these pids, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub pids: Vec<u32>,
    /// Extend `--pids` to their fork descendants.
    #[arg(long)]
    pub pid_subtree: bool,
    /// Marker file names, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub markers: Vec<String>,
}

impl InputArgs {
    fn run_inputs(&self) -> RunInputs {
        RunInputs {
            node_dirs: self.trace_dirs.clone(),
            nextflow_log: self.nextflow_log.clone(),
            airflow_log: self.airflow_log.clone(),
            pod_meta: self.pod_meta.clone(),
            k8s_events: self.k8s_events.clone(),
            filters: FilterSettings {
                dir_prefixes: self.dir_prefixes.clone(),
                fs_mounts: self.fs_mounts.clone(),
                pids: self.pids.iter().copied().collect(),
                pid_subtree: self.pid_subtree,
            },
        }
    }

    fn marker_rule(&self) -> Result<MarkerRule, AssociationError> {
        if self.markers.is_empty() {
            Ok(MarkerRule::default())
        } else {
            MarkerRule::new(self.markers.iter().cloned())
        }
    }
}

#[derive(Debug, Args)]
pub struct AssociateArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Output directory for the report and tables; standard output if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    /// Per-node statistics only, without task association.
    #[arg(long)]
    pub raw: bool,
    /// Histogram bucket count for span fractions.
    #[arg(long, default_value_t = 20)]
    pub buckets: usize,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_INPUT
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn execute(cli: Cli) -> i32 {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Check(a) => cmd_check(&a),
        Command::Associate(a) => cmd_associate(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("wfio: {msg}");
    code
}

fn association_exit(e: &AssociationError) -> i32 {
    match e {
        AssociationError::GraphMismatch { .. } => EXIT_INTERNAL,
        _ => EXIT_INPUT,
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> i32 {
    let mut config = match SimConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_INPUT, format_args!("{}: {e}", args.config.display())),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let mut run = match generate_run(&config) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let model = match args.drop {
        Some(p) if !(0.0..=1.0).contains(&p) => return fail(EXIT_INPUT, "--drop must lie in [0, 1]"),
        Some(p) => Some(LossModel::uniform(p, 0)),
        None => config.loss,
    };
    if let Some(m) = model {
        run = inject_loss(&run, &m, args.loss_seed.unwrap_or(m.seed));
    }
    if let Err(e) = run.write_to(&args.out) {
        return fail(EXIT_INPUT, e);
    }
    let io: usize = run.nodes.iter().map(|n| n.io_events.len()).sum();
    let forks: usize = run.nodes.iter().map(|n| n.fork_events.len()).sum();
    println!(
        "nodes {}, tasks {}, io records {}, fork records {}, dropped {}",
        run.nodes.len(),
        run.tasks.len(),
        io,
        forks,
        run.drops().len()
    );
    EXIT_OK
}

pub fn cmd_check(args: &CheckArgs) -> i32 {
    let mut code = EXIT_OK;
    let mut findings = Vec::new();
    for dir in &args.trace_dirs {
        let trace = match load_node_dir(dir) {
            Ok(t) => t,
            Err(e) => {
                code = fail(EXIT_INPUT, e);
                continue;
            }
        };
        let violations = event_identity_check(&trace);
        if !violations.is_empty() {
            code = EXIT_INPUT;
        }
        findings.push((trace.node_id, trace.io_events.len(), violations));
    }
    let mut out = std::io::stdout().lock();
    match args.format {
        Format::Json => {
            let doc: Vec<_> = findings
                .iter()
                .map(|(node, n, v)| serde_json::json!({"node": node, "io_events": n, "violations": v}))
                .collect();
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&doc).unwrap());
        }
        Format::Text => {
            for (node, n, violations) in &findings {
                let _ = writeln!(out, "{node}: {n} io events, {} violations", violations.len());
                for v in violations {
                    let _ = writeln!(out, "  {}", describe(v));
                }
            }
        }
    }
    code
}

fn describe(v: &IdentityViolation) -> String {
    match v {
        IdentityViolation::DuplicateOpen { handle_uid, events } => {
            format!("handle {handle_uid} opened {} times (events {events:?})", events.len())
        }
        IdentityViolation::OrphanRef { event, handle_uid, op } => {
            format!("event {event}: {op} on handle {handle_uid} that was never opened")
        }
        IdentityViolation::InodePathConflict {
            event,
            inode_uid,
            first_path,
            second_path,
        } => format!("event {event}: inode {inode_uid} seen as {first_path} and {second_path}"),
    }
}

fn load(inputs: &RunInputs) -> Result<LoadedRun, i32> {
    load_run(inputs).map_err(|e| fail(EXIT_INPUT, e))
}

pub fn cmd_associate(args: &AssociateArgs) -> i32 {
    let inputs = args.inputs.run_inputs();
    let rule = match args.inputs.marker_rule() {
        Ok(r) => r,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let run = match load(&inputs) {
        Ok(r) => r,
        Err(code) => return code,
    };
    if run.tasks.is_empty() {
        return fail(EXIT_INPUT, "no tasks: pass --nextflow-log or --airflow-log");
    }
    let graphs = build_graphs(&run.traces);
    let attribution = associate_nextflow(&run.traces, &graphs, &run.tasks, &rule).and_then(|nf| {
        if run.pods.is_empty() {
            Ok(nf)
        } else {
            associate_kubernetes(&run.traces, &graphs, &run.tasks, &run.pods).map(|k| merge_attributions(&nf, &k))
        }
    });
    let attribution = match attribution {
        Ok(a) => a,
        Err(e) => return fail(association_exit(&e), e),
    };

    let methods = attribution.methods();
    let mut counts = std::collections::BTreeMap::<u64, usize>::new();
    for n in attribution.nodes.values() {
        for l in n.events.iter().flatten() {
            *counts.entry(l.task_id).or_default() += 1;
        }
    }
    let mut out = std::io::stdout().lock();
    match args.format {
        Format::Json => {
            let tasks: Vec<_> = run
                .tasks
                .iter()
                .map(|t| {
                    serde_json::json!({
                        "task_id": t.task_id,
                        "name": t.name,
                        "events": counts.get(&t.task_id).copied().unwrap_or(0),
                        "methods": methods.get(&t.task_id).cloned().unwrap_or_default(),
                    })
                })
                .collect();
            let doc = serde_json::json!({
                "tasks": tasks,
                "orphans": attribution.orphan_count(),
                "conflicts": attribution.conflicts,
                "unmatched_pods": attribution.unmatched_pods,
            });
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&doc).unwrap());
        }
        Format::Text => {
            for t in &run.tasks {
                let m: BTreeSet<String> = methods
                    .get(&t.task_id)
                    .into_iter()
                    .flatten()
                    .map(|m| format!("{m:?}"))
                    .collect();
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    t.task_id,
                    counts.get(&t.task_id).copied().unwrap_or(0),
                    m.into_iter().collect::<Vec<_>>().join("+"),
                    t.name
                );
            }
            let _ = writeln!(
                out,
                "orphans {}, conflicts {}, unmatched pods {}",
                attribution.orphan_count(),
                attribution.conflicts.len(),
                attribution.unmatched_pods.len()
            );
        }
    }
    EXIT_OK
}

pub fn cmd_report(args: &ReportArgs) -> i32 {
    let inputs = args.inputs.run_inputs();
    let markers = match args.inputs.marker_rule() {
        Ok(r) => r,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    if args.buckets == 0 {
        return fail(EXIT_INPUT, "--buckets must be at least 1");
    }
    let run = match load(&inputs) {
        Ok(r) => r,
        Err(code) => return code,
    };
    let options = ReportOptions {
        markers,
        buckets: args.buckets,
        raw: args.raw,
    };
    let doc = match build_report(&inputs, &run, &options) {
        Ok(d) => d,
        Err(e) => return fail(association_exit(&e), e),
    };
    let text = args.format == Format::Text;
    match &args.out {
        Some(dir) => {
            if let Err(e) = doc.write_dir(dir, text) {
                return fail(EXIT_INPUT, format_args!("{}: {e}", dir.display()));
            }
        }
        None => {
            let body = if text { doc.to_text() } else { doc.to_json() };
            let _ = std::io::stdout().lock().write_all(body.as_bytes());
        }
    }
    EXIT_OK
}

/// Inputs of a simulator run directory, as `cmd_report` would take them.
pub fn sim_run_inputs(dir: &Path) -> std::io::Result<RunInputs> {
    let mut node_dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(wfio::ingest::IO_TRACE_FILE).exists())
        .collect();
    node_dirs.sort();
    Ok(RunInputs {
        node_dirs,
        nextflow_log: Some(dir.join(wfio::sim::NEXTFLOW_LOG_FILE)),
        pod_meta: Some(dir.join(wfio::sim::POD_META_FILE)),
        k8s_events: Some(dir.join(wfio::sim::K8S_EVENTS_FILE)),
        ..Default::default()
    })
}
