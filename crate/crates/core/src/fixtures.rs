//! Literal samples of each input format, taken from a real rnaseq run.
//!
//! Used by tests here and in downstream crates.

use crate::model::{IoEvent, OpKind, Seconds};

pub const IO_OPEN_LINE: &str = "1714067937.744, 1714067937.744, 1169224, 27151.124, 27151.124, 27151.124, 27151.124, 5277, O, 0, 35625, 0, 0, 0x00008000, /home/witzke/nf-rnaseq/outdir/work/52/f11191010952840e07774a95bcd36e/WT_REP2_1_val_1.fq.gz";
pub const IO_READ_LINE: &str = "1714067937.745, 1714067937.745, 1169224, 27151.124, 27151.124, 27151.124, 27151.124, 5277, R, 512, 35625, 1034, 512, 0x00008000,";

pub const IO_TRACE: &str = "\
# eBPF and FUSE-Overlay-FS IO tracing log with: time_start, time_end, pid, utime_start,utime_end,stime_start,stime_end,inode,type,result,handle,offset,size,flags,path
# example open log entry:
1714067937.744, 1714067937.744, 1169224, 27151.124, 27151.124, 27151.124, 27151.124, 5277, O, 0, 35625, 0, 0, 0x00008000, /home/witzke/nf-rnaseq/outdir/work/52/f11191010952840e07774a95bcd36e/WT_REP2_1_val_1.fq.gz
# example read log entry:
1714067937.745, 1714067937.745, 1169224, 27151.124, 27151.124, 27151.124, 27151.124, 5277, R, 512, 35625, 1034, 512, 0x00008000,
";

pub const FORK_TRACE: &str = "\
# eBPF PID tracing log with:
# time, parent pid, pid, cgroupid
1714067937.409, 1168419, 1169224, 131863
";

pub const NEXTFLOW_LOG: &str = "\
Apr-25 19:59:04.446 [Task monitor] DEBUG n.processor.TaskPollingMonitor - Task completed > TaskHandler[id: 6; name: NFCORE_RNASEQ:RNASEQ:FASTQ_FASTQC_UMITOOLS_TRIMGALORE:TRIMGALORE (WT_REP2); status: COMPLETED; exit: 0; error: -; workDir: /home/witzke/nf-rnaseq/outdir/work/52/f11191010952840e07774a95bcd36e]
";

pub const WORK_DIR: &str = "/home/witzke/nf-rnaseq/outdir/work/52/f11191010952840e07774a95bcd36e";

pub const K8S_EVENTS: &str = "\
LAST SEEN   TYPE     REASON  OBJECT
27m         Normal   Started pod/nf-002fdc87df831ed4f74f0f2a66482475
27m         Normal   Pulled  pod/nf-002fdc87df831ed4f74f0f2a66482475
";

pub const POD_META: &str = "n1\tnf-002fdc87df831ed4f74f0f2a66482475\t131863\ttaskName=NFCORE_RNASEQ_RNASEQ_FASTQ_FASTQC_UMITOOLS_TRIMGALORE_TRIMGALORE_WT_REP2\n";

pub const AIRFLOW_LOG: &str = "\
[2023-12-12T16:18:11.810+0000] {scheduler_job.py:550} INFO - Sending TaskInstanceKey(dag_id='force', task_id='prepare_level2', run_id='manual__2023-12-12T16:15:47.103493+00:00', try_number=1, map_index=-1) to executor with priority 3116 and queue default
[2023-12-12T16:18:11.810+0000] {base_executor.py:95} INFO - Adding to queue: ['airflow', 'tasks', 'run', 'force', 'prepare_level2', 'manual__2023-12-12T16:15:47.103493+00:00', '--local', '--subdir', 'DAGS_FOLDER/s1/force/workflow.py']
";

/// An open of the task wrapper script in [`WORK_DIR`] by the traced process.
pub fn marker_open_line() -> String {
    format!(
        "1714067937.500, 1714067937.500, 1169224, 27151.100, 27151.100, 27151.100, 27151.100, 5200, O, 0, 35600, 0, 0, 0x00008000, {WORK_DIR}/.command.sh"
    )
}

/// A zeroed event; override fields with struct update syntax.
pub fn blank_event() -> IoEvent {
    IoEvent {
        time_start: Seconds::from_millis(1_000),
        time_end: Seconds::from_millis(1_000),
        pid: 1,
        utime_start: Seconds::ZERO,
        utime_end: Seconds::ZERO,
        stime_start: Seconds::ZERO,
        stime_end: Seconds::ZERO,
        inode_uid: 1,
        kind: OpKind::Read,
        result: 0,
        handle_uid: 1,
        offset: 0,
        size: 0,
        flags: 0,
        path: String::new(),
    }
}
