//! Correlates per-node low-level I/O traces with the tasks of a scientific
//! workflow run.
//!
//! The pipeline is: [`ingest`] the per-node traces and workflow manager logs,
//! rebuild each node's [`process`] tree, [`association`] links processes to
//! tasks, and [`analysis`] derives per-task file access metrics. [`report`]
//! assembles everything into one document. [`sim`] generates synthetic runs
//! with known ground truth.

pub mod analysis;
pub mod association;
pub mod fixtures;
pub mod ingest;
pub mod model;
pub mod process;
pub mod report;
pub mod sim;

pub use model::{ForkEvent, IoEvent, NodeTrace, OpKind, PodMeta, Seconds, SwmsSource, TaskRecord};
