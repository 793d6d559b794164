//! Reuse-centric multi-stage inference pipelines.
//!
//! The crate models a video-language pipeline as independently callable
//! modules (video encoder, text decoder, embedder) that can either be loaded
//! per stage group and run strictly in sequence, or kept resident for the
//! whole run and overlapped across work items. It provides:
//!
//! * [`registry`]: module lifecycle and load accounting,
//! * [`pipeline`]: the stage graph, the scheduler and trace verification,
//! * [`simulator`]: virtual-time evaluation from device profiles,
//! * [`costmodel`]: memory, storage, layer and energy ledgers,
//! * [`tasks`]: segmentation, embedding, ranking, scripts and manifests,
//! * [`reports`]: human-readable and flat renderings of the above.

pub mod costmodel;
pub mod pipeline;
pub mod registry;
pub mod reports;
pub mod simulator;
pub mod tasks;
pub mod time;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Residency and scheduling policy of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Load the modules of each stage group, run every stage strictly one
    /// after another, unload before the next group.
    SequentialNoReuse,
    /// Load every module once, keep it resident, overlap distinct modules.
    ReuseParallel,
}

impl ExecutionMode {
    pub const ALL: [ExecutionMode; 2] = [
        ExecutionMode::SequentialNoReuse,
        ExecutionMode::ReuseParallel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionMode::SequentialNoReuse => "sequential",
            ExecutionMode::ReuseParallel => "reuse",
        }
    }
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecutionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" | "sequential_no_reuse" | "baseline" => {
                Ok(ExecutionMode::SequentialNoReuse)
            }
            "reuse" | "reuse_parallel" | "parallel" => Ok(ExecutionMode::ReuseParallel),
            other => Err(format!(
                "unknown mode `{other}` (expected `sequential` or `reuse`)"
            )),
        }
    }
}

/// The two end-to-end task pipelines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Caption every clip, then index the captions with a sentence embedder.
    Retrieval,
    /// Caption every clip, then rank and compose a script over the top-k.
    Assembly,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Retrieval, Task::Assembly];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Retrieval => "retrieval",
            Task::Assembly => "assembly",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrieval" => Ok(Task::Retrieval),
            "assembly" => Ok(Task::Assembly),
            other => Err(format!(
                "unknown task `{other}` (expected `retrieval` or `assembly`)"
            )),
        }
    }
}
