//! Stage graphs, the scheduler, and execution traces.
//!
//! A pipeline is a linear chain of per-item stages (video encode, then
//! caption decode) followed by at most one aggregate stage that consumes every
//! per-item result (indexing or script generation). [`execute`] runs the
//! graph over a batch of [`WorkItem`]s in either [`ExecutionMode`], on a real
//! monotonic clock or a virtual one, and returns a timestamped
//! [`ExecutionTrace`] that [`verify_trace`] can check mechanically.

mod scheduler;
mod trace_io;
mod verify;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::registry::{ModuleRegistry, RegistryError};
use crate::{ExecutionMode, Task};

pub use scheduler::execute;
pub use trace_io::{read_trace, read_trace_events, write_trace, write_trace_events, TraceIoError};
pub use verify::{verify_trace, TraceViolation};

pub const ENCODER_MODULE: &str = "video-encoder";
pub const DECODER_MODULE: &str = "text-decoder";
pub const EMBEDDER_MODULE: &str = "sentence-embedder";
/// Standalone text model the no-reuse assembly baseline loads for scripting.
pub const SCRIPT_MODULE: &str = "script-generator";

pub const ENCODE_STAGE: &str = "encode";
pub const CAPTION_STAGE: &str = "caption";
pub const INDEX_STAGE: &str = "index";
pub const SCRIPT_STAGE: &str = "script";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    PerItem,
    Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub module_id: String,
    pub kind: StageKind,
    /// Position in the per-item chain; ignored for the aggregate stage.
    pub order: u32,
}

impl StageSpec {
    pub fn per_item(name: impl Into<String>, module_id: impl Into<String>, order: u32) -> Self {
        Self {
            name: name.into(),
            module_id: module_id.into(),
            kind: StageKind::PerItem,
            order,
        }
    }

    pub fn aggregate(name: impl Into<String>, module_id: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            module_id: module_id.into(),
            kind: StageKind::Aggregate,
            order: u32::MAX,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub task: Task,
    pub stages: Vec<StageSpec>,
}

impl PipelineSpec {
    /// The standard two-stage captioning chain plus the task's aggregate.
    ///
    /// Retrieval indexes captions with the sentence embedder. Assembly
    /// composes the script with the text decoder used for captioning when
    /// modules are reused, and with a separately loaded standalone text model
    /// in the no-reuse baseline.
    pub fn standard(task: Task, mode: ExecutionMode) -> Self {
        let aggregate = match (task, mode) {
            (Task::Retrieval, _) => StageSpec::aggregate(INDEX_STAGE, EMBEDDER_MODULE),
            (Task::Assembly, ExecutionMode::ReuseParallel) => {
                StageSpec::aggregate(SCRIPT_STAGE, DECODER_MODULE)
            }
            (Task::Assembly, ExecutionMode::SequentialNoReuse) => {
                StageSpec::aggregate(SCRIPT_STAGE, SCRIPT_MODULE)
            }
        };
        Self {
            task,
            stages: vec![
                StageSpec::per_item(ENCODE_STAGE, ENCODER_MODULE, 0),
                StageSpec::per_item(CAPTION_STAGE, DECODER_MODULE, 1),
                aggregate,
            ],
        }
    }

    /// Per-item stages sorted by chain position.
    pub fn chain(&self) -> Vec<&StageSpec> {
        let mut chain: Vec<&StageSpec> = self
            .stages
            .iter()
            .filter(|s| s.kind == StageKind::PerItem)
            .collect();
        chain.sort_by_key(|s| s.order);
        chain
    }

    pub fn aggregate(&self) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.kind == StageKind::Aggregate)
    }

    pub fn stage(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Distinct modules in first-use order (chain first, then aggregate).
    pub fn modules(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for stage in self.chain().into_iter().chain(self.aggregate()) {
            if seen.insert(stage.module_id.as_str()) {
                out.push(stage.module_id.as_str());
            }
        }
        out
    }

    /// Number of load points a sequential run goes through: one for the
    /// per-item chain, one more when an aggregate stage exists.
    pub fn load_points(&self) -> usize {
        let chain = usize::from(!self.chain().is_empty());
        chain + usize::from(self.aggregate().is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SpecViolation {
    UnknownModule { stage: String, module_id: String },
    DuplicateStage(String),
    MultipleAggregates(usize),
    NonLinearChain(String),
    EmptyChain,
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecViolation::UnknownModule { stage, module_id } => {
                write!(
                    f,
                    "stage `{stage}` references unregistered module `{module_id}`"
                )
            }
            SpecViolation::DuplicateStage(name) => write!(f, "duplicate stage name `{name}`"),
            SpecViolation::MultipleAggregates(n) => {
                write!(f, "{n} aggregate stages (at most one allowed)")
            }
            SpecViolation::NonLinearChain(why) => {
                write!(f, "per-item stages do not form a linear chain: {why}")
            }
            SpecViolation::EmptyChain => f.write_str("pipeline has no per-item stage"),
        }
    }
}

/// Structural checks; an empty result means the spec can be executed.
pub fn validate_spec(spec: &PipelineSpec, registry: &ModuleRegistry) -> Vec<SpecViolation> {
    let mut violations = Vec::new();

    let mut names = BTreeSet::new();
    for stage in &spec.stages {
        if !names.insert(stage.name.as_str()) {
            violations.push(SpecViolation::DuplicateStage(stage.name.clone()));
        }
    }

    let mut unknown = BTreeSet::new();
    for stage in &spec.stages {
        if !registry.contains(&stage.module_id) && unknown.insert(stage.module_id.as_str()) {
            violations.push(SpecViolation::UnknownModule {
                stage: stage.name.clone(),
                module_id: stage.module_id.clone(),
            });
        }
    }

    let aggregates = spec
        .stages
        .iter()
        .filter(|s| s.kind == StageKind::Aggregate)
        .count();
    if aggregates > 1 {
        violations.push(SpecViolation::MultipleAggregates(aggregates));
    }

    let chain = spec.chain();
    if chain.is_empty() {
        violations.push(SpecViolation::EmptyChain);
    } else {
        for (expected, stage) in chain.iter().enumerate() {
            if stage.order as usize != expected {
                violations.push(SpecViolation::NonLinearChain(format!(
                    "stage `{}` has order {} but position {} was expected",
                    stage.name, stage.order, expected
                )));
                break;
            }
        }
    }

    violations
}

/// One unit of per-item work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub item_id: String,
    pub payload: Value,
}

impl WorkItem {
    pub fn new(item_id: impl Into<String>, payload: Value) -> Self {
        Self {
            item_id: item_id.into(),
            payload,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Load,
    Exec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub kind: EventKind,
    /// Stage name, or `"load"` for load events.
    pub stage: String,
    pub module_id: String,
    pub item_id: Option<String>,
    pub t_start_s: f64,
    pub t_end_s: f64,
}

impl TraceEvent {
    pub fn load(module_id: impl Into<String>, t_start_s: f64, t_end_s: f64) -> Self {
        Self {
            kind: EventKind::Load,
            stage: "load".into(),
            module_id: module_id.into(),
            item_id: None,
            t_start_s,
            t_end_s,
        }
    }

    pub fn exec(
        stage: impl Into<String>,
        module_id: impl Into<String>,
        item_id: Option<String>,
        t_start_s: f64,
        t_end_s: f64,
    ) -> Self {
        Self {
            kind: EventKind::Exec,
            stage: stage.into(),
            module_id: module_id.into(),
            item_id,
            t_start_s,
            t_end_s,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.t_end_s - self.t_start_s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub mode: ExecutionMode,
    pub events: Vec<TraceEvent>,
    pub makespan_s: f64,
    /// Set when an executor failed and the run was aborted.
    #[serde(default)]
    pub failed: bool,
}

impl ExecutionTrace {
    pub fn new(mode: ExecutionMode, events: Vec<TraceEvent>) -> Self {
        let makespan_s = makespan(&events).unwrap_or(0.0);
        Self {
            mode,
            events,
            makespan_s,
            failed: false,
        }
    }

    pub fn load_events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.kind == EventKind::Load)
    }

    pub fn exec_events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.kind == EventKind::Exec)
    }

    pub fn total_load_s(&self) -> f64 {
        self.load_events().map(TraceEvent::duration_s).sum()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("trace has no events")]
pub struct EmptyTrace;

/// Span from the earliest event start to the latest event end.
pub fn makespan(events: &[TraceEvent]) -> Result<f64, EmptyTrace> {
    let start = events
        .iter()
        .map(|e| e.t_start_s)
        .min_by(f64::total_cmp)
        .ok_or(EmptyTrace)?;
    let end = events
        .iter()
        .map(|e| e.t_end_s)
        .max_by(f64::total_cmp)
        .ok_or(EmptyTrace)?;
    Ok(end - start)
}

/// Which clock a run is measured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Clock {
    /// Wall-clock time from a monotonic source; executors do real work.
    Monotonic,
    /// Discrete-event virtual time; each call is charged its
    /// [`StageExecutor::virtual_cost`] and no real time passes.
    Virtual,
}

/// Arguments of a single stage invocation.
#[derive(Clone, Debug)]
pub struct StageCall<'a> {
    pub stage: &'a str,
    /// `None` for the aggregate stage.
    pub item_id: Option<&'a str>,
    /// The item payload (first stage), the previous stage's output, or for
    /// the aggregate an array of `{"item_id", "output"}` objects in input
    /// order.
    pub input: Value,
    pub clock: Clock,
}

/// A callable stage body. Implementations must not share mutable state
/// except through their returned payloads.
pub trait StageExecutor: Send + Sync {
    fn run(&self, call: StageCall<'_>) -> Result<Value, String>;

    /// Duration charged for one call on a virtual clock.
    fn virtual_cost(&self, _call: &StageCall<'_>) -> Duration {
        Duration::ZERO
    }
}

pub type Executors = BTreeMap<String, Arc<dyn StageExecutor>>;

/// Passes its input through after a fixed duration: sleeps on a monotonic
/// clock, charges the duration on a virtual one.
#[derive(Clone, Debug)]
pub struct SleepExecutor {
    pub duration: Duration,
}

impl SleepExecutor {
    pub fn new(duration: Duration) -> Self {
        Self { duration }
    }
}

impl StageExecutor for SleepExecutor {
    fn run(&self, call: StageCall<'_>) -> Result<Value, String> {
        if call.clock == Clock::Monotonic && !self.duration.is_zero() {
            std::thread::sleep(self.duration);
        }
        Ok(call.input)
    }

    fn virtual_cost(&self, _call: &StageCall<'_>) -> Duration {
        self.duration
    }
}

/// Wraps a closure as an executor with a fixed virtual cost.
pub struct FnExecutor<F> {
    f: F,
    cost: Duration,
}

impl<F> FnExecutor<F>
where
    F: Fn(StageCall<'_>) -> Result<Value, String> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self {
            f,
            cost: Duration::ZERO,
        }
    }

    pub fn with_cost(f: F, cost: Duration) -> Self {
        Self { f, cost }
    }
}

impl<F> StageExecutor for FnExecutor<F>
where
    F: Fn(StageCall<'_>) -> Result<Value, String> + Send + Sync,
{
    fn run(&self, call: StageCall<'_>) -> Result<Value, String> {
        (self.f)(call)
    }

    fn virtual_cost(&self, _call: &StageCall<'_>) -> Duration {
        self.cost
    }
}

/// Everything a completed run produces.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub trace: ExecutionTrace,
    /// Output of the last per-item stage, in input order.
    pub item_outputs: Vec<(String, Value)>,
    pub aggregate_output: Option<Value>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline spec: {}", join(.0))]
    InvalidSpec(Vec<SpecViolation>),
    #[error("no executor bound for stage `{0}`")]
    MissingExecutor(String),
    #[error("a run needs at least one work item")]
    NoItems,
    #[error("duplicate work item id `{0}`")]
    DuplicateItem(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("executor for stage `{stage}` failed on item {}: {message}", .item.as_deref().unwrap_or("<aggregate>"))]
    ExecutorFailure {
        stage: String,
        item: Option<String>,
        message: String,
        partial: Box<ExecutionTrace>,
    },
}

fn join(v: &[SpecViolation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
