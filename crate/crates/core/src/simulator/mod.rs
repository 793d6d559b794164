//! Deterministic virtual-time evaluation of both execution modes.
//!
//! [`simulate`] binds a [`DeviceProfile`]'s component latencies to the
//! standard task pipeline and runs the real scheduler on a virtual clock.
//! [`analytic_makespan`] gives the same numbers in closed form; both work in
//! integer nanoseconds so they agree exactly.

mod profile;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use profile::{DeviceProfile, LoadTimes, ModePair, ProfileError, ReportedEndToEnd, StageTimes};

use crate::pipeline::{
    execute, verify_trace, Clock, ExecutionTrace, Executors, PipelineError, PipelineSpec,
    SleepExecutor, StageExecutor, TraceViolation, WorkItem, DECODER_MODULE, EMBEDDER_MODULE,
    ENCODER_MODULE, SCRIPT_MODULE,
};
use crate::registry::{ModuleDescriptor, ModuleRegistry, ModuleRole};
use crate::time::{secs, to_secs};
use crate::{ExecutionMode, Task};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("profile `{device}` has no reported figures for {metric}")]
    MissingReportedData { device: String, metric: Metric },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateScaling {
    /// The aggregate figure covers the whole batch.
    #[default]
    Batch,
    /// The aggregate figure is per item and scales with the batch size.
    PerItem,
}

impl FromStr for AggregateScaling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(AggregateScaling::Batch),
            "per-item" | "per_item" => Ok(AggregateScaling::PerItem),
            other => Err(format!(
                "unknown aggregate scaling `{other}` (expected `batch` or `per-item`)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_items: usize,
    /// Added to every per-item stage call.
    pub per_item_overhead_s: f64,
    pub aggregate_scaling: AggregateScaling,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_items: 5,
            per_item_overhead_s: 0.0,
            aggregate_scaling: AggregateScaling::Batch,
        }
    }
}

impl SimConfig {
    pub fn with_items(n_items: usize) -> Self {
        Self {
            n_items,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n_items == 0 {
            return Err(SimError::Config("n_items must be >= 1".into()));
        }
        if !self.per_item_overhead_s.is_finite() || self.per_item_overhead_s < 0.0 {
            return Err(SimError::Config(format!(
                "per_item_overhead_s must be >= 0 (got {})",
                self.per_item_overhead_s
            )));
        }
        Ok(())
    }
}

/// Constant stage durations of one run in one mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageTimings {
    /// Total model loading charged in this mode.
    pub load_total: Duration,
    pub encode: Duration,
    pub decode: Duration,
    pub aggregate: Duration,
}

impl StageTimings {
    pub fn from_secs(load_total: f64, encode: f64, decode: f64, aggregate: f64) -> Self {
        Self {
            load_total: secs(load_total),
            encode: secs(encode),
            decode: secs(decode),
            aggregate: secs(aggregate),
        }
    }

    /// Durations for `task` on `profile` under `mode`.
    ///
    /// The baseline charges `baseline_total / baseline_split` at each of the
    /// pipeline's load points; reuse charges `reuse_total` once.
    pub fn for_profile(
        profile: &DeviceProfile,
        task: Task,
        config: &SimConfig,
        mode: ExecutionMode,
    ) -> Self {
        let overhead = secs(config.per_item_overhead_s);
        let load_total = match mode {
            ExecutionMode::SequentialNoReuse => {
                let per_point =
                    secs(profile.load_s.baseline_total / f64::from(profile.load_s.baseline_split));
                let points = PipelineSpec::standard(task, mode).load_points() as u32;
                per_point * points
            }
            ExecutionMode::ReuseParallel => secs(profile.load_s.reuse_total),
        };
        let aggregate = secs(profile.stage_s.aggregate(task));
        let aggregate = match config.aggregate_scaling {
            AggregateScaling::Batch => aggregate,
            AggregateScaling::PerItem => aggregate * config.n_items as u32,
        };
        Self {
            load_total,
            encode: secs(profile.stage_s.video_encode) + overhead,
            decode: secs(profile.stage_s.caption_decode) + overhead,
            aggregate,
        }
    }
}

/// Splits `total` into `parts` nanosecond shares that sum back exactly.
fn split_exact(total: Duration, parts: usize) -> Vec<Duration> {
    let parts = parts.max(1);
    let ns = total.as_nanos();
    let base = ns / parts as u128;
    let rem = ns % parts as u128;
    (0..parts)
        .map(|i| Duration::from_nanos((base + if i == 0 { rem } else { 0 }) as u64))
        .collect()
}

fn role_of(module: &str) -> ModuleRole {
    match module {
        ENCODER_MODULE => ModuleRole::VideoEncoder,
        DECODER_MODULE => ModuleRole::TextDecoder,
        EMBEDDER_MODULE => ModuleRole::Embedder,
        SCRIPT_MODULE => ModuleRole::Aggregate,
        _ => ModuleRole::Aggregate,
    }
}

/// A fresh registry for `spec` whose load latencies add up to `load_total`.
///
/// Reuse splits the total over every module. The baseline splits it evenly
/// over its load points, then over the modules loaded at each point.
pub fn registry_for(
    spec: &PipelineSpec,
    mode: ExecutionMode,
    load_total: Duration,
) -> ModuleRegistry {
    let registry = ModuleRegistry::new();
    let mut latencies: Vec<(String, Duration)> = Vec::new();
    match mode {
        ExecutionMode::ReuseParallel => {
            let modules = spec.modules();
            for (m, share) in modules.iter().zip(split_exact(load_total, modules.len())) {
                latencies.push((m.to_string(), share));
            }
        }
        ExecutionMode::SequentialNoReuse => {
            let points = split_exact(load_total, spec.load_points());
            let mut chain_modules: Vec<&str> = Vec::new();
            for s in spec.chain() {
                if !chain_modules.contains(&s.module_id.as_str()) {
                    chain_modules.push(&s.module_id);
                }
            }
            for (m, share) in chain_modules
                .iter()
                .zip(split_exact(points[0], chain_modules.len()))
            {
                latencies.push((m.to_string(), share));
            }
            if let (Some(agg), Some(share)) = (spec.aggregate(), points.get(1)) {
                match latencies.iter_mut().find(|(m, _)| *m == agg.module_id) {
                    // A module reloaded at the second point keeps one latency;
                    // the standard specs never do this.
                    Some(entry) => entry.1 += *share,
                    None => latencies.push((agg.module_id.clone(), *share)),
                }
            }
        }
    }
    for (module, latency) in latencies {
        registry
            .register(
                ModuleDescriptor::new(module.clone(), role_of(&module))
                    .with_load_latency(to_secs(latency)),
            )
            .expect("modules of a spec are distinct");
    }
    registry
}

fn sleep_exec(d: Duration) -> Arc<dyn StageExecutor> {
    Arc::new(SleepExecutor::new(d))
}

fn run_standard(
    timings: &StageTimings,
    task: Task,
    n_items: usize,
    mode: ExecutionMode,
    clock: Clock,
) -> Result<ExecutionTrace, SimError> {
    if n_items == 0 {
        return Err(SimError::Config("n_items must be >= 1".into()));
    }
    let spec = PipelineSpec::standard(task, mode);
    let registry = registry_for(&spec, mode, timings.load_total);
    let chain = spec.chain();
    let mut executors = Executors::new();
    executors.insert(chain[0].name.clone(), sleep_exec(timings.encode));
    executors.insert(chain[1].name.clone(), sleep_exec(timings.decode));
    if let Some(agg) = spec.aggregate() {
        executors.insert(agg.name.clone(), sleep_exec(timings.aggregate));
    }
    let items: Vec<WorkItem> = (0..n_items)
        .map(|i| WorkItem::new(format!("clip-{i:03}"), serde_json::Value::Null))
        .collect();
    let run = execute(&spec, &items, mode, &executors, &registry, clock)?;
    Ok(run.trace)
}

/// Runs the standard `task` pipeline on a virtual clock with constant
/// stage durations.
pub fn simulate_timings(
    timings: &StageTimings,
    task: Task,
    n_items: usize,
    mode: ExecutionMode,
) -> Result<ExecutionTrace, SimError> {
    run_standard(timings, task, n_items, mode, Clock::Virtual)
}

/// Outcome of one live run on the monotonic clock.
#[derive(Clone, Debug)]
pub struct BenchRun {
    pub mode: ExecutionMode,
    pub trace: ExecutionTrace,
    pub ideal_s: f64,
    pub violations: Vec<TraceViolation>,
}

impl BenchRun {
    pub fn makespan_s(&self) -> f64 {
        self.trace.makespan_s
    }
}

/// Runs the real scheduler with sleeping executors and checks the trace.
pub fn bench(
    timings: &StageTimings,
    task: Task,
    n_items: usize,
    mode: ExecutionMode,
) -> Result<BenchRun, SimError> {
    let trace = run_standard(timings, task, n_items, mode, Clock::Monotonic)?;
    let violations = verify_trace(&trace, &PipelineSpec::standard(task, mode), mode);
    Ok(BenchRun {
        mode,
        ideal_s: to_secs(analytic_makespan_exact(timings, n_items, mode)),
        trace,
        violations,
    })
}

/// Virtual-clock trace of `task` on `profile`. Identical inputs give
/// identical traces.
pub fn simulate(
    profile: &DeviceProfile,
    task: Task,
    config: &SimConfig,
    mode: ExecutionMode,
) -> Result<ExecutionTrace, SimError> {
    profile.validate()?;
    config.validate()?;
    let timings = StageTimings::for_profile(profile, task, config, mode);
    simulate_timings(&timings, task, config.n_items, mode)
}

/// Closed-form makespan in exact nanoseconds.
pub fn analytic_makespan_exact(t: &StageTimings, n_items: usize, mode: ExecutionMode) -> Duration {
    let n = n_items.max(1) as u32;
    match mode {
        ExecutionMode::SequentialNoReuse => t.load_total + (t.encode + t.decode) * n + t.aggregate,
        ExecutionMode::ReuseParallel => {
            t.load_total + t.encode + t.encode.max(t.decode) * (n - 1) + t.decode + t.aggregate
        }
    }
}

/// Closed-form makespan in seconds.
///
/// Sequential: `L + N(e + d) + A`. Reuse-parallel: `L + e + (N - 1)max(e, d) + d + A`.
/// `load` is the total loading charged in the given mode.
pub fn analytic_makespan(
    load: f64,
    encode: f64,
    decode: f64,
    n_items: usize,
    aggregate: f64,
    mode: ExecutionMode,
) -> f64 {
    to_secs(analytic_makespan_exact(
        &StageTimings::from_secs(load, encode, decode, aggregate),
        n_items,
        mode,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ModelLoading,
    Retrieval,
    Assembly,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::ModelLoading, Metric::Retrieval, Metric::Assembly];
}

impl From<Task> for Metric {
    fn from(task: Task) -> Self {
        match task {
            Task::Retrieval => Metric::Retrieval,
            Task::Assembly => Metric::Assembly,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::ModelLoading => "model_loading",
            Metric::Retrieval => "retrieval",
            Metric::Assembly => "assembly",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportSource {
    Simulated,
    Reported,
}

impl fmt::Display for ReportSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportSource::Simulated => "simulated",
            ReportSource::Reported => "reported",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub device: String,
    pub metric: Metric,
    pub baseline_s: f64,
    pub reuse_s: f64,
    pub reduction_pct: f64,
    pub source: ReportSource,
}

impl ComparisonReport {
    fn new(
        device: &str,
        metric: Metric,
        baseline_s: f64,
        reuse_s: f64,
        source: ReportSource,
    ) -> Self {
        Self {
            device: device.to_string(),
            metric,
            baseline_s,
            reuse_s,
            reduction_pct: reduction_pct(baseline_s, reuse_s),
            source,
        }
    }
}

/// `100 (baseline - reuse) / baseline`, or 0 for a zero baseline.
pub fn reduction_pct(baseline: f64, reuse: f64) -> f64 {
    if baseline > 0.0 {
        100.0 * (baseline - reuse) / baseline
    } else {
        0.0
    }
}

/// Reduction computed from the profile's published figures.
pub fn reported_reduction(
    profile: &DeviceProfile,
    metric: Metric,
) -> Result<ComparisonReport, SimError> {
    let (baseline, reuse) =
        match metric {
            Metric::ModelLoading => (profile.load_s.baseline_total, profile.load_s.reuse_total),
            Metric::Retrieval | Metric::Assembly => {
                let task = if metric == Metric::Retrieval {
                    Task::Retrieval
                } else {
                    Task::Assembly
                };
                let pair = profile.reported_e2e_s.get(task).ok_or_else(|| {
                    SimError::MissingReportedData {
                        device: profile.name.clone(),
                        metric,
                    }
                })?;
                (pair.baseline, pair.reuse)
            }
        };
    Ok(ComparisonReport::new(
        &profile.name,
        metric,
        baseline,
        reuse,
        ReportSource::Reported,
    ))
}

/// Simulates both modes and reports the simulated reduction.
pub fn compare_modes(
    profile: &DeviceProfile,
    task: Task,
    config: &SimConfig,
) -> Result<ComparisonReport, SimError> {
    let baseline = simulate(profile, task, config, ExecutionMode::SequentialNoReuse)?;
    let reuse = simulate(profile, task, config, ExecutionMode::ReuseParallel)?;
    Ok(ComparisonReport::new(
        &profile.name,
        task.into(),
        baseline.makespan_s,
        reuse.makespan_s,
        ReportSource::Simulated,
    ))
}

/// Per-item overhead that makes the simulated reuse makespan match the
/// published figure, and what is left over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub device: String,
    pub task: Task,
    pub ideal_reuse_s: f64,
    pub reported_reuse_s: f64,
    pub per_item_overhead_s: f64,
    pub calibrated_reuse_s: f64,
    /// `calibrated - reported`; non-zero when the published figure is below
    /// the ideal pipeline and no non-negative overhead can reach it.
    pub residual_s: f64,
    pub calibrated_baseline_s: f64,
}

/// Fits `per_item_overhead_s` so that the reuse makespan equals the
/// published reuse figure.
///
/// With the overhead added to both per-item stages the reuse makespan grows
/// by `(N + 1)` times the overhead, so the fit is solved directly and then
/// confirmed by simulation.
pub fn calibrate_overhead(
    profile: &DeviceProfile,
    task: Task,
    config: &SimConfig,
) -> Result<Calibration, SimError> {
    let reported =
        profile
            .reported_e2e_s
            .get(task)
            .ok_or_else(|| SimError::MissingReportedData {
                device: profile.name.clone(),
                metric: task.into(),
            })?;
    let ideal_cfg = SimConfig {
        per_item_overhead_s: 0.0,
        ..config.clone()
    };
    let ideal = simulate(profile, task, &ideal_cfg, ExecutionMode::ReuseParallel)?.makespan_s;
    let overhead = ((reported.reuse - ideal) / (config.n_items as f64 + 1.0)).max(0.0);
    let fitted = SimConfig {
        per_item_overhead_s: overhead,
        ..config.clone()
    };
    let calibrated = simulate(profile, task, &fitted, ExecutionMode::ReuseParallel)?.makespan_s;
    let calibrated_baseline =
        simulate(profile, task, &fitted, ExecutionMode::SequentialNoReuse)?.makespan_s;
    Ok(Calibration {
        device: profile.name.clone(),
        task,
        ideal_reuse_s: ideal,
        reported_reuse_s: reported.reuse,
        per_item_overhead_s: overhead,
        calibrated_reuse_s: calibrated,
        residual_s: calibrated - reported.reuse,
        calibrated_baseline_s: calibrated_baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ExecutionMode::{ReuseParallel, SequentialNoReuse};

    fn pixel5a() -> DeviceProfile {
        DeviceProfile::builtin("pixel5a").unwrap()
    }

    #[test]
    fn split_is_exact() {
        let parts = split_exact(secs(17.23), 3);
        assert_eq!(parts.iter().sum::<Duration>(), secs(17.23));
        assert_eq!(split_exact(Duration::ZERO, 2), vec![Duration::ZERO; 2]);
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(analytic_makespan(0.0, 1.0, 2.0, 4, 0.0, ReuseParallel), 9.0);
        assert_eq!(
            analytic_makespan(0.0, 1.0, 2.0, 4, 0.0, SequentialNoReuse),
            12.0
        );
        assert_eq!(analytic_makespan(2.0, 1.0, 1.0, 3, 0.0, ReuseParallel), 6.0);
    }

    #[test]
    fn small_run_matches_hand_enumeration() {
        // L=2, e=d=1, N=3: loads [0,2]; encodes [2,3],[3,4],[4,5]; captions [3,4],[4,5],[5,6].
        let t = StageTimings::from_secs(2.0, 1.0, 1.0, 0.0);
        let trace = simulate_timings(&t, Task::Retrieval, 3, ReuseParallel).unwrap();
        assert_eq!(trace.makespan_s, 6.0);
        let encodes: Vec<(f64, f64)> = trace
            .exec_events()
            .filter(|e| e.stage == "encode")
            .map(|e| (e.t_start_s, e.t_end_s))
            .collect();
        assert_eq!(encodes, vec![(2.0, 3.0), (3.0, 4.0), (4.0, 5.0)]);
        let captions: Vec<(f64, f64)> = trace
            .exec_events()
            .filter(|e| e.stage == "caption")
            .map(|e| (e.t_start_s, e.t_end_s))
            .collect();
        assert_eq!(captions, vec![(3.0, 4.0), (4.0, 5.0), (5.0, 6.0)]);
    }

    #[test]
    fn pixel5a_baseline_reconstruction() {
        let cfg = SimConfig::default();
        let retrieval = simulate(&pixel5a(), Task::Retrieval, &cfg, SequentialNoReuse).unwrap();
        assert_eq!(retrieval.makespan_s, 161.52);
        assert_eq!(retrieval.load_events().count(), 3);
        let assembly = simulate(&pixel5a(), Task::Assembly, &cfg, SequentialNoReuse).unwrap();
        assert_eq!(assembly.makespan_s, 163.74);
    }

    #[test]
    fn pixel5a_ideal_reuse() {
        let trace = simulate(
            &pixel5a(),
            Task::Retrieval,
            &SimConfig::default(),
            ReuseParallel,
        )
        .unwrap();
        // 17.23 + 8.68 + 4 * 8.68 + 5.57 + 24.39
        assert!((trace.makespan_s - 90.59).abs() < 1e-9);
    }

    #[test]
    fn split_load_policy() {
        let mut p = pixel5a();
        p.load_s.baseline_split = 2;
        let t = simulate(
            &p,
            Task::Retrieval,
            &SimConfig::default(),
            SequentialNoReuse,
        )
        .unwrap();
        assert!((t.makespan_s - 128.58).abs() < 1e-9);
    }

    #[test]
    fn single_item_has_no_overlap() {
        let p = pixel5a();
        let cfg = SimConfig::with_items(1);
        let reuse = simulate(&p, Task::Retrieval, &cfg, ReuseParallel)
            .unwrap()
            .makespan_s;
        let expected = 17.23 + 8.68 + 5.57 + 24.39;
        assert!((reuse - expected).abs() < 1e-9);
    }

    #[test]
    fn aggregate_scaling_per_item() {
        let cfg = SimConfig {
            aggregate_scaling: AggregateScaling::PerItem,
            ..SimConfig::default()
        };
        let t = StageTimings::for_profile(&pixel5a(), Task::Retrieval, &cfg, ReuseParallel);
        assert_eq!(t.aggregate, secs(24.39) * 5);
    }

    #[test]
    fn reported_reductions_pixel5a() {
        let p = pixel5a();
        let r = reported_reduction(&p, Metric::Retrieval).unwrap();
        assert_eq!(format!("{:.2}", r.reduction_pct), "33.06");
        assert_eq!(r.source, ReportSource::Reported);
        let a = reported_reduction(&p, Metric::Assembly).unwrap();
        assert_eq!(format!("{:.2}", a.reduction_pct), "30.78");
        let l = reported_reduction(&p, Metric::ModelLoading).unwrap();
        assert_eq!(format!("{:.2}", l.reduction_pct), "47.69");
    }

    #[test]
    fn missing_reported_data() {
        let mut p = pixel5a();
        p.reported_e2e_s.assembly = None;
        assert!(matches!(
            reported_reduction(&p, Metric::Assembly),
            Err(SimError::MissingReportedData { .. })
        ));
    }

    #[test]
    fn simulated_reduction_exceeds_reported() {
        let c = compare_modes(&pixel5a(), Task::Retrieval, &SimConfig::default()).unwrap();
        assert_eq!(c.source, ReportSource::Simulated);
        assert!(c.reduction_pct >= 33.06, "{}", c.reduction_pct);
    }

    #[test]
    fn calibration_closes_the_gap() {
        let cal = calibrate_overhead(&pixel5a(), Task::Retrieval, &SimConfig::default()).unwrap();
        assert!((cal.ideal_reuse_s - 90.59).abs() < 1e-9);
        assert!((cal.per_item_overhead_s - (108.66 - 90.59) / 6.0).abs() < 1e-9);
        assert!(cal.residual_s.abs() < 1e-8, "{}", cal.residual_s);
    }

    #[test]
    fn invalid_inputs() {
        let cfg = SimConfig {
            n_items: 0,
            ..SimConfig::default()
        };
        assert!(matches!(
            simulate(&pixel5a(), Task::Retrieval, &cfg, ReuseParallel),
            Err(SimError::Config(_))
        ));
        let mut p = pixel5a();
        p.stage_s.indexing = -3.0;
        assert!(matches!(
            simulate(&p, Task::Retrieval, &SimConfig::default(), ReuseParallel),
            Err(SimError::Profile(ProfileError::Invalid { .. }))
        ));
    }

    #[test]
    fn live_bench_overlaps() {
        let t = StageTimings::from_secs(0.0, 0.02, 0.02, 0.0);
        let seq = bench(&t, Task::Retrieval, 4, SequentialNoReuse).unwrap();
        let par = bench(&t, Task::Retrieval, 4, ReuseParallel).unwrap();
        assert!(seq.violations.is_empty(), "{:?}", seq.violations);
        assert!(par.violations.is_empty(), "{:?}", par.violations);
        assert!(seq.makespan_s() >= 0.16);
        assert!(par.makespan_s() < seq.makespan_s());
        assert!((par.ideal_s - 0.1).abs() < 1e-9);
    }

    #[test]
    fn deterministic() {
        let a = simulate(
            &pixel5a(),
            Task::Assembly,
            &SimConfig::default(),
            ReuseParallel,
        )
        .unwrap();
        let b = simulate(
            &pixel5a(),
            Task::Assembly,
            &SimConfig::default(),
            ReuseParallel,
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
