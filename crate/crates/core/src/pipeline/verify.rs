//! Mechanical trace checks: dependencies, per-module serialization, mode
//! semantics and bookkeeping.

use std::collections::BTreeMap;
use std::fmt;

use super::{makespan, EventKind, ExecutionTrace, PipelineSpec, TraceEvent};
use crate::ExecutionMode;

const EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum TraceViolation {
    InvalidInterval {
        index: usize,
    },
    UnknownStage {
        index: usize,
        stage: String,
    },
    WrongModule {
        index: usize,
        stage: String,
        module_id: String,
    },
    MissingItemId {
        index: usize,
    },
    /// `stage` of `item` started before `previous` of the same item ended.
    Dependency {
        item: String,
        stage: String,
        previous: String,
    },
    AggregateBeforeItems {
        stage: String,
    },
    /// Two executions on one module overlap.
    Serialization {
        module_id: String,
        first: usize,
        second: usize,
    },
    /// Two executions overlap in a mode that forbids any overlap.
    Overlap {
        first: usize,
        second: usize,
    },
    LoadDuringExec {
        load: usize,
        exec: usize,
    },
    RepeatedLoad {
        module_id: String,
        count: usize,
    },
    DuplicateExec {
        stage: String,
        item: Option<String>,
    },
    MissingExec {
        stage: String,
        item: Option<String>,
    },
    MakespanMismatch {
        recorded: f64,
        computed: f64,
    },
}

impl fmt::Display for TraceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use TraceViolation::*;
        match self {
            InvalidInterval { index } => {
                write!(f, "event {index}: end precedes start or time is not finite")
            }
            UnknownStage { index, stage } => {
                write!(f, "event {index}: stage `{stage}` is not in the pipeline")
            }
            WrongModule {
                index,
                stage,
                module_id,
            } => {
                write!(
                    f,
                    "event {index}: stage `{stage}` ran on module `{module_id}`"
                )
            }
            MissingItemId { index } => {
                write!(f, "event {index}: per-item execution without an item id")
            }
            Dependency {
                item,
                stage,
                previous,
            } => {
                write!(
                    f,
                    "item `{item}`: `{stage}` started before `{previous}` ended"
                )
            }
            AggregateBeforeItems { stage } => write!(
                f,
                "aggregate `{stage}` started before all per-item work ended"
            ),
            Serialization {
                module_id,
                first,
                second,
            } => {
                write!(
                    f,
                    "module `{module_id}`: events {first} and {second} overlap"
                )
            }
            Overlap { first, second } => {
                write!(f, "events {first} and {second} overlap in sequential mode")
            }
            LoadDuringExec { load, exec } => {
                write!(f, "load event {load} overlaps execution {exec}")
            }
            RepeatedLoad { module_id, count } => {
                write!(f, "module `{module_id}` loaded {count} times in reuse mode")
            }
            DuplicateExec { stage, item } => {
                write!(
                    f,
                    "stage `{stage}` ran more than once for {}",
                    item.as_deref().unwrap_or("<aggregate>")
                )
            }
            MissingExec { stage, item } => {
                write!(
                    f,
                    "stage `{stage}` never ran for {}",
                    item.as_deref().unwrap_or("<aggregate>")
                )
            }
            MakespanMismatch { recorded, computed } => {
                write!(
                    f,
                    "recorded makespan {recorded} differs from event span {computed}"
                )
            }
        }
    }
}

fn overlaps(a: &TraceEvent, b: &TraceEvent) -> bool {
    a.t_start_s < b.t_end_s - EPS && b.t_start_s < a.t_end_s - EPS
}

/// Every violation found in `trace`; empty iff the trace is valid for
/// `spec` under `mode`. Completeness is only required of traces that are
/// not flagged failed.
pub fn verify_trace(
    trace: &ExecutionTrace,
    spec: &PipelineSpec,
    mode: ExecutionMode,
) -> Vec<TraceViolation> {
    use TraceViolation::*;
    let mut out = Vec::new();
    let events = &trace.events;

    for (i, e) in events.iter().enumerate() {
        if !e.t_start_s.is_finite()
            || !e.t_end_s.is_finite()
            || e.t_end_s < e.t_start_s
            || e.t_start_s < 0.0
        {
            out.push(InvalidInterval { index: i });
        }
    }

    let chain = spec.chain();
    let aggregate = spec.aggregate();
    let position: BTreeMap<&str, usize> = chain
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), i))
        .collect();

    // (stage position, item) -> event index
    let mut per_item: BTreeMap<(usize, &str), usize> = BTreeMap::new();
    let mut aggregate_events = Vec::new();
    for (i, e) in events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == EventKind::Exec)
    {
        let Some(stage) = spec.stage(&e.stage) else {
            out.push(UnknownStage {
                index: i,
                stage: e.stage.clone(),
            });
            continue;
        };
        if stage.module_id != e.module_id {
            out.push(WrongModule {
                index: i,
                stage: e.stage.clone(),
                module_id: e.module_id.clone(),
            });
        }
        if let Some(&pos) = position.get(e.stage.as_str()) {
            let Some(item) = e.item_id.as_deref() else {
                out.push(MissingItemId { index: i });
                continue;
            };
            if per_item.insert((pos, item), i).is_some() {
                out.push(DuplicateExec {
                    stage: e.stage.clone(),
                    item: Some(item.to_string()),
                });
            }
        } else {
            aggregate_events.push(i);
        }
    }
    if aggregate_events.len() > 1 {
        out.push(DuplicateExec {
            stage: events[aggregate_events[1]].stage.clone(),
            item: None,
        });
    }

    // Dependencies along the chain.
    for (&(pos, item), &idx) in &per_item {
        if pos == 0 {
            continue;
        }
        if let Some(&prev) = per_item.get(&(pos - 1, item)) {
            if events[idx].t_start_s < events[prev].t_end_s - EPS {
                out.push(Dependency {
                    item: item.to_string(),
                    stage: events[idx].stage.clone(),
                    previous: events[prev].stage.clone(),
                });
            }
        }
    }
    if let Some(&agg) = aggregate_events.first() {
        let last_item_end = per_item
            .values()
            .map(|&i| events[i].t_end_s)
            .fold(f64::NEG_INFINITY, f64::max);
        if events[agg].t_start_s < last_item_end - EPS {
            out.push(AggregateBeforeItems {
                stage: events[agg].stage.clone(),
            });
        }
    }

    // Completeness.
    if !trace.failed {
        let items: Vec<&str> = {
            let mut v: Vec<&str> = per_item.keys().map(|(_, item)| *item).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        for (pos, stage) in chain.iter().enumerate() {
            for item in &items {
                if !per_item.contains_key(&(pos, *item)) {
                    out.push(MissingExec {
                        stage: stage.name.clone(),
                        item: Some(item.to_string()),
                    });
                }
            }
        }
        if let Some(a) = aggregate {
            if aggregate_events.is_empty() {
                out.push(MissingExec {
                    stage: a.name.clone(),
                    item: None,
                });
            }
        }
    }

    // Pairwise overlap rules.
    let execs: Vec<usize> = events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == EventKind::Exec)
        .map(|(i, _)| i)
        .collect();
    for (a_pos, &a) in execs.iter().enumerate() {
        for &b in &execs[a_pos + 1..] {
            if !overlaps(&events[a], &events[b]) {
                continue;
            }
            if events[a].module_id == events[b].module_id {
                out.push(Serialization {
                    module_id: events[a].module_id.clone(),
                    first: a,
                    second: b,
                });
            } else if mode == ExecutionMode::SequentialNoReuse {
                out.push(Overlap {
                    first: a,
                    second: b,
                });
            }
        }
    }
    for (l, load) in events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == EventKind::Load)
    {
        for &x in &execs {
            let same_module = events[x].module_id == load.module_id;
            if (same_module || mode == ExecutionMode::SequentialNoReuse)
                && overlaps(load, &events[x])
            {
                out.push(LoadDuringExec { load: l, exec: x });
            }
        }
    }

    if mode == ExecutionMode::ReuseParallel {
        let mut loads: BTreeMap<&str, usize> = BTreeMap::new();
        for e in trace.load_events() {
            *loads.entry(e.module_id.as_str()).or_default() += 1;
        }
        for (module_id, count) in loads {
            if count > 1 {
                out.push(RepeatedLoad {
                    module_id: module_id.to_string(),
                    count,
                });
            }
        }
    }

    let computed = makespan(events).unwrap_or(0.0);
    if (computed - trace.makespan_s).abs() > EPS.max(1e-12 * computed.abs()) {
        out.push(MakespanMismatch {
            recorded: trace.makespan_s,
            computed,
        });
    }

    out
}
