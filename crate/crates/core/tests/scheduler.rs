use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use serde_json::{json, Value};

use vlreuse::pipeline::{
    execute, verify_trace, Clock, EventKind, Executors, FnExecutor, PipelineError, PipelineSpec,
    SleepExecutor, StageCall, StageExecutor, WorkItem, CAPTION_STAGE, ENCODE_STAGE, INDEX_STAGE,
    SCRIPT_STAGE,
};
use vlreuse::registry::{ModuleDescriptor, ModuleRegistry, ModuleRole};
use vlreuse::simulator::{analytic_makespan_exact, registry_for, simulate_timings, StageTimings};
use vlreuse::time::secs;
use vlreuse::ExecutionMode::{self, ReuseParallel, SequentialNoReuse};
use vlreuse::Task;

fn items(n: usize) -> Vec<WorkItem> {
    (0..n)
        .map(|i| WorkItem::new(format!("item-{i}"), json!(i)))
        .collect()
}

fn sleepers(spec: &PipelineSpec, e: Duration, d: Duration, a: Duration) -> Executors {
    let mut ex = Executors::new();
    let chain = spec.chain();
    ex.insert(
        chain[0].name.clone(),
        Arc::new(SleepExecutor::new(e)) as Arc<dyn StageExecutor>,
    );
    ex.insert(chain[1].name.clone(), Arc::new(SleepExecutor::new(d)));
    ex.insert(
        spec.aggregate().unwrap().name.clone(),
        Arc::new(SleepExecutor::new(a)),
    );
    ex
}

fn run_live(n: usize, mode: ExecutionMode) -> f64 {
    let spec = PipelineSpec::standard(Task::Retrieval, mode);
    let registry = registry_for(&spec, mode, Duration::ZERO);
    let ms50 = Duration::from_millis(50);
    let ex = sleepers(&spec, ms50, ms50, Duration::ZERO);
    let run = execute(&spec, &items(n), mode, &ex, &registry, Clock::Monotonic).unwrap();
    assert!(verify_trace(&run.trace, &spec, mode).is_empty());
    run.trace.makespan_s
}

#[test]
fn two_items_live() {
    let par = run_live(2, ReuseParallel);
    let seq = run_live(2, SequentialNoReuse);
    assert!((par - 0.150).abs() <= 0.150 * 0.2, "reuse makespan {par}");
    assert!(
        (seq - 0.200).abs() <= 0.200 * 0.2,
        "sequential makespan {seq}"
    );
}

#[test]
fn two_items_virtual_is_exact() {
    let t = StageTimings::from_secs(0.0, 0.05, 0.05, 0.0);
    assert_eq!(
        secs(
            simulate_timings(&t, Task::Retrieval, 2, ReuseParallel)
                .unwrap()
                .makespan_s
        ),
        secs(0.15)
    );
    assert_eq!(
        secs(
            simulate_timings(&t, Task::Retrieval, 2, SequentialNoReuse)
                .unwrap()
                .makespan_s
        ),
        secs(0.2)
    );
}

#[test]
fn one_item_differs_only_by_loads() {
    let seq = StageTimings::from_secs(7.0, 1.5, 2.5, 3.0);
    let par = StageTimings {
        load_total: secs(4.0),
        ..seq
    };
    let a = simulate_timings(&seq, Task::Assembly, 1, SequentialNoReuse)
        .unwrap()
        .makespan_s;
    let b = simulate_timings(&par, Task::Assembly, 1, ReuseParallel)
        .unwrap()
        .makespan_s;
    assert_eq!(secs(a - b), secs(3.0));
}

#[test]
fn closed_form_examples() {
    let t = StageTimings::from_secs(0.0, 1.0, 2.0, 0.0);
    for (mode, want) in [(ReuseParallel, 9.0), (SequentialNoReuse, 12.0)] {
        let trace = simulate_timings(&t, Task::Retrieval, 4, mode).unwrap();
        assert_eq!(trace.makespan_s, want);
        assert!(
            verify_trace(&trace, &PipelineSpec::standard(Task::Retrieval, mode), mode).is_empty()
        );
    }
}

#[test]
fn load_events_per_mode() {
    let t = StageTimings::from_secs(6.0, 1.0, 1.0, 1.0);
    let reuse = simulate_timings(&t, Task::Retrieval, 5, ReuseParallel).unwrap();
    let mut loaded: Vec<&str> = reuse.load_events().map(|e| e.module_id.as_str()).collect();
    loaded.sort();
    assert_eq!(
        loaded,
        vec!["sentence-embedder", "text-decoder", "video-encoder"]
    );
    assert_eq!(secs(reuse.total_load_s()), secs(6.0));

    let seq = simulate_timings(&t, Task::Assembly, 5, SequentialNoReuse).unwrap();
    let loaded: Vec<&str> = seq.load_events().map(|e| e.module_id.as_str()).collect();
    assert_eq!(
        loaded,
        vec!["video-encoder", "text-decoder", "script-generator"]
    );
    // No execution overlaps any other in the baseline.
    let execs: Vec<_> = seq.exec_events().collect();
    for w in execs.windows(2) {
        assert!(w[1].t_start_s >= w[0].t_end_s);
    }
}

#[test]
fn encoder_runs_in_input_order_and_decoder_follows() {
    let t = StageTimings::from_secs(0.0, 1.0, 3.0, 0.0);
    let trace = simulate_timings(&t, Task::Retrieval, 4, ReuseParallel).unwrap();
    let order = |stage: &str| -> Vec<String> {
        trace
            .exec_events()
            .filter(|e| e.stage == stage)
            .map(|e| e.item_id.clone().unwrap())
            .collect()
    };
    let expected: Vec<String> = (0..4).map(|i| format!("clip-{i:03}")).collect();
    assert_eq!(order(ENCODE_STAGE), expected);
    assert_eq!(order(CAPTION_STAGE), expected);
    assert_eq!(
        trace
            .exec_events()
            .filter(|e| e.stage == INDEX_STAGE)
            .count(),
        1
    );
}

#[test]
fn aggregate_sees_every_item_once() {
    let spec = PipelineSpec::standard(Task::Assembly, ReuseParallel);
    let mut ex = Executors::new();
    // Odd items encode slowly so decode completions arrive out of order on the wall clock.
    ex.insert(
        ENCODE_STAGE.into(),
        Arc::new(FnExecutor::with_cost(
            |c: StageCall<'_>| {
                let i = c.input.as_u64().unwrap();
                if c.clock == Clock::Monotonic {
                    std::thread::sleep(Duration::from_millis(if i % 2 == 1 { 8 } else { 1 }));
                }
                Ok(json!({ "encoded": i }))
            },
            Duration::from_millis(2),
        )) as Arc<dyn StageExecutor>,
    );
    ex.insert(
        CAPTION_STAGE.into(),
        Arc::new(FnExecutor::new(|c: StageCall<'_>| {
            Ok(json!(format!("caption of {}", c.input["encoded"])))
        })),
    );
    ex.insert(
        SCRIPT_STAGE.into(),
        Arc::new(FnExecutor::new(|c: StageCall<'_>| {
            assert!(c.item_id.is_none());
            Ok(c.input.clone())
        })),
    );
    for clock in [Clock::Virtual, Clock::Monotonic] {
        let run = execute(
            &spec,
            &items(6),
            ReuseParallel,
            &ex,
            &registry_for(&spec, ReuseParallel, Duration::ZERO),
            clock,
        )
        .unwrap();
        let agg = run.aggregate_output.unwrap();
        let entries = agg.as_array().unwrap();
        assert_eq!(entries.len(), 6);
        for (i, entry) in entries.iter().enumerate() {
            assert_eq!(entry["item_id"], json!(format!("item-{i}")));
            assert_eq!(entry["output"], json!(format!("caption of {i}")));
        }
        assert_eq!(run.item_outputs.len(), 6);
    }
}

#[test]
fn executor_failure_returns_partial_trace() {
    let spec = PipelineSpec::standard(Task::Retrieval, ReuseParallel);
    let mut ex = sleepers(&spec, secs(1.0), secs(1.0), secs(1.0));
    ex.insert(
        CAPTION_STAGE.into(),
        Arc::new(FnExecutor::with_cost(
            |c: StageCall<'_>| {
                if c.item_id == Some("item-2") {
                    Err("decoder crashed".into())
                } else {
                    Ok(Value::Null)
                }
            },
            secs(1.0),
        )),
    );
    for clock in [Clock::Virtual, Clock::Monotonic] {
        let load = if clock == Clock::Virtual {
            secs(1.0)
        } else {
            Duration::ZERO
        };
        let reg = registry_for(&spec, ReuseParallel, load);
        let ex = if clock == Clock::Virtual {
            ex.clone()
        } else {
            let mut fast = sleepers(
                &spec,
                Duration::from_millis(2),
                Duration::from_millis(2),
                Duration::ZERO,
            );
            fast.insert(CAPTION_STAGE.into(), ex[CAPTION_STAGE].clone());
            fast
        };
        match execute(&spec, &items(5), ReuseParallel, &ex, &reg, clock) {
            Err(PipelineError::ExecutorFailure {
                stage,
                item,
                message,
                partial,
            }) => {
                assert_eq!(stage, CAPTION_STAGE);
                assert_eq!(item.as_deref(), Some("item-2"));
                assert_eq!(message, "decoder crashed");
                assert!(partial.failed);
                assert!(partial.exec_events().all(|e| e.stage != INDEX_STAGE));
                assert!(partial
                    .exec_events()
                    .any(|e| e.item_id.as_deref() == Some("item-2") && e.stage == CAPTION_STAGE));
                assert!(verify_trace(&partial, &spec, ReuseParallel).is_empty());
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let spec = PipelineSpec::standard(Task::Retrieval, ReuseParallel);
    let registry = registry_for(&spec, ReuseParallel, Duration::ZERO);
    let ex = sleepers(&spec, Duration::ZERO, Duration::ZERO, Duration::ZERO);
    assert!(matches!(
        execute(&spec, &[], ReuseParallel, &ex, &registry, Clock::Virtual),
        Err(PipelineError::NoItems)
    ));
    let dup = vec![
        WorkItem::new("a", Value::Null),
        WorkItem::new("a", Value::Null),
    ];
    assert!(matches!(
        execute(&spec, &dup, ReuseParallel, &ex, &registry, Clock::Virtual),
        Err(PipelineError::DuplicateItem(_))
    ));
    let mut missing = ex.clone();
    missing.remove(INDEX_STAGE);
    assert!(matches!(
        execute(
            &spec,
            &items(1),
            ReuseParallel,
            &missing,
            &registry,
            Clock::Virtual
        ),
        Err(PipelineError::MissingExecutor(_))
    ));
    let empty = ModuleRegistry::new();
    assert!(matches!(
        execute(&spec, &items(1), ReuseParallel, &ex, &empty, Clock::Virtual),
        Err(PipelineError::InvalidSpec(_))
    ));
}

#[test]
fn sequential_reloads_through_the_registry() {
    let spec = PipelineSpec::standard(Task::Retrieval, SequentialNoReuse);
    let registry = ModuleRegistry::new();
    for (id, role) in [
        ("video-encoder", ModuleRole::VideoEncoder),
        ("text-decoder", ModuleRole::TextDecoder),
        ("sentence-embedder", ModuleRole::Embedder),
    ] {
        registry
            .register(ModuleDescriptor::new(id, role).with_load_latency(0.5))
            .unwrap();
    }
    let ex = sleepers(&spec, secs(1.0), secs(1.0), secs(1.0));
    let first = execute(
        &spec,
        &items(2),
        SequentialNoReuse,
        &ex,
        &registry,
        Clock::Virtual,
    )
    .unwrap();
    let second = execute(
        &spec,
        &items(2),
        SequentialNoReuse,
        &ex,
        &registry,
        Clock::Virtual,
    )
    .unwrap();
    assert_eq!(first.trace.load_events().count(), 3);
    assert_eq!(second.trace.load_events().count(), 3);
    assert_eq!(registry.total_loads(), 6);
    assert_eq!(first.trace.makespan_s, 1.5 + 4.0 + 1.0);
}

#[test]
fn events_carry_module_ids() {
    let t = StageTimings::from_secs(3.0, 1.0, 1.0, 1.0);
    let trace = simulate_timings(&t, Task::Assembly, 2, ReuseParallel).unwrap();
    let by_stage: BTreeMap<&str, &str> = trace
        .exec_events()
        .map(|e| (e.stage.as_str(), e.module_id.as_str()))
        .collect();
    assert_eq!(by_stage[ENCODE_STAGE], "video-encoder");
    assert_eq!(by_stage[CAPTION_STAGE], "text-decoder");
    assert_eq!(by_stage[SCRIPT_STAGE], "text-decoder");
    assert!(trace
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Load)
        .all(|e| e.item_id.is_none()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn executed_traces_verify(
        load in 0u32..5_000, e in 0u32..3_000, d in 0u32..3_000, a in 0u32..3_000, n in 1usize..20,
        assembly in any::<bool>(), reuse in any::<bool>(),
    ) {
        let ms = |v: u32| Duration::from_millis(u64::from(v));
        let t = StageTimings { load_total: ms(load), encode: ms(e), decode: ms(d), aggregate: ms(a) };
        let task = if assembly { Task::Assembly } else { Task::Retrieval };
        let mode = if reuse { ReuseParallel } else { SequentialNoReuse };
        let trace = simulate_timings(&t, task, n, mode).unwrap();
        prop_assert!(verify_trace(&trace, &PipelineSpec::standard(task, mode), mode).is_empty());
        prop_assert_eq!(secs(trace.makespan_s), analytic_makespan_exact(&t, n, mode));
    }
}
