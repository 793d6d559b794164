use std::time::Duration;

use proptest::prelude::*;

use vlreuse::simulator::{
    analytic_makespan, compare_modes, simulate, simulate_timings, DeviceProfile, SimConfig,
    StageTimings,
};
use vlreuse::ExecutionMode::{ReuseParallel, SequentialNoReuse};
use vlreuse::Task;

fn ms(v: u32) -> Duration {
    Duration::from_millis(u64::from(v))
}

fn reuse_span(t: &StageTimings, n: usize) -> Duration {
    Duration::from_secs_f64(
        simulate_timings(t, Task::Retrieval, n, ReuseParallel)
            .unwrap()
            .makespan_s,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reuse_makespan_is_monotone(
        l in 0u32..10_000, e in 0u32..5_000, d in 0u32..5_000, a in 0u32..5_000, n in 1usize..30,
        bump in 1u32..2_000, which in 0usize..5,
    ) {
        let base = StageTimings { load_total: ms(l), encode: ms(e), decode: ms(d), aggregate: ms(a) };
        let mut more = base;
        let mut n2 = n;
        match which {
            0 => more.load_total += ms(bump),
            1 => more.encode += ms(bump),
            2 => more.decode += ms(bump),
            3 => more.aggregate += ms(bump),
            _ => n2 += 1,
        }
        prop_assert!(reuse_span(&more, n2) >= reuse_span(&base, n));
    }

    #[test]
    fn reuse_never_loses(
        l_seq in 0u32..10_000, frac in 0.0f64..=1.0, e in 0u32..5_000, d in 0u32..5_000, a in 0u32..5_000,
        n in 1usize..30, assembly in any::<bool>(),
    ) {
        let task = if assembly { Task::Assembly } else { Task::Retrieval };
        let l_reuse = (f64::from(l_seq) * frac).floor() as u32;
        let seq = StageTimings { load_total: ms(l_seq), encode: ms(e), decode: ms(d), aggregate: ms(a) };
        let par = StageTimings { load_total: ms(l_reuse), ..seq };
        let s = simulate_timings(&seq, task, n, SequentialNoReuse).unwrap().makespan_s;
        let r = simulate_timings(&par, task, n, ReuseParallel).unwrap().makespan_s;
        prop_assert!(r <= s);
        if n >= 2 && e > 0 && d > 0 {
            prop_assert!(r < s);
        }
        if l_reuse < l_seq {
            prop_assert!(r < s);
        }
    }
}

#[test]
fn balanced_stages_approach_half() {
    // e = d, negligible loading and aggregate: the reduction tends to 50%.
    let mut last = 0.0;
    for n in [2, 10, 100, 1000] {
        let s = analytic_makespan(0.0, 1.0, 1.0, n, 0.0, SequentialNoReuse);
        let r = analytic_makespan(0.0, 1.0, 1.0, n, 0.0, ReuseParallel);
        let red = 100.0 * (s - r) / s;
        assert!(red > last && red < 50.0);
        last = red;
    }
    assert!(last > 49.9);
}

#[test]
fn every_builtin_simulates_with_savings() {
    for name in DeviceProfile::builtin_names() {
        let p = DeviceProfile::builtin(name).unwrap();
        for task in Task::ALL {
            let c = compare_modes(&p, task, &SimConfig::default()).unwrap();
            assert!(c.reduction_pct > 0.0, "{name} {task}");
            assert!(c.reuse_s < c.baseline_s);
        }
    }
}

#[test]
fn makespan_matches_simulator_total() {
    let p = DeviceProfile::builtin("pixel5a").unwrap();
    let trace = simulate(
        &p,
        Task::Retrieval,
        &SimConfig::default(),
        SequentialNoReuse,
    )
    .unwrap();
    let recomputed = vlreuse::pipeline::makespan(&trace.events).unwrap();
    assert_eq!(recomputed, trace.makespan_s);
    assert_eq!(
        trace.makespan_s,
        analytic_makespan(2.0 * 32.94, 8.68, 5.57, 5, 24.39, SequentialNoReuse)
    );
}

#[test]
fn profile_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("custom.toml");
    let mut p = DeviceProfile::builtin("galaxy-s23").unwrap();
    p.name = "custom".into();
    std::fs::write(&path, p.to_toml_string()).unwrap();
    let q = DeviceProfile::resolve(path.to_str().unwrap()).unwrap();
    assert_eq!(p, q);
}
