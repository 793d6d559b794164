//! Dispatch policy shared by the virtual-clock and wall-clock drivers.
//!
//! The [`Dispatcher`] decides what may start next given what has completed;
//! it knows nothing about time. The two drivers feed it completions, one from
//! an event queue ordered by virtual end time, the other from worker threads
//! (one per module) measured on a monotonic clock.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{
    validate_spec, Clock, ExecutionTrace, Executors, PipelineError, PipelineRun, PipelineSpec,
    StageCall, StageExecutor, TraceEvent, WorkItem,
};
use crate::registry::{AcquireOutcome, ModuleRegistry};
use crate::time::{secs, to_secs};
use crate::ExecutionMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Job {
    Load { module: usize },
    Exec { stage: usize, item: usize },
    Aggregate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Action {
    Start(Job),
    Release(usize),
}

#[derive(Debug)]
enum Step {
    Load(VecDeque<usize>),
    PerItem,
    Release(Vec<usize>),
    Aggregate,
}

struct Dispatcher {
    sequential: bool,
    n_items: usize,
    /// Module index of every chain stage.
    chain_modules: Vec<usize>,
    aggregate_module: Option<usize>,
    steps: VecDeque<Step>,
    ready: Vec<VecDeque<usize>>,
    module_busy: Vec<bool>,
    in_flight: usize,
    items_done: usize,
    step_started: bool,
}

impl Dispatcher {
    fn new(
        mode: ExecutionMode,
        chain_modules: Vec<usize>,
        aggregate_module: Option<usize>,
        n_modules: usize,
        n_items: usize,
    ) -> Self {
        let mut chain_set: Vec<usize> = Vec::new();
        for &m in &chain_modules {
            if !chain_set.contains(&m) {
                chain_set.push(m);
            }
        }
        let mut steps = VecDeque::new();
        match mode {
            ExecutionMode::ReuseParallel => {
                let mut all = chain_set.clone();
                if let Some(a) = aggregate_module.filter(|a| !all.contains(a)) {
                    all.push(a);
                }
                steps.push_back(Step::Load(all.into()));
                steps.push_back(Step::PerItem);
                if aggregate_module.is_some() {
                    steps.push_back(Step::Aggregate);
                }
            }
            ExecutionMode::SequentialNoReuse => {
                steps.push_back(Step::Load(chain_set.clone().into()));
                steps.push_back(Step::PerItem);
                steps.push_back(Step::Release(chain_set));
                if let Some(a) = aggregate_module {
                    steps.push_back(Step::Load(VecDeque::from([a])));
                    steps.push_back(Step::Aggregate);
                    steps.push_back(Step::Release(vec![a]));
                }
            }
        }
        let mut ready = vec![VecDeque::new(); chain_modules.len()];
        ready[0] = (0..n_items).collect();
        Self {
            sequential: mode == ExecutionMode::SequentialNoReuse,
            n_items,
            chain_modules,
            aggregate_module,
            steps,
            ready,
            module_busy: vec![false; n_modules],
            in_flight: 0,
            items_done: 0,
            step_started: false,
        }
    }

    fn done(&self) -> bool {
        self.steps.is_empty() && self.in_flight == 0
    }

    /// Everything that may start now, in dispatch order.
    fn next_actions(&mut self) -> Vec<Action> {
        let mut actions = Vec::new();
        while let Some(step) = self.steps.front_mut() {
            match step {
                Step::Release(modules) => {
                    actions.extend(modules.iter().map(|&m| Action::Release(m)));
                    self.steps.pop_front();
                    self.step_started = false;
                }
                Step::Load(queue) => {
                    if self.in_flight > 0 {
                        break;
                    }
                    match queue.pop_front() {
                        Some(module) => {
                            self.in_flight += 1;
                            actions.push(Action::Start(Job::Load { module }));
                            break;
                        }
                        None => {
                            self.steps.pop_front();
                            self.step_started = false;
                        }
                    }
                }
                Step::PerItem => {
                    if self.items_done == self.n_items && self.in_flight == 0 {
                        self.steps.pop_front();
                        self.step_started = false;
                        continue;
                    }
                    // Later stages first: drains the pipeline, and gives the
                    // item-major order in sequential mode.
                    for stage in (0..self.chain_modules.len()).rev() {
                        if self.sequential && self.in_flight > 0 {
                            break;
                        }
                        let module = self.chain_modules[stage];
                        if self.module_busy[module] {
                            continue;
                        }
                        if let Some(item) = self.ready[stage].pop_front() {
                            self.module_busy[module] = true;
                            self.in_flight += 1;
                            actions.push(Action::Start(Job::Exec { stage, item }));
                        }
                    }
                    break;
                }
                Step::Aggregate => {
                    if !self.step_started {
                        if self.in_flight > 0 {
                            break;
                        }
                        self.step_started = true;
                        let module = self
                            .aggregate_module
                            .expect("aggregate step without aggregate stage");
                        self.module_busy[module] = true;
                        self.in_flight += 1;
                        actions.push(Action::Start(Job::Aggregate));
                        break;
                    }
                    if self.in_flight == 0 {
                        self.steps.pop_front();
                        self.step_started = false;
                        continue;
                    }
                    break;
                }
            }
        }
        actions
    }

    fn complete(&mut self, job: Job) {
        self.in_flight -= 1;
        match job {
            Job::Load { .. } => {}
            Job::Exec { stage, item } => {
                self.module_busy[self.chain_modules[stage]] = false;
                if stage + 1 < self.chain_modules.len() {
                    self.ready[stage + 1].push_back(item);
                } else {
                    self.items_done += 1;
                }
            }
            Job::Aggregate => {
                if let Some(m) = self.aggregate_module {
                    self.module_busy[m] = false;
                }
            }
        }
    }
}

/// Spec resolved against executors, modules and items.
struct Plan<'a> {
    modules: Vec<String>,
    chain: Vec<(String, usize, Arc<dyn StageExecutor>)>,
    aggregate: Option<(String, usize, Arc<dyn StageExecutor>)>,
    items: &'a [WorkItem],
}

impl<'a> Plan<'a> {
    fn new(
        spec: &PipelineSpec,
        executors: &Executors,
        items: &'a [WorkItem],
    ) -> Result<Self, PipelineError> {
        let modules: Vec<String> = spec.modules().into_iter().map(String::from).collect();
        let index = |id: &str| {
            modules
                .iter()
                .position(|m| m == id)
                .expect("module listed by spec")
        };
        let bind = |name: &str| {
            executors
                .get(name)
                .cloned()
                .ok_or_else(|| PipelineError::MissingExecutor(name.to_string()))
        };
        let chain = spec
            .chain()
            .into_iter()
            .map(|s| Ok((s.name.clone(), index(&s.module_id), bind(&s.name)?)))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let aggregate = match spec.aggregate() {
            Some(s) => Some((s.name.clone(), index(&s.module_id), bind(&s.name)?)),
            None => None,
        };
        Ok(Self {
            modules,
            chain,
            aggregate,
            items,
        })
    }

    fn dispatcher(&self, mode: ExecutionMode) -> Dispatcher {
        Dispatcher::new(
            mode,
            self.chain.iter().map(|c| c.1).collect(),
            self.aggregate.as_ref().map(|a| a.1),
            self.modules.len(),
            self.items.len(),
        )
    }

    fn stage_of(&self, job: Job) -> (&str, &str) {
        match job {
            Job::Load { module } => ("load", &self.modules[module]),
            Job::Exec { stage, .. } => (&self.chain[stage].0, &self.modules[self.chain[stage].1]),
            Job::Aggregate => {
                let a = self.aggregate.as_ref().expect("aggregate job");
                (&a.0, &self.modules[a.1])
            }
        }
    }

    fn executor(&self, job: Job) -> &Arc<dyn StageExecutor> {
        match job {
            Job::Exec { stage, .. } => &self.chain[stage].2,
            Job::Aggregate => &self.aggregate.as_ref().expect("aggregate job").2,
            Job::Load { .. } => unreachable!("loads have no executor"),
        }
    }

    fn item_id(&self, job: Job) -> Option<&str> {
        match job {
            Job::Exec { item, .. } => Some(&self.items[item].item_id),
            _ => None,
        }
    }

    fn event(&self, job: Job, start: f64, end: f64) -> TraceEvent {
        let (stage, module) = self.stage_of(job);
        match job {
            Job::Load { .. } => TraceEvent::load(module, start, end),
            _ => TraceEvent::exec(
                stage,
                module,
                self.item_id(job).map(String::from),
                start,
                end,
            ),
        }
    }
}

/// Payload slots threaded through the chain.
struct Payloads {
    slots: Vec<Option<Value>>,
    aggregate: Option<Value>,
}

impl Payloads {
    fn new(items: &[WorkItem]) -> Self {
        Self {
            slots: items.iter().map(|i| Some(i.payload.clone())).collect(),
            aggregate: None,
        }
    }

    fn take_input(&mut self, job: Job, items: &[WorkItem]) -> Value {
        match job {
            Job::Exec { item, .. } => self.slots[item].take().expect("payload present"),
            Job::Aggregate => Value::Array(
                items
                    .iter()
                    .zip(&self.slots)
                    .map(|(it, out)| json!({ "item_id": it.item_id, "output": out.clone().unwrap_or(Value::Null) }))
                    .collect(),
            ),
            Job::Load { .. } => Value::Null,
        }
    }

    fn store(&mut self, job: Job, output: Value) {
        match job {
            Job::Exec { item, .. } => self.slots[item] = Some(output),
            Job::Aggregate => self.aggregate = Some(output),
            Job::Load { .. } => {}
        }
    }

    fn finish(self, items: &[WorkItem]) -> (Vec<(String, Value)>, Option<Value>) {
        let outs = items
            .iter()
            .zip(self.slots)
            .map(|(it, v)| (it.item_id.clone(), v.unwrap_or(Value::Null)))
            .collect();
        (outs, self.aggregate)
    }
}

struct Failure {
    stage: String,
    item: Option<String>,
    message: String,
}

/// Runs `spec` over `items`.
///
/// Dependencies and per-module serialization hold in both modes. In
/// [`ExecutionMode::SequentialNoReuse`] no two stage executions overlap and
/// modules are loaded per stage group (chain modules first, then a release
/// and a fresh load for the aggregate). In [`ExecutionMode::ReuseParallel`]
/// every module is acquired once up front and distinct modules overlap:
/// items enter the first stage in input order, later stages consume
/// completions first-in first-out.
///
/// An executor error aborts the run; the partial trace is returned inside
/// [`PipelineError::ExecutorFailure`] with `failed` set.
pub fn execute(
    spec: &PipelineSpec,
    items: &[WorkItem],
    mode: ExecutionMode,
    executors: &Executors,
    registry: &ModuleRegistry,
    clock: Clock,
) -> Result<PipelineRun, PipelineError> {
    let violations = validate_spec(spec, registry);
    if !violations.is_empty() {
        return Err(PipelineError::InvalidSpec(violations));
    }
    if items.is_empty() {
        return Err(PipelineError::NoItems);
    }
    let mut seen = BTreeSet::new();
    for item in items {
        if !seen.insert(item.item_id.as_str()) {
            return Err(PipelineError::DuplicateItem(item.item_id.clone()));
        }
    }
    let plan = Plan::new(spec, executors, items)?;

    let (mut events, payloads, failure) = match clock {
        Clock::Virtual => run_virtual(&plan, mode, registry)?,
        Clock::Monotonic => run_wall(&plan, mode, registry)?,
    };
    events.sort_by(|a, b| {
        a.t_start_s
            .total_cmp(&b.t_start_s)
            .then(a.t_end_s.total_cmp(&b.t_end_s))
    });
    let mut trace = ExecutionTrace::new(mode, events);
    if let Some(f) = failure {
        trace.failed = true;
        return Err(PipelineError::ExecutorFailure {
            stage: f.stage,
            item: f.item,
            message: f.message,
            partial: Box::new(trace),
        });
    }
    let (item_outputs, aggregate_output) = payloads.finish(items);
    Ok(PipelineRun {
        trace,
        item_outputs,
        aggregate_output,
    })
}

type DriverOutput = (Vec<TraceEvent>, Payloads, Option<Failure>);

fn run_virtual(
    plan: &Plan<'_>,
    mode: ExecutionMode,
    registry: &ModuleRegistry,
) -> Result<DriverOutput, PipelineError> {
    let mut dispatcher = plan.dispatcher(mode);
    let mut payloads = Payloads::new(plan.items);
    let mut events = Vec::new();
    let mut now = Duration::ZERO;
    let mut seq = 0u64;
    // (end, dispatch sequence) orders completions; ties resolve first-in first-out.
    let mut queue: BinaryHeap<Reverse<(Duration, u64, Job)>> = BinaryHeap::new();
    let mut pending: HashMap<u64, Value> = HashMap::new();

    loop {
        for action in dispatcher.next_actions() {
            match action {
                Action::Release(m) => registry.release(&plan.modules[m], mode)?,
                Action::Start(job) => {
                    let (cost, record) = match job {
                        Job::Load { module } => {
                            let outcome =
                                registry.acquire(&plan.modules[module], mode, to_secs(now))?;
                            (
                                secs(outcome.load_seconds()),
                                matches!(outcome, AcquireOutcome::LoadedNow(_)),
                            )
                        }
                        _ => {
                            let (stage, _) = plan.stage_of(job);
                            let call = StageCall {
                                stage,
                                item_id: plan.item_id(job),
                                input: payloads.take_input(job, plan.items),
                                clock: Clock::Virtual,
                            };
                            let exec = plan.executor(job);
                            let cost = exec.virtual_cost(&call);
                            match exec.run(call) {
                                Ok(out) => {
                                    pending.insert(seq, out);
                                }
                                Err(message) => {
                                    let failure = Failure {
                                        stage: stage.to_string(),
                                        item: plan.item_id(job).map(String::from),
                                        message,
                                    };
                                    events.push(plan.event(job, to_secs(now), to_secs(now + cost)));
                                    return Ok((events, payloads, Some(failure)));
                                }
                            }
                            (cost, true)
                        }
                    };
                    let end = now + cost;
                    if record {
                        events.push(plan.event(job, to_secs(now), to_secs(end)));
                    }
                    queue.push(Reverse((end, seq, job)));
                    seq += 1;
                }
            }
        }

        let Some(Reverse((end, s, job))) = queue.pop() else {
            debug_assert!(dispatcher.done(), "scheduler stalled");
            break;
        };
        now = end;
        finish_virtual(&mut dispatcher, &mut payloads, &mut pending, s, job);
        while let Some(Reverse((e, _, _))) = queue.peek() {
            if *e != now {
                break;
            }
            let Reverse((_, s, job)) = queue.pop().expect("peeked");
            finish_virtual(&mut dispatcher, &mut payloads, &mut pending, s, job);
        }
    }
    Ok((events, payloads, None))
}

fn finish_virtual(
    dispatcher: &mut Dispatcher,
    payloads: &mut Payloads,
    pending: &mut HashMap<u64, Value>,
    seq: u64,
    job: Job,
) {
    if let Some(out) = pending.remove(&seq) {
        payloads.store(job, out);
    }
    dispatcher.complete(job);
}

struct Completion {
    job: Job,
    result: Result<Value, String>,
    start: f64,
    end: f64,
}

fn run_wall(
    plan: &Plan<'_>,
    mode: ExecutionMode,
    registry: &ModuleRegistry,
) -> Result<DriverOutput, PipelineError> {
    let origin = Instant::now();
    let now = move || origin.elapsed().as_secs_f64();
    let mut dispatcher = plan.dispatcher(mode);
    let mut payloads = Payloads::new(plan.items);
    let mut events = Vec::new();
    let mut failure: Option<Failure> = None;

    std::thread::scope(|scope| -> Result<(), PipelineError> {
        let (done_tx, done_rx) = mpsc::channel::<Completion>();
        let mut workers = Vec::with_capacity(plan.modules.len());
        for _ in &plan.modules {
            let (tx, rx) =
                mpsc::channel::<(Job, Arc<dyn StageExecutor>, String, Option<String>, Value)>();
            let done_tx = done_tx.clone();
            scope.spawn(move || {
                for (job, exec, stage, item_id, input) in rx {
                    let start = now();
                    let result = exec.run(StageCall {
                        stage: &stage,
                        item_id: item_id.as_deref(),
                        input,
                        clock: Clock::Monotonic,
                    });
                    let end = now();
                    if done_tx
                        .send(Completion {
                            job,
                            result,
                            start,
                            end,
                        })
                        .is_err()
                    {
                        break;
                    }
                }
            });
            workers.push(tx);
        }
        drop(done_tx);

        let mut in_flight = 0usize;
        loop {
            if failure.is_none() {
                for action in dispatcher.next_actions() {
                    match action {
                        Action::Release(m) => registry.release(&plan.modules[m], mode)?,
                        Action::Start(job @ Job::Load { module }) => {
                            let start = now();
                            let outcome = registry.acquire(&plan.modules[module], mode, start)?;
                            let load = secs(outcome.load_seconds());
                            if !load.is_zero() {
                                std::thread::sleep(load);
                            }
                            let end = now();
                            if let AcquireOutcome::LoadedNow(_) = outcome {
                                events.push(plan.event(job, start, end));
                            }
                            // Loads complete inline; the next round picks up what they unblock.
                            dispatcher.complete(job);
                        }
                        Action::Start(job) => {
                            let (stage, _) = plan.stage_of(job);
                            let module = match job {
                                Job::Exec { stage, .. } => plan.chain[stage].1,
                                _ => plan.aggregate.as_ref().expect("aggregate").1,
                            };
                            let input = payloads.take_input(job, plan.items);
                            workers[module]
                                .send((
                                    job,
                                    plan.executor(job).clone(),
                                    stage.to_string(),
                                    plan.item_id(job).map(String::from),
                                    input,
                                ))
                                .expect("worker alive");
                            in_flight += 1;
                        }
                    }
                }
            }
            if in_flight == 0 {
                if failure.is_some() || dispatcher.done() {
                    break;
                }
                // Only loads completed this round; dispatch again.
                continue;
            }
            let c = done_rx
                .recv()
                .expect("workers alive while jobs are in flight");
            in_flight -= 1;
            events.push(plan.event(c.job, c.start, c.end));
            match c.result {
                Ok(out) => {
                    payloads.store(c.job, out);
                    dispatcher.complete(c.job);
                }
                Err(message) => {
                    let (stage, _) = plan.stage_of(c.job);
                    failure.get_or_insert(Failure {
                        stage: stage.to_string(),
                        item: plan.item_id(c.job).map(String::from),
                        message,
                    });
                }
            }
        }
        drop(workers);
        Ok(())
    })?;

    Ok((events, payloads, failure))
}
