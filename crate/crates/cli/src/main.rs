use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlreuse::costmodel::{self, published, CostError, EnergyInputs, MemoryLedger, QuantPolicy};
use vlreuse::pipeline::write_trace;
use vlreuse::reports::{self, ReportError, Table};
use vlreuse::simulator::{
    analytic_makespan_exact, bench, calibrate_overhead, simulate, simulate_timings,
    AggregateScaling, DeviceProfile, ProfileError, SimConfig, SimError, StageTimings,
};
use vlreuse::tasks::{
    assemble, read_catalogue, read_ground_truth, recall_at_k, retrieve, segment, Catalogue,
    HashedBagOfWords, PreprocessSpec, ScriptOrder, SegmentationParams, TaskError,
};
use vlreuse::time::secs;
use vlreuse::{ExecutionMode, Task};

#[derive(Parser)]
#[command(
    name = "vlreuse",
    version,
    about = "Simulate, benchmark and run reuse-centric video-language pipelines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a device profile in virtual time and compare with its published figures.
    Simulate(SimulateArgs),
    /// Published reductions for several profiles and the per-item overhead that explains them.
    Compare(CompareArgs),
    /// Run the real scheduler with sleeping stages and check the traces.
    Bench(BenchArgs),
    /// Randomized check of simulated against closed-form makespans.
    Check(CheckArgs),
    /// Cut a video duration into overlapping clip windows.
    Segment(SegmentArgs),
    /// Rank a caption catalogue against a prompt and write an assembly manifest.
    Assemble(AssembleArgs),
    /// Rank a caption catalogue for every ground-truth query and report Recall@k.
    Retrieve(RetrieveArgs),
    /// Memory, energy, storage and layer reports.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    Csv,
    Json,
}

#[derive(Args)]
struct OutputArgs {
    /// Standard output format.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in profile name or path to a profile TOML file.
    #[arg(long, default_value = "pixel5a")]
    profile: String,
    /// Task whose traces are written; both when omitted.
    #[arg(long)]
    task: Option<Task>,
    /// Mode whose traces are written; both when omitted.
    #[arg(long)]
    mode: Option<ExecutionMode>,
    /// Number of work items.
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Extra seconds added to every per-item stage call.
    #[arg(long, default_value_t = 0.0)]
    overhead: f64,
    /// Whether the aggregate figure covers the batch or one item.
    #[arg(long, default_value = "batch")]
    aggregate: AggregateScaling,
    /// Directory for traces (JSONL) and the report (CSV and JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Profiles to include; every built-in profile when omitted.
    #[arg(long)]
    profile: Vec<String>,
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Write the reduction table here (CSV, or JSON for a `.json` path).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 50.0)]
    encode_ms: f64,
    #[arg(long, default_value_t = 50.0)]
    decode_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    aggregate_ms: f64,
    /// Total model loading per run, charged the way the simulator does.
    #[arg(long, default_value_t = 0.0)]
    load_ms: f64,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value = "retrieval")]
    task: Task,
    /// Only run this mode; both modes and their ratio when omitted.
    #[arg(long)]
    mode: Option<ExecutionMode>,
    /// Directory for the traces of every run.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    draws: usize,
    /// Largest number of items in a draw.
    #[arg(long, default_value_t = 50)]
    max_n: usize,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    duration: f64,
    #[arg(long, default_value = "video")]
    source: String,
    #[arg(long, default_value_t = 10.0)]
    clip_len: f64,
    #[arg(long, default_value_t = 5.0)]
    stride: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct AssembleArgs {
    /// Caption catalogue CSV (clip_id,source_id,start_s,end_s,caption).
    #[arg(long)]
    catalogue: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value = "similarity")]
    order: ScriptOrder,
    /// Manifest path.
    #[arg(long, default_value = "manifest.json")]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    catalogue: PathBuf,
    /// Ground truth CSV (query,clip_id).
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Write the ranked lists here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(value_enum)]
    kind: ReportKind,
    /// Input file: memory/energy TOML, storage/layers CSV. Built-in figures when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Take the memory ledger or power draw from this profile.
    #[arg(long)]
    profile: Option<String>,
    /// Layer kinds to quantize (layers report).
    #[arg(long, value_delimiter = ',', default_value = "Linear,Embedding")]
    quantize: Vec<String>,
    /// Write the flat table here (CSV, or JSON for a `.json` path).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Memory,
    Energy,
    Storage,
    Layers,
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const PARSE: u8 = 1;
const INVALID: u8 = 2;
const EXEC: u8 = 3;

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<ProfileError> for Failure {
    fn from(e: ProfileError) -> Self {
        let code = if matches!(e, ProfileError::Invalid { .. }) {
            INVALID
        } else {
            PARSE
        };
        Failure::new(code, e)
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Profile(p) => p.into(),
            SimError::Pipeline(_) => Failure::new(EXEC, e),
            _ => Failure::new(INVALID, e),
        }
    }
}

impl From<TaskError> for Failure {
    fn from(e: TaskError) -> Self {
        let code = match e {
            TaskError::Record { .. }
            | TaskError::Csv(_)
            | TaskError::Json(_)
            | TaskError::Io(_) => PARSE,
            _ => INVALID,
        };
        Failure::new(code, e)
    }
}

impl From<CostError> for Failure {
    fn from(e: CostError) -> Self {
        let code = match e {
            CostError::Csv(_)
            | CostError::Toml(_)
            | CostError::LayerTable { .. }
            | CostError::StorageTable { .. } => PARSE,
            _ => INVALID,
        };
        Failure::new(code, e)
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Cost(c) => c.into(),
            ReportError::Sim(s) => s.into(),
            other => Failure::new(PARSE, other),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(PARSE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Check(a) => cmd_check(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Assemble(a) => cmd_assemble(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn print_table(table: &Table, format: Format) {
    match format {
        Format::Text => print!("{}", table.to_text()),
        Format::Csv => print!("{}", table.to_csv()),
        Format::Json => print!("{}", table.to_json()),
    }
}

fn write_table(table: &Table, path: &Path) -> CmdResult {
    let text = if path.extension().is_some_and(|e| e == "json") {
        table.to_json()
    } else {
        table.to_csv()
    };
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(|e| Failure::new(EXEC, e))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(|e| Failure::new(EXEC, e))
}

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| Failure::new(PARSE, e))
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let profile = DeviceProfile::resolve(&a.profile)?;
    let config = SimConfig {
        n_items: a.n,
        per_item_overhead_s: a.overhead,
        aggregate_scaling: a.aggregate,
    };
    let table = reports::simulate_report(&profile, &config)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let tasks: Vec<Task> = a
            .task
            .map(|t| vec![t])
            .unwrap_or_else(|| Task::ALL.to_vec());
        let modes: Vec<ExecutionMode> = a
            .mode
            .map(|m| vec![m])
            .unwrap_or_else(|| ExecutionMode::ALL.to_vec());
        for task in tasks {
            for mode in &modes {
                let trace = simulate(&profile, task, &config, *mode)?;
                let path = dir.join(format!("trace-{task}-{mode}.jsonl"));
                write_trace(&path, &trace)
                    .with_context(|| format!("writing {}", path.display()))
                    .map_err(|e| Failure::new(EXEC, e))?;
            }
        }
        write_table(&table, &dir.join("report.csv"))?;
        write_table(&table, &dir.join("report.json"))?;
    }
    print_table(&table, a.output.format);
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> CmdResult {
    let names: Vec<String> = if a.profile.is_empty() {
        DeviceProfile::builtin_names().map(String::from).collect()
    } else {
        a.profile
    };
    let profiles = names
        .iter()
        .map(|n| DeviceProfile::resolve(n))
        .collect::<Result<Vec<_>, _>>()?;
    let table = reports::reported_table(&profiles)?;
    let config = SimConfig::with_items(a.n);
    let mut cals = Vec::new();
    for p in &profiles {
        for task in Task::ALL {
            match calibrate_overhead(p, task, &config) {
                Ok(c) => cals.push(c),
                Err(SimError::MissingReportedData { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    if let Some(path) = &a.out {
        write_table(&table, path)?;
    }
    print_table(&table, a.output.format);
    if matches!(a.output.format, Format::Text) {
        println!();
        print!("{}", reports::calibration_report(&cals).to_text());
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    for (name, v) in [("encode-ms", a.encode_ms), ("decode-ms", a.decode_ms)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Failure::new(
                INVALID,
                anyhow!("--{name} must be > 0 (got {v})"),
            ));
        }
    }
    for (name, v) in [("aggregate-ms", a.aggregate_ms), ("load-ms", a.load_ms)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Failure::new(
                INVALID,
                anyhow!("--{name} must be >= 0 (got {v})"),
            ));
        }
    }
    if a.n == 0 || a.runs == 0 {
        return Err(Failure::new(
            INVALID,
            anyhow!("--n and --runs must be >= 1"),
        ));
    }
    let timings = StageTimings::from_secs(
        a.load_ms / 1e3,
        a.encode_ms / 1e3,
        a.decode_ms / 1e3,
        a.aggregate_ms / 1e3,
    );
    let modes: Vec<ExecutionMode> = a
        .mode
        .map(|m| vec![m])
        .unwrap_or_else(|| ExecutionMode::ALL.to_vec());
    if let Some(dir) = &a.out {
        create_dir(dir)?;
    }
    let mut table = Table::new(
        format!(
            "live bench: e={}ms d={}ms N={}",
            a.encode_ms, a.decode_ms, a.n
        ),
        &[
            "run",
            "mode",
            "makespan_s",
            "ideal_s",
            "violations",
            "ratio",
        ],
    );
    let mut total_violations = 0;
    for run in 1..=a.runs {
        let mut makespans = BTreeMap::new();
        for mode in &modes {
            let r = bench(&timings, a.task, a.n, *mode)?;
            for v in &r.violations {
                eprintln!("run {run} {mode}: {v}");
            }
            total_violations += r.violations.len();
            if let Some(dir) = &a.out {
                let path = dir.join(format!("bench-{run}-{mode}.jsonl"));
                write_trace(&path, &r.trace)
                    .with_context(|| format!("writing {}", path.display()))
                    .map_err(|e| Failure::new(EXEC, e))?;
            }
            makespans.insert(*mode, r.makespan_s());
            let ratio = match (makespans.get(&ExecutionMode::SequentialNoReuse), *mode) {
                (Some(seq), ExecutionMode::ReuseParallel) if *seq > 0.0 => {
                    format!("{:.3}", r.makespan_s() / seq)
                }
                _ => String::new(),
            };
            table.push(vec![
                run.to_string(),
                mode.to_string(),
                format!("{:.4}", r.makespan_s()),
                format!("{:.4}", r.ideal_s),
                r.violations.len().to_string(),
                ratio,
            ]);
        }
    }
    print_table(&table, a.output.format);
    if total_violations > 0 {
        return Err(Failure::new(
            EXEC,
            anyhow!("{total_violations} trace violation(s)"),
        ));
    }
    Ok(())
}

fn cmd_check(a: CheckArgs) -> CmdResult {
    if a.max_n == 0 {
        return Err(Failure::new(INVALID, anyhow!("--max-n must be >= 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut mismatches = 0;
    let mut dominance = 0;
    for _ in 0..a.draws {
        let n = rng.gen_range(1..=a.max_n);
        let e = rng.gen_range(0.0..20.0);
        let d = rng.gen_range(0.0..20.0);
        let agg = rng.gen_range(0.0..40.0);
        let l_seq = rng.gen_range(0.0..80.0);
        let l_reuse = rng.gen_range(0.0..=l_seq);
        let task = if rng.gen_bool(0.5) {
            Task::Retrieval
        } else {
            Task::Assembly
        };
        let mut spans = BTreeMap::new();
        for (mode, load) in [
            (ExecutionMode::SequentialNoReuse, l_seq),
            (ExecutionMode::ReuseParallel, l_reuse),
        ] {
            let t = StageTimings::from_secs(load, e, d, agg);
            let sim = simulate_timings(&t, task, n, mode)?.makespan_s;
            let exact = analytic_makespan_exact(&t, n, mode);
            if secs(sim) != exact {
                mismatches += 1;
                eprintln!(
                    "mismatch: {mode} L={load} e={e} d={d} N={n} A={agg}: {sim} vs {}",
                    exact.as_secs_f64()
                );
            }
            spans.insert(mode, sim);
        }
        if spans[&ExecutionMode::ReuseParallel] > spans[&ExecutionMode::SequentialNoReuse] {
            dominance += 1;
        }
    }
    println!("draws: {}  seed: {}", a.draws, a.seed);
    println!("simulated vs closed form: {} mismatch(es)", mismatches);
    println!("reuse slower than sequential: {} draw(s)", dominance);
    if mismatches + dominance > 0 {
        return Err(Failure::new(EXEC, anyhow!("check failed")));
    }
    Ok(())
}

fn cmd_segment(a: SegmentArgs) -> CmdResult {
    let params = SegmentationParams::new(a.clip_len, a.stride)?;
    let windows = segment(&a.source, a.duration, &params)?;
    let mut table = Table::new(
        format!("{}: {} s", a.source, a.duration),
        &["clip_id", "start_s", "end_s"],
    );
    for w in windows {
        table.push(vec![
            w.clip_id,
            format!("{}", w.start_s),
            format!("{}", w.end_s),
        ]);
    }
    print_table(&table, a.output.format);
    Ok(())
}

fn load_catalogue(path: &Path) -> Result<Catalogue, Failure> {
    let text = read_input(path)?;
    let catalogue = read_catalogue(
        text.as_bytes(),
        &path.display().to_string(),
        &PreprocessSpec::default(),
    )?;
    if catalogue.is_empty() {
        return Err(TaskError::EmptyCatalogue.into());
    }
    Ok(catalogue)
}

fn warn_k(k: usize, catalogue: &Catalogue) {
    if k > catalogue.len() {
        eprintln!(
            "warning: k={k} exceeds the catalogue size ({}); using all clips",
            catalogue.len()
        );
    }
}

fn cmd_assemble(a: AssembleArgs) -> CmdResult {
    let catalogue = load_catalogue(&a.catalogue)?;
    warn_k(a.k, &catalogue);
    let (manifest, ranked) = assemble(
        &catalogue,
        &a.prompt,
        a.k,
        a.order,
        &HashedBagOfWords::default(),
        None,
    )?;
    manifest.write(&a.out).map_err(|e| Failure::new(EXEC, e))?;
    println!("prompt: {}", manifest.prompt);
    println!("selected ({} by {}):", ranked.len(), a.order);
    for r in &ranked {
        println!("  {}  {:.4}", r.clip_id, r.score);
    }
    println!("script:");
    for (clip, line) in manifest.ordered_clips.iter().zip(&manifest.script_lines) {
        println!(
            "  [{} {}-{}] {}",
            clip.clip_id, clip.start_s, clip.end_s, line
        );
    }
    println!("manifest: {}", a.out.display());
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> CmdResult {
    let catalogue = load_catalogue(&a.catalogue)?;
    warn_k(a.k, &catalogue);
    let truth = read_ground_truth(
        read_input(&a.truth)?.as_bytes(),
        &a.truth.display().to_string(),
    )?;
    let queries: Vec<String> = truth.keys().cloned().collect();
    let ranked = retrieve(
        &queries,
        &catalogue.captions(),
        &HashedBagOfWords::default(),
        a.k.max(1),
    )?;
    let ids: BTreeMap<String, Vec<String>> = ranked
        .iter()
        .map(|(q, list)| (q.clone(), list.iter().map(|r| r.clip_id.clone()).collect()))
        .collect();
    let mut table = Table::new(
        format!("Recall@k over {} queries", queries.len()),
        &["k", "recall"],
    );
    let mut ks: Vec<usize> = [1, 5, 10].into_iter().filter(|k| *k < a.k).collect();
    ks.push(a.k);
    for k in ks {
        table.push(vec![
            k.to_string(),
            format!("{:.4}", recall_at_k(&ids, &truth, k)?),
        ]);
    }
    if let Some(path) = &a.out {
        let json = serde_json::to_string_pretty(&ranked).expect("rankings serialize");
        fs::write(path, json + "\n")
            .with_context(|| format!("writing {}", path.display()))
            .map_err(|e| Failure::new(EXEC, e))?;
    }
    print_table(&table, a.output.format);
    Ok(())
}

fn cmd_report(a: ReportArgs) -> CmdResult {
    let profile = a
        .profile
        .as_deref()
        .map(DeviceProfile::resolve)
        .transpose()?;
    let table = match a.kind {
        ReportKind::Memory => {
            let ledger: MemoryLedger = match (&a.input, &profile) {
                (Some(path), _) => costmodel::from_toml(&read_input(path)?)?,
                (None, Some(p)) => p.memory.ok_or_else(|| {
                    Failure::new(
                        INVALID,
                        anyhow!("profile `{}` has no memory section", p.name),
                    )
                })?,
                (None, None) => published::memory_ledger(),
            };
            reports::memory_report(&ledger)?
        }
        ReportKind::Energy => {
            let mut inputs: EnergyInputs = match &a.input {
                Some(path) => costmodel::from_toml(&read_input(path)?)?,
                None => published::pixel5a_energy_inputs(),
            };
            if let Some(p) = &profile {
                inputs.power = p.power_w.ok_or_else(|| {
                    Failure::new(
                        INVALID,
                        anyhow!("profile `{}` has no power_w section", p.name),
                    )
                })?;
            }
            reports::energy_report(&inputs)?
        }
        ReportKind::Storage => {
            let artifacts = match &a.input {
                Some(path) => costmodel::read_storage_table(read_input(path)?.as_bytes())?,
                None => published::storage_artifacts(),
            };
            reports::storage_report(&artifacts)
        }
        ReportKind::Layers => {
            let rows = match &a.input {
                Some(path) => costmodel::read_layer_table(read_input(path)?.as_bytes())?,
                None => published::layer_table(),
            };
            reports::layers_report(
                &rows,
                &QuantPolicy::with_kinds(a.quantize.iter().map(String::as_str)),
            )?
        }
    };
    if let Some(path) = &a.out {
        write_table(&table, path)?;
    }
    print_table(&table, a.output.format);
    Ok(())
}
