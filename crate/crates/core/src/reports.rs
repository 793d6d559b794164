//! Tabular reports.
//!
//! Every report is a [`Table`] of preformatted cells. It renders as aligned
//! text for people and as flat CSV (title and notes as leading `#` lines)
//! for plotting tools. Reading the CSV back and writing it again gives the
//! same bytes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{
    energy_estimate, layer_percentages, mb_to_gb_decimal, published, quantized_total_mb,
    storage_total_mb, CostError, EnergyInputs, LayerRow, MemoryLedger, QuantPolicy,
    StorageArtifact,
};
use crate::simulator::{
    reduction_pct, reported_reduction, simulate, Calibration, DeviceProfile, Metric, SimConfig,
    SimError, StageTimings,
};
use crate::{ExecutionMode, Task};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("malformed table: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Cell at `row` under `column`.
    pub fn cell(&self, row: usize, column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.get(row).map(|r| r[c].as_str())
    }

    /// First row whose first cell equals `key`.
    pub fn row(&self, key: &str) -> Option<&[String]> {
        self.rows
            .iter()
            .find(|r| r.first().map(String::as_str) == Some(key))
            .map(Vec::as_slice)
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(s, "{cell:<w$}");
                } else {
                    let _ = write!(s, "  {cell:>w$}");
                }
            }
            s.trim_end().to_string()
        };
        let mut out = String::new();
        if !self.title.is_empty() {
            out.push_str(&self.title);
            out.push('\n');
        }
        out.push_str(&line(&self.columns));
        out.push('\n');
        out.push_str(
            &widths
                .iter()
                .map(|w| "-".repeat(*w))
                .collect::<Vec<_>>()
                .join("  "),
        );
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        for n in &self.notes {
            out.push_str("note: ");
            out.push_str(n);
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in std::iter::once(&self.title).chain(&self.notes) {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf8"));
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, ReportError> {
        let mut comments = Vec::new();
        let mut rest = text;
        while let Some(line) = rest.strip_prefix("# ") {
            let end = line.find('\n').unwrap_or(line.len());
            comments.push(line[..end].to_string());
            rest = line.get(end + 1..).unwrap_or("");
        }
        if comments.is_empty() {
            return Err(ReportError::Malformed("missing `# title` line".into()));
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(rest.as_bytes());
        let columns: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(String::from).collect());
        }
        let title = comments.remove(0);
        Ok(Self {
            title,
            columns,
            rows,
            notes: comments,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }
}

fn f2(v: f64) -> String {
    format!("{v:.2}")
}

fn f3(v: f64) -> String {
    format!("{v:.3}")
}

fn signed_pct(v: f64) -> String {
    format!("{v:+.2}%")
}

/// Component and end-to-end latencies for one device, simulated next to
/// the published figures.
pub fn simulate_report(profile: &DeviceProfile, config: &SimConfig) -> Result<Table, ReportError> {
    let mut t = Table::new(
        format!("{}: latency (s), N={}", profile.name, config.n_items),
        &[
            "metric",
            "scope",
            "sim_baseline_s",
            "sim_reuse_s",
            "sim_reduction_pct",
            "reported_baseline_s",
            "reported_reuse_s",
            "reported_reduction_pct",
        ],
    );
    let seq =
        |task| StageTimings::for_profile(profile, task, config, ExecutionMode::SequentialNoReuse);
    let par = |task| StageTimings::for_profile(profile, task, config, ExecutionMode::ReuseParallel);
    let (lb, lr) = (
        seq(Task::Retrieval).load_total.as_secs_f64(),
        par(Task::Retrieval).load_total.as_secs_f64(),
    );
    let loading = reported_reduction(profile, Metric::ModelLoading)?;
    t.push(vec![
        "model_loading".into(),
        "component".into(),
        f2(lb),
        f2(lr),
        f2(reduction_pct(lb, lr)),
        f2(loading.baseline_s),
        f2(loading.reuse_s),
        f2(loading.reduction_pct),
    ]);
    let s = &profile.stage_s;
    for (name, v) in [
        ("video_encode", s.video_encode),
        ("caption_decode", s.caption_decode),
        ("indexing", s.indexing),
        ("script_generation", s.script_generation),
    ] {
        t.push(vec![
            name.into(),
            "component".into(),
            f2(v),
            f2(v),
            f2(0.0),
            String::new(),
            f2(v),
            String::new(),
        ]);
    }
    for task in Task::ALL {
        let b = simulate(profile, task, config, ExecutionMode::SequentialNoReuse)?.makespan_s;
        let r = simulate(profile, task, config, ExecutionMode::ReuseParallel)?.makespan_s;
        let (rb, rr, rp) = match reported_reduction(profile, task.into()) {
            Ok(c) => (f2(c.baseline_s), f2(c.reuse_s), f2(c.reduction_pct)),
            Err(SimError::MissingReportedData { .. }) => {
                (String::new(), String::new(), String::new())
            }
            Err(e) => return Err(e.into()),
        };
        t.push(vec![
            task.as_str().into(),
            "end_to_end".into(),
            f2(b),
            f2(r),
            f2(reduction_pct(b, r)),
            rb,
            rr,
            rp,
        ]);
    }
    if profile.load_s.baseline_split != 1 {
        t.note(format!(
            "baseline loads charge 1/{} of the baseline figure per load point",
            profile.load_s.baseline_split
        ));
    }
    Ok(t)
}

/// Published reductions for several devices, one row per device.
pub fn reported_table(profiles: &[DeviceProfile]) -> Result<Table, ReportError> {
    let mut t = Table::new(
        "reported reductions (%)",
        &[
            "device",
            "model_loading_pct",
            "retrieval_pct",
            "assembly_pct",
        ],
    );
    for p in profiles {
        let mut row = vec![p.name.clone()];
        for m in Metric::ALL {
            row.push(match reported_reduction(p, m) {
                Ok(c) => f2(c.reduction_pct),
                Err(SimError::MissingReportedData { .. }) => String::new(),
                Err(e) => return Err(e.into()),
            });
        }
        t.push(row);
    }
    Ok(t)
}

pub fn calibration_report(cals: &[Calibration]) -> Table {
    let mut t = Table::new(
        "per-item overhead fit to the published reuse figure",
        &[
            "device",
            "task",
            "ideal_reuse_s",
            "reported_reuse_s",
            "overhead_s",
            "fitted_reuse_s",
            "residual_s",
            "fitted_baseline_s",
        ],
    );
    for c in cals {
        t.push(vec![
            c.device.clone(),
            c.task.to_string(),
            f2(c.ideal_reuse_s),
            f2(c.reported_reuse_s),
            f3(c.per_item_overhead_s),
            f2(c.calibrated_reuse_s),
            f3(c.residual_s),
            f2(c.calibrated_baseline_s),
        ]);
    }
    t
}

pub fn memory_report(ledger: &MemoryLedger) -> Result<Table, ReportError> {
    let mut t = Table::new(
        "peak memory (GB)",
        &["component", "baseline_gb", "reuse_gb", "delta_pct"],
    );
    for ((name, b), (_, r)) in ledger
        .baseline
        .fields()
        .into_iter()
        .zip(ledger.reuse.fields())
    {
        let delta = if b > 0.0 {
            signed_pct(100.0 * (r - b) / b)
        } else {
            String::new()
        };
        t.push(vec![name.into(), f3(b), f3(r), delta]);
    }
    t.push(vec![
        "peak".into(),
        f3(ledger.peak_memory(ExecutionMode::SequentialNoReuse)),
        f3(ledger.peak_memory(ExecutionMode::ReuseParallel)),
        signed_pct(ledger.peak_delta_pct()?),
    ]);
    Ok(t)
}

pub fn energy_report(inputs: &EnergyInputs) -> Result<Table, ReportError> {
    let e = energy_estimate(inputs)?;
    let mut t = Table::new("energy per run", &["quantity", "value", "unit"]);
    let rows: [(&str, String, &str); 8] = [
        ("orig_energy", f2(e.orig_j), "J"),
        ("adjusted_cpu_power", f2(e.adjusted_cpu_w), "W"),
        ("adjusted_dram_power", f2(e.adjusted_dram_w), "W"),
        ("new_runtime", f2(e.t_new_s), "s"),
        ("new_energy_strict", f2(e.new_j), "J"),
        ("savings_strict", f2(e.savings_pct), "%"),
        ("new_energy_printed", f2(published::PRINTED_NEW_J), "J"),
        ("savings_printed", f2(published::PRINTED_SAVINGS_PCT), "%"),
    ];
    for (q, v, u) in rows {
        t.push(vec![q.into(), v, u.into()]);
    }
    if (e.new_j - published::PRINTED_NEW_J).abs() >= 0.005 {
        t.note(format!(
            "strict recomputation gives {:.2} J; the published estimate prints {:.1} J",
            e.new_j,
            published::PRINTED_NEW_J
        ));
    }
    Ok(t)
}

pub fn storage_report(artifacts: &[StorageArtifact]) -> Table {
    let mut t = Table::new("on-device storage", &["artifact", "size_mb", "size_gb"]);
    for a in artifacts {
        t.push(vec![
            a.name.clone(),
            format!("{}", a.mb),
            f2(mb_to_gb_decimal(a.mb)),
        ]);
    }
    let total = storage_total_mb(artifacts);
    t.push(vec![
        "total".into(),
        format!("{total}"),
        f2(mb_to_gb_decimal(total)),
    ]);
    t
}

pub fn layers_report(rows: &[LayerRow], policy: &QuantPolicy) -> Result<Table, ReportError> {
    let shares = layer_percentages(rows)?;
    let mut t = Table::new(
        "memory by layer type",
        &["layer_kind", "param_count", "size_mb", "pct"],
    );
    for (row, share) in rows.iter().zip(&shares) {
        t.push(vec![
            row.layer_kind.clone(),
            row.param_count.map(|p| p.to_string()).unwrap_or_default(),
            format!("{}", row.size_mb),
            f2(share.pct),
        ]);
    }
    let total: f64 = rows.iter().map(|r| r.size_mb).sum();
    t.push(vec![
        "total".into(),
        String::new(),
        format!("{total}"),
        f2(shares.iter().map(|s| s.pct).sum()),
    ]);
    if let Ok(q) = quantized_total_mb(rows, policy) {
        let kinds: Vec<&str> = policy.quantized_kinds.iter().map(String::as_str).collect();
        t.note(format!(
            "quantizing {} covers {:.2}% of layer memory; parameter storage {:.1} MB -> {:.1} MB",
            kinds.join("+"),
            q.covered_pct,
            q.original_mb,
            q.quantized_mb
        ));
    }
    Ok(t)
}
