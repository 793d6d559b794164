//! Memory, layer, storage and energy ledgers.

use std::collections::BTreeSet;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ExecutionMode;

/// Bytes per MB in the layer table (binary megabytes).
const BYTES_PER_MB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("baseline must be > 0 to compute a relative delta")]
    ZeroBaseline,
    #[error("layer table is empty or sums to zero")]
    EmptyTable,
    #[error("layer `{0}` has no parameter count")]
    MissingParamCounts(String),
    #[error("`{name}` must lie in [0, 1) (got {value})")]
    InvalidFraction { name: &'static str, value: f64 },
    #[error("`{name}` must be > 0 (got {value})")]
    NonPositive { name: &'static str, value: f64 },
    #[error("layer table row {row}: {message}")]
    LayerTable { row: usize, message: String },
    #[error("storage table row {row}: {message}")]
    StorageTable { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

/// Peak-memory components of one pipeline run, in GB.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryComponents {
    pub weights_gb: f64,
    pub inputs_gb: f64,
    /// Highest concurrent activation footprint for the mode.
    pub activations_gb: f64,
    /// Highest live load-time temporary allocation for the mode.
    pub misc_load_gb: f64,
}

impl MemoryComponents {
    pub fn new(weights_gb: f64, inputs_gb: f64, activations_gb: f64, misc_load_gb: f64) -> Self {
        Self {
            weights_gb,
            inputs_gb,
            activations_gb,
            misc_load_gb,
        }
    }

    pub fn peak_gb(&self) -> f64 {
        self.weights_gb + self.inputs_gb + self.activations_gb + self.misc_load_gb
    }

    pub fn fields(&self) -> [(&'static str, f64); 4] {
        [
            ("weights_gb", self.weights_gb),
            ("inputs_gb", self.inputs_gb),
            ("activations_gb", self.activations_gb),
            ("misc_load_gb", self.misc_load_gb),
        ]
    }
}

/// Baseline and reuse memory components side by side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryLedger {
    pub baseline: MemoryComponents,
    pub reuse: MemoryComponents,
}

impl MemoryLedger {
    pub fn components(&self, mode: ExecutionMode) -> &MemoryComponents {
        match mode {
            ExecutionMode::SequentialNoReuse => &self.baseline,
            ExecutionMode::ReuseParallel => &self.reuse,
        }
    }

    pub fn peak_memory(&self, mode: ExecutionMode) -> f64 {
        peak_memory(self.components(mode))
    }

    /// Relative change of the peak from baseline to reuse, in percent.
    pub fn peak_delta_pct(&self) -> Result<f64, CostError> {
        memory_delta_pct(self.baseline.peak_gb(), self.reuse.peak_gb())
    }

    /// Relative change of the load-time temporaries, in percent.
    pub fn misc_delta_pct(&self) -> Result<f64, CostError> {
        memory_delta_pct(self.baseline.misc_load_gb, self.reuse.misc_load_gb)
    }
}

/// Peak memory of a run: the sum of its components.
pub fn peak_memory(components: &MemoryComponents) -> f64 {
    components.peak_gb()
}

pub fn memory_delta_pct(baseline_gb: f64, reuse_gb: f64) -> Result<f64, CostError> {
    if baseline_gb <= 0.0 {
        return Err(CostError::ZeroBaseline);
    }
    Ok(100.0 * (reuse_gb - baseline_gb) / baseline_gb)
}

/// One row of a layer-wise parameter table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer_kind: String,
    pub param_count: Option<u64>,
    /// Storage width of a parameter; the policy default applies when absent.
    pub bytes_per_param: Option<f64>,
    pub size_mb: f64,
}

impl LayerRow {
    pub fn new(layer_kind: impl Into<String>, param_count: Option<u64>, size_mb: f64) -> Self {
        Self {
            layer_kind: layer_kind.into(),
            param_count,
            bytes_per_param: None,
            size_mb,
        }
    }

    /// `param_count * bytes_per_param` in MB, when both are known.
    pub fn implied_size_mb(&self, default_bytes: f64) -> Option<f64> {
        self.param_count
            .map(|n| n as f64 * self.bytes_per_param.unwrap_or(default_bytes) / BYTES_PER_MB)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShare {
    pub layer_kind: String,
    pub pct: f64,
}

/// Share of the total size per row; `size_mb` is authoritative.
pub fn layer_percentages(rows: &[LayerRow]) -> Result<Vec<LayerShare>, CostError> {
    let total: f64 = rows.iter().map(|r| r.size_mb).sum();
    if rows.is_empty() || total <= 0.0 {
        return Err(CostError::EmptyTable);
    }
    Ok(rows
        .iter()
        .map(|r| LayerShare {
            layer_kind: r.layer_kind.clone(),
            pct: 100.0 * r.size_mb / total,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantPolicy {
    pub quantized_kinds: BTreeSet<String>,
    pub quantized_bytes_per_param: f64,
    pub default_bytes_per_param: f64,
}

impl Default for QuantPolicy {
    fn default() -> Self {
        Self {
            quantized_kinds: BTreeSet::new(),
            quantized_bytes_per_param: 1.0,
            default_bytes_per_param: 4.0,
        }
    }
}

impl QuantPolicy {
    /// 8-bit Linear and Embedding layers, everything else at 32 bits.
    pub fn linear_and_embedding() -> Self {
        Self::with_kinds(["Linear", "Embedding"])
    }

    pub fn with_kinds<I, S>(kinds: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            quantized_kinds: kinds.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedSize {
    pub original_mb: f64,
    pub quantized_mb: f64,
    /// Share of the printed total size held by quantized layers, in percent.
    pub covered_pct: f64,
}

/// Projected size after quantizing `policy.quantized_kinds`.
///
/// Sizes are projected from parameter counts; the coverage share uses the
/// table's own `size_mb` column.
pub fn quantized_total_mb(
    rows: &[LayerRow],
    policy: &QuantPolicy,
) -> Result<QuantizedSize, CostError> {
    if policy.quantized_bytes_per_param <= 0.0 {
        return Err(CostError::NonPositive {
            name: "quantized_bytes_per_param",
            value: policy.quantized_bytes_per_param,
        });
    }
    if policy.default_bytes_per_param <= 0.0 {
        return Err(CostError::NonPositive {
            name: "default_bytes_per_param",
            value: policy.default_bytes_per_param,
        });
    }
    let mut original_bytes = 0.0;
    let mut quantized_bytes = 0.0;
    for row in rows {
        let params = row
            .param_count
            .ok_or_else(|| CostError::MissingParamCounts(row.layer_kind.clone()))?
            as f64;
        let width = row
            .bytes_per_param
            .unwrap_or(policy.default_bytes_per_param);
        original_bytes += params * width;
        quantized_bytes += if policy.quantized_kinds.contains(&row.layer_kind) {
            params * policy.quantized_bytes_per_param.min(width)
        } else {
            params * width
        };
    }
    let total_size: f64 = rows.iter().map(|r| r.size_mb).sum();
    let covered: f64 = rows
        .iter()
        .filter(|r| policy.quantized_kinds.contains(&r.layer_kind))
        .map(|r| r.size_mb)
        .sum();
    let covered_pct = if total_size > 0.0 {
        100.0 * covered / total_size
    } else {
        0.0
    };
    Ok(QuantizedSize {
        original_mb: original_bytes / BYTES_PER_MB,
        quantized_mb: quantized_bytes / BYTES_PER_MB,
        covered_pct,
    })
}

#[derive(Debug, Deserialize)]
struct LayerRecord {
    layer_kind: String,
    param_count: Option<String>,
    size_mb: f64,
}

/// Parses a param count such as `1236M`, `0.4M`, `51000000` or `2.5B`.
pub fn parse_param_count(raw: &str) -> Option<u64> {
    let raw = raw.trim().replace('_', "");
    if raw.is_empty() {
        return None;
    }
    let (num, scale) = match raw.chars().last()? {
        'K' | 'k' => (&raw[..raw.len() - 1], 1e3),
        'M' | 'm' => (&raw[..raw.len() - 1], 1e6),
        'B' | 'b' | 'G' | 'g' => (&raw[..raw.len() - 1], 1e9),
        _ => (raw.as_str(), 1.0),
    };
    let value: f64 = num.parse().ok()?;
    (value >= 0.0 && value.is_finite()).then(|| (value * scale).round() as u64)
}

/// Reads a CSV layer table with columns `layer_kind,param_count,size_mb`.
pub fn read_layer_table<R: Read>(input: R) -> Result<Vec<LayerRow>, CostError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<LayerRecord>().enumerate() {
        let rec = rec?;
        let param_count = match rec.param_count.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(raw) => Some(parse_param_count(raw).ok_or_else(|| CostError::LayerTable {
                row: i + 1,
                message: format!("cannot parse param_count `{raw}`"),
            })?),
        };
        if !rec.size_mb.is_finite() || rec.size_mb < 0.0 {
            return Err(CostError::LayerTable {
                row: i + 1,
                message: format!("size_mb must be >= 0 (got {})", rec.size_mb),
            });
        }
        rows.push(LayerRow::new(rec.layer_kind, param_count, rec.size_mb));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageArtifact {
    pub name: String,
    pub mb: f64,
}

pub fn storage_total_mb(artifacts: &[StorageArtifact]) -> f64 {
    artifacts.iter().map(|a| a.mb).sum()
}

/// Reads a CSV storage table with columns `name,mb`.
pub fn read_storage_table<R: Read>(input: R) -> Result<Vec<StorageArtifact>, CostError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<StorageArtifact>().enumerate() {
        let rec = rec?;
        if !rec.mb.is_finite() || rec.mb < 0.0 {
            return Err(CostError::StorageTable {
                row: i + 1,
                message: format!("mb must be >= 0 (got {})", rec.mb),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Parses energy inputs or a memory ledger from TOML.
pub fn from_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, CostError> {
    Ok(toml::from_str(text)?)
}

/// Decimal gigabytes, as storage sizes are usually quoted.
pub fn mb_to_gb_decimal(mb: f64) -> f64 {
    mb / 1000.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerProfile {
    pub cpu_w: f64,
    pub dram_w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyInputs {
    pub power: PowerProfile,
    pub t_orig_s: f64,
    pub latency_reduction: f64,
    pub mem_reduction: f64,
    /// Runtime of the optimized pipeline. Derived as
    /// `t_orig_s * (1 - latency_reduction)` when absent.
    #[serde(default)]
    pub t_new_s: Option<f64>,
    /// Round the adjusted powers to this step (e.g. 0.01 W) before
    /// multiplying by time, the way a hand calculation quotes them.
    #[serde(default)]
    pub power_step_w: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub orig_j: f64,
    pub adjusted_cpu_w: f64,
    pub adjusted_dram_w: f64,
    pub t_new_s: f64,
    pub new_j: f64,
    pub savings_pct: f64,
}

/// CPU power scales with the latency reduction, DRAM power with the memory
/// reduction; energy is power times runtime.
pub fn energy_estimate(inputs: &EnergyInputs) -> Result<EnergyEstimate, CostError> {
    for (name, value) in [
        ("latency_reduction", inputs.latency_reduction),
        ("mem_reduction", inputs.mem_reduction),
    ] {
        if !(0.0..1.0).contains(&value) {
            return Err(CostError::InvalidFraction { name, value });
        }
    }
    if inputs.t_orig_s.is_nan() || inputs.t_orig_s <= 0.0 {
        return Err(CostError::NonPositive {
            name: "t_orig_s",
            value: inputs.t_orig_s,
        });
    }
    let p = inputs.power;
    let orig_j = (p.cpu_w + p.dram_w) * inputs.t_orig_s;
    let round = |w: f64| match inputs.power_step_w {
        Some(step) if step > 0.0 => (w / step).round() * step,
        _ => w,
    };
    let adjusted_cpu_w = round(p.cpu_w * (1.0 - inputs.latency_reduction));
    let adjusted_dram_w = round(p.dram_w * (1.0 - inputs.mem_reduction));
    let t_new_s = inputs
        .t_new_s
        .unwrap_or(inputs.t_orig_s * (1.0 - inputs.latency_reduction));
    let new_j = (adjusted_cpu_w + adjusted_dram_w) * t_new_s;
    let savings_pct = if orig_j > 0.0 {
        100.0 * (orig_j - new_j) / orig_j
    } else {
        0.0
    };
    Ok(EnergyEstimate {
        orig_j,
        adjusted_cpu_w,
        adjusted_dram_w,
        t_new_s,
        new_j,
        savings_pct,
    })
}

/// Published per-run estimate for a commodity phone, kept next to the strict
/// recomputation so the two can be shown together.
pub mod published {
    use super::*;

    /// New energy as printed alongside the estimate.
    pub const PRINTED_NEW_J: f64 = 11.9;
    /// Savings as printed (approximate).
    pub const PRINTED_SAVINGS_PCT: f64 = 46.0;

    pub fn pixel5a_energy_inputs() -> EnergyInputs {
        EnergyInputs {
            power: PowerProfile {
                cpu_w: 2.0,
                dram_w: 0.2,
            },
            t_orig_s: 10.0,
            latency_reduction: 0.27,
            mem_reduction: 0.057,
            t_new_s: Some(7.0),
            power_step_w: Some(0.01),
        }
    }

    pub fn memory_ledger() -> MemoryLedger {
        MemoryLedger {
            baseline: MemoryComponents::new(4.623, 0.005, 0.297, 0.352),
            reuse: MemoryComponents::new(4.623, 0.005, 0.479, 0.210),
        }
    }

    pub fn layer_table() -> Vec<LayerRow> {
        vec![
            LayerRow::new("Linear", Some(1_236_000_000), 3689.0),
            LayerRow::new("Embedding", Some(161_000_000), 487.0),
            LayerRow::new("Conv3d", Some(51_000_000), 194.0),
            LayerRow::new("NonDynamicallyQuantizableLinear", Some(49_000_000), 193.0),
            LayerRow::new("LayerNorm", Some(400_000), 2.0),
        ]
    }

    /// Percentages as printed in the layer table.
    pub const LAYER_PCT: [f64; 5] = [80.82, 10.67, 4.25, 4.22, 0.04];

    pub fn storage_artifacts() -> Vec<StorageArtifact> {
        vec![
            StorageArtifact {
                name: "video-language-model".into(),
                mb: 1230.0,
            },
            StorageArtifact {
                name: "sentence-transformer".into(),
                mb: 53.0,
            },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::published::*;
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn peak_memory_matches_ledger() {
        let ledger = memory_ledger();
        assert!(close(
            ledger.peak_memory(ExecutionMode::SequentialNoReuse),
            5.277,
            1e-9
        ));
        assert!(close(
            ledger.peak_memory(ExecutionMode::ReuseParallel),
            5.317,
            1e-9
        ));
        assert_eq!(peak_memory(&MemoryComponents::default()), 0.0);
    }

    #[test]
    fn deltas() {
        let ledger = memory_ledger();
        assert!(close(ledger.peak_delta_pct().unwrap(), 0.758, 0.001));
        assert!(close(ledger.misc_delta_pct().unwrap(), -40.34, 0.01));
        assert_eq!(memory_delta_pct(3.0, 3.0).unwrap(), 0.0);
        assert!(matches!(
            memory_delta_pct(0.0, 1.0),
            Err(CostError::ZeroBaseline)
        ));
    }

    #[test]
    fn layer_shares() {
        let shares = layer_percentages(&layer_table()).unwrap();
        let expected = [80.81, 10.67, 4.25, 4.23, 0.04];
        for (s, e) in shares.iter().zip(expected) {
            assert!(
                close(s.pct, e, 0.005),
                "{} {} vs {}",
                s.layer_kind,
                s.pct,
                e
            );
        }
        let one = layer_percentages(&[LayerRow::new("x", None, 7.0)]).unwrap();
        assert_eq!(one[0].pct, 100.0);
        let two =
            layer_percentages(&[LayerRow::new("a", None, 3.0), LayerRow::new("b", None, 3.0)])
                .unwrap();
        assert_eq!((two[0].pct, two[1].pct), (50.0, 50.0));
        assert!(matches!(layer_percentages(&[]), Err(CostError::EmptyTable)));
    }

    #[test]
    fn quantization_projection() {
        let q = quantized_total_mb(&layer_table(), &QuantPolicy::linear_and_embedding()).unwrap();
        assert!(q.covered_pct > 91.0);
        assert!(close(q.covered_pct, 91.479, 0.001));
        assert!(q.quantized_mb < q.original_mb);

        let identity = quantized_total_mb(&layer_table(), &QuantPolicy::default()).unwrap();
        assert_eq!(identity.quantized_mb, identity.original_mb);
        assert_eq!(identity.covered_pct, 0.0);

        let one = [LayerRow::new("Linear", Some(100), 0.0)];
        let q = quantized_total_mb(&one, &QuantPolicy::with_kinds(["Linear"])).unwrap();
        // 100 params at one byte each.
        assert!(close(q.quantized_mb, 100.0 / 1_048_576.0, 1e-15));
        assert!(close(q.quantized_mb, 9.54e-5, 1e-7));

        let missing = [LayerRow::new("Linear", None, 1.0)];
        assert!(matches!(
            quantized_total_mb(&missing, &QuantPolicy::default()),
            Err(CostError::MissingParamCounts(_))
        ));
    }

    #[test]
    fn layer_table_csv() {
        let text = "layer_kind,param_count,size_mb\n# comment\nLinear,1236M,3689\nLayerNorm,0.4M,2\nMystery,,5\n";
        let rows = read_layer_table(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].param_count, Some(1_236_000_000));
        assert_eq!(rows[1].param_count, Some(400_000));
        assert_eq!(rows[2].param_count, None);
        let bad = "layer_kind,param_count,size_mb\nLinear,lots,3\n";
        assert!(matches!(
            read_layer_table(bad.as_bytes()),
            Err(CostError::LayerTable { row: 1, .. })
        ));
    }

    #[test]
    fn printed_sizes_disagree_with_fp32_counts() {
        // 1236M parameters at four bytes are far more than the printed 3689 MB.
        let row = &layer_table()[0];
        let implied = row.implied_size_mb(4.0).unwrap();
        assert!(implied > 4000.0);
        let bytes_per_param = row.size_mb * 1e6 / row.param_count.unwrap() as f64;
        assert!(close(bytes_per_param, 2.98, 0.01));
    }

    #[test]
    fn storage() {
        let total = storage_total_mb(&storage_artifacts());
        assert_eq!(total, 1283.0);
        assert_eq!(format!("{:.2}", mb_to_gb_decimal(total)), "1.28");
        assert_eq!(storage_total_mb(&[]), 0.0);
        assert_eq!(
            storage_total_mb(&[StorageArtifact {
                name: "x".into(),
                mb: 42.0
            }]),
            42.0
        );
    }

    #[test]
    fn energy_published_example() {
        let e = energy_estimate(&pixel5a_energy_inputs()).unwrap();
        assert!(close(e.orig_j, 22.0, 1e-12));
        assert!(close(e.adjusted_cpu_w, 1.46, 1e-12));
        assert!(close(e.adjusted_dram_w, 0.19, 1e-12));
        assert!(close(e.new_j, 11.55, 1e-9));
        assert!(close(e.savings_pct, 47.5, 1e-9));
        assert!(close(e.savings_pct, PRINTED_SAVINGS_PCT, 2.0));
    }

    #[test]
    fn energy_edge_cases() {
        let base = EnergyInputs {
            power: PowerProfile {
                cpu_w: 2.0,
                dram_w: 0.2,
            },
            t_orig_s: 10.0,
            latency_reduction: 0.0,
            mem_reduction: 0.0,
            t_new_s: None,
            power_step_w: None,
        };
        let e = energy_estimate(&base).unwrap();
        assert_eq!(e.new_j, e.orig_j);
        assert_eq!(e.savings_pct, 0.0);

        let no_dram = EnergyInputs {
            power: PowerProfile {
                cpu_w: 2.0,
                dram_w: 0.0,
            },
            latency_reduction: 0.3,
            ..base.clone()
        };
        let a = energy_estimate(&no_dram).unwrap();
        let b = energy_estimate(&EnergyInputs {
            mem_reduction: 0.5,
            ..no_dram.clone()
        })
        .unwrap();
        assert_eq!(a.savings_pct, b.savings_pct);
        assert!(a.savings_pct > 0.0);

        assert!(matches!(
            energy_estimate(&EnergyInputs {
                latency_reduction: 1.0,
                ..base.clone()
            }),
            Err(CostError::InvalidFraction {
                name: "latency_reduction",
                ..
            })
        ));
        assert!(matches!(
            energy_estimate(&EnergyInputs {
                t_orig_s: 0.0,
                ..base
            }),
            Err(CostError::NonPositive {
                name: "t_orig_s",
                ..
            })
        ));
    }
}
