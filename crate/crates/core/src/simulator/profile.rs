//! Device profiles: measured component latencies, published end-to-end
//! figures, memory components and power draw for one platform.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{MemoryLedger, PowerProfile};
use crate::Task;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("cannot read profile {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed profile: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid profile field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unknown built-in profile `{0}`")]
    UnknownBuiltin(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadTimes {
    /// Model loading figure of the no-reuse baseline.
    pub baseline_total: f64,
    /// Model loading figure with persistent modules, paid once per run.
    pub reuse_total: f64,
    /// The baseline pays `baseline_total / baseline_split` at each of its load
    /// points. The default of 1 charges the full figure at every point.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub baseline_split: u32,
}

fn one() -> u32 {
    1
}

fn is_one(v: &u32) -> bool {
    *v == 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTimes {
    pub video_encode: f64,
    pub caption_decode: f64,
    pub indexing: f64,
    pub script_generation: f64,
}

impl StageTimes {
    pub fn aggregate(&self, task: Task) -> f64 {
        match task {
            Task::Retrieval => self.indexing,
            Task::Assembly => self.script_generation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModePair {
    pub baseline: f64,
    pub reuse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportedEndToEnd {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<ModePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assembly: Option<ModePair>,
}

impl ReportedEndToEnd {
    pub fn get(&self, task: Task) -> Option<ModePair> {
        match task {
            Task::Retrieval => self.retrieval,
            Task::Assembly => self.assembly,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    pub load_s: LoadTimes,
    pub stage_s: StageTimes,
    #[serde(default)]
    pub reported_e2e_s: ReportedEndToEnd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryLedger>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_w: Option<PowerProfile>,
}

const BUILTIN: &[(&str, &str)] = &[
    ("pixel5a", include_str!("../../profiles/pixel5a.toml")),
    ("pixel8a", include_str!("../../profiles/pixel8a.toml")),
    ("galaxy-s23", include_str!("../../profiles/galaxy-s23.toml")),
    ("server-cpu", include_str!("../../profiles/server-cpu.toml")),
    ("server-gpu", include_str!("../../profiles/server-gpu.toml")),
    (
        "server-cpu-int8",
        include_str!("../../profiles/server-cpu-int8.toml"),
    ),
    (
        "server-gpu-int8",
        include_str!("../../profiles/server-gpu-int8.toml"),
    ),
];

impl DeviceProfile {
    pub fn from_toml_str(text: &str) -> Result<Self, ProfileError> {
        let profile: DeviceProfile = toml::from_str(text)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn from_path(path: &Path) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    /// Names of the profiles shipped with the crate.
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(name, _)| *name)
    }

    pub fn builtin(name: &str) -> Result<Self, ProfileError> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ProfileError::UnknownBuiltin(name.to_string()))?;
        Self::from_toml_str(text)
    }

    /// Loads a built-in profile by name, or a profile file by path.
    pub fn resolve(name_or_path: &str) -> Result<Self, ProfileError> {
        match Self::builtin(name_or_path) {
            Ok(p) => Ok(p),
            Err(ProfileError::UnknownBuiltin(_)) => Self::from_path(Path::new(name_or_path)),
            Err(e) => Err(e),
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let invalid = |field: &str, reason: String| ProfileError::Invalid {
            field: field.to_string(),
            reason,
        };
        let mut values: Vec<(String, f64)> = vec![
            ("load_s.baseline_total".into(), self.load_s.baseline_total),
            ("load_s.reuse_total".into(), self.load_s.reuse_total),
            ("stage_s.video_encode".into(), self.stage_s.video_encode),
            ("stage_s.caption_decode".into(), self.stage_s.caption_decode),
            ("stage_s.indexing".into(), self.stage_s.indexing),
            (
                "stage_s.script_generation".into(),
                self.stage_s.script_generation,
            ),
        ];
        for task in Task::ALL {
            if let Some(pair) = self.reported_e2e_s.get(task) {
                values.push((format!("reported_e2e_s.{task}.baseline"), pair.baseline));
                values.push((format!("reported_e2e_s.{task}.reuse"), pair.reuse));
            }
        }
        if let Some(mem) = &self.memory {
            for (side, comps) in [("baseline", &mem.baseline), ("reuse", &mem.reuse)] {
                for (field, v) in comps.fields() {
                    values.push((format!("memory.{side}.{field}"), v));
                }
            }
        }
        if let Some(p) = &self.power_w {
            values.push(("power_w.cpu_w".into(), p.cpu_w));
            values.push(("power_w.dram_w".into(), p.dram_w));
        }
        for (field, v) in values {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(
                    &field,
                    format!("must be a finite value >= 0 (got {v})"),
                ));
            }
        }
        if self.load_s.reuse_total > self.load_s.baseline_total {
            return Err(invalid(
                "load_s.reuse_total",
                format!(
                    "exceeds load_s.baseline_total ({} > {})",
                    self.load_s.reuse_total, self.load_s.baseline_total
                ),
            ));
        }
        if self.load_s.baseline_split == 0 {
            return Err(invalid("load_s.baseline_split", "must be >= 1".into()));
        }
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_validate() {
        for name in DeviceProfile::builtin_names() {
            let p = DeviceProfile::builtin(name).unwrap();
            assert!(p.reported_e2e_s.retrieval.is_some(), "{name}");
            assert!(p.reported_e2e_s.assembly.is_some(), "{name}");
        }
        assert_eq!(DeviceProfile::builtin_names().count(), 7);
    }

    #[test]
    fn pixel5a_values() {
        let p = DeviceProfile::builtin("pixel5a").unwrap();
        assert_eq!(p.load_s.baseline_total, 32.94);
        assert_eq!(p.load_s.baseline_split, 1);
        assert_eq!(p.stage_s.aggregate(Task::Assembly), 26.61);
        assert_eq!(p.memory.unwrap().reuse.activations_gb, 0.479);
        assert_eq!(p.power_w.unwrap().cpu_w, 2.0);
    }

    #[test]
    fn toml_round_trip() {
        let p = DeviceProfile::builtin("pixel5a").unwrap();
        let again = DeviceProfile::from_toml_str(&p.to_toml_string()).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn malformed_profiles_name_the_field() {
        let text = include_str!("../../profiles/pixel8a.toml")
            .replace("video_encode = 6.34", "video_encode = -1.0");
        let err = DeviceProfile::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("stage_s.video_encode"), "{err}");

        let text =
            include_str!("../../profiles/pixel8a.toml").replace("caption_decode = 4.22\n", "");
        let err = DeviceProfile::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("caption_decode"), "{err}");

        let text = include_str!("../../profiles/pixel8a.toml")
            .replace("reuse_total = 15.87", "reuse_total = 99.0");
        let err = DeviceProfile::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("load_s.reuse_total"), "{err}");

        let text = include_str!("../../profiles/pixel8a.toml").replace("indexing", "indexng");
        let err = DeviceProfile::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("indexng"), "{err}");
    }
}
