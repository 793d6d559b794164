//! Module lifecycle: registration, load-once residency and load accounting.
//!
//! A module moves `Unloaded -> Loading -> Resident`. Under
//! [`ExecutionMode::ReuseParallel`] it then stays resident for the lifetime
//! of the registry; under [`ExecutionMode::SequentialNoReuse`] a release
//! returns it to `Unloaded` and the next acquire pays the load again.

use std::collections::BTreeMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ExecutionMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("module `{0}` is already registered")]
    DuplicateId(String),
    #[error("unknown module `{0}`")]
    UnknownId(String),
    #[error("module `{0}` is not resident")]
    NotResident(String),
    #[error("module `{id}`: field `{field}` must be a finite value >= 0 (got {value})")]
    InvalidField {
        id: String,
        field: &'static str,
        value: f64,
    },
    #[error("module id must not be empty")]
    EmptyId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleRole {
    VideoEncoder,
    TextDecoder,
    Embedder,
    Aggregate,
}

/// A loadable pipeline module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleDescriptor {
    pub id: String,
    pub role: ModuleRole,
    /// Size of the weights in MB (1 GB = 1000 MB).
    pub weight_size_mb: f64,
    /// Device-specific load time in seconds.
    pub load_latency_s: f64,
    pub activation_peak_gb: f64,
    /// Transient buffers that only exist while the module is loading.
    pub load_temp_gb: f64,
}

impl ModuleDescriptor {
    pub fn new(id: impl Into<String>, role: ModuleRole) -> Self {
        Self {
            id: id.into(),
            role,
            weight_size_mb: 0.0,
            load_latency_s: 0.0,
            activation_peak_gb: 0.0,
            load_temp_gb: 0.0,
        }
    }

    pub fn with_weight_mb(mut self, mb: f64) -> Self {
        self.weight_size_mb = mb;
        self
    }

    pub fn with_load_latency(mut self, secs: f64) -> Self {
        self.load_latency_s = secs;
        self
    }

    pub fn with_activation_gb(mut self, gb: f64) -> Self {
        self.activation_peak_gb = gb;
        self
    }

    pub fn with_load_temp_gb(mut self, gb: f64) -> Self {
        self.load_temp_gb = gb;
        self
    }

    fn validate(&self) -> Result<(), RegistryError> {
        if self.id.is_empty() {
            return Err(RegistryError::EmptyId);
        }
        let fields = [
            ("weight_size_mb", self.weight_size_mb),
            ("load_latency_s", self.load_latency_s),
            ("activation_peak_gb", self.activation_peak_gb),
            ("load_temp_gb", self.load_temp_gb),
        ];
        for (field, value) in fields {
            if !value.is_finite() || value < 0.0 {
                return Err(RegistryError::InvalidField {
                    id: self.id.clone(),
                    field,
                    value,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidencyState {
    Unloaded,
    Loading,
    Resident,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residency {
    pub state: ResidencyState,
    pub load_count: u32,
    pub last_load_start_s: Option<f64>,
    pub last_load_end_s: Option<f64>,
}

impl Residency {
    fn fresh() -> Self {
        Self {
            state: ResidencyState::Unloaded,
            load_count: 0,
            last_load_start_s: None,
            last_load_end_s: None,
        }
    }
}

/// Result of [`ModuleRegistry::acquire`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AcquireOutcome {
    AlreadyResident,
    /// The module was loaded by this call; the caller charges this many
    /// seconds to the run clock.
    LoadedNow(f64),
}

impl AcquireOutcome {
    pub fn load_seconds(self) -> f64 {
        match self {
            AcquireOutcome::AlreadyResident => 0.0,
            AcquireOutcome::LoadedNow(s) => s,
        }
    }
}

/// Handle returned by registration.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModuleHandle(String);

impl ModuleHandle {
    pub fn id(&self) -> &str {
        &self.0
    }
}

#[derive(Debug)]
struct Entry {
    desc: ModuleDescriptor,
    residency: Residency,
}

/// Shared-read, exclusive-write registry of pipeline modules.
#[derive(Debug, Default)]
pub struct ModuleRegistry {
    entries: RwLock<BTreeMap<String, Entry>>,
}

impl ModuleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, desc: ModuleDescriptor) -> Result<ModuleHandle, RegistryError> {
        desc.validate()?;
        let mut entries = self.entries.write().expect("registry lock poisoned");
        if entries.contains_key(&desc.id) {
            return Err(RegistryError::DuplicateId(desc.id));
        }
        let id = desc.id.clone();
        entries.insert(
            id.clone(),
            Entry {
                desc,
                residency: Residency::fresh(),
            },
        );
        Ok(ModuleHandle(id))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries
            .read()
            .expect("registry lock poisoned")
            .contains_key(id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries
            .read()
            .expect("registry lock poisoned")
            .keys()
            .cloned()
            .collect()
    }

    pub fn descriptor(&self, id: &str) -> Result<ModuleDescriptor, RegistryError> {
        self.entries
            .read()
            .expect("registry lock poisoned")
            .get(id)
            .map(|e| e.desc.clone())
            .ok_or_else(|| RegistryError::UnknownId(id.to_string()))
    }

    pub fn residency(&self, id: &str) -> Result<Residency, RegistryError> {
        self.entries
            .read()
            .expect("registry lock poisoned")
            .get(id)
            .map(|e| e.residency.clone())
            .ok_or_else(|| RegistryError::UnknownId(id.to_string()))
    }

    /// Makes `id` resident, loading it if needed.
    ///
    /// The load is charged atomically: the module passes through `Loading`
    /// and ends `Resident` within this call, with its load window recorded as
    /// `[now_s, now_s + load_latency_s]`. A module that is already resident
    /// is never reloaded, whatever the mode; in sequential mode the caller
    /// releases modules at stage-group boundaries so the next acquire loads.
    pub fn acquire(
        &self,
        id: &str,
        _mode: ExecutionMode,
        now_s: f64,
    ) -> Result<AcquireOutcome, RegistryError> {
        let mut entries = self.entries.write().expect("registry lock poisoned");
        let entry = entries
            .get_mut(id)
            .ok_or_else(|| RegistryError::UnknownId(id.to_string()))?;
        match entry.residency.state {
            ResidencyState::Resident | ResidencyState::Loading => {
                Ok(AcquireOutcome::AlreadyResident)
            }
            ResidencyState::Unloaded => {
                let latency = entry.desc.load_latency_s;
                let r = &mut entry.residency;
                r.state = ResidencyState::Loading;
                r.load_count += 1;
                r.last_load_start_s = Some(now_s);
                r.last_load_end_s = Some(now_s + latency);
                r.state = ResidencyState::Resident;
                Ok(AcquireOutcome::LoadedNow(latency))
            }
        }
    }

    /// Releases a resident module. A no-op in reuse mode.
    pub fn release(&self, id: &str, mode: ExecutionMode) -> Result<(), RegistryError> {
        let mut entries = self.entries.write().expect("registry lock poisoned");
        let entry = entries
            .get_mut(id)
            .ok_or_else(|| RegistryError::UnknownId(id.to_string()))?;
        if entry.residency.state != ResidencyState::Resident {
            return Err(RegistryError::NotResident(id.to_string()));
        }
        if mode == ExecutionMode::SequentialNoReuse {
            entry.residency.state = ResidencyState::Unloaded;
        }
        Ok(())
    }

    /// Sum of the weights of every resident module, in GB.
    pub fn resident_weights_gb(&self) -> f64 {
        let mb: f64 = self
            .entries
            .read()
            .expect("registry lock poisoned")
            .values()
            .filter(|e| e.residency.state == ResidencyState::Resident)
            .map(|e| e.desc.weight_size_mb)
            .sum();
        mb / 1000.0
    }

    /// Largest transient load buffer of any registered module.
    ///
    /// Loads never overlap each other or stage execution, so the peak of the
    /// load-time allocations is a maximum, not a sum.
    pub fn peak_load_temp_gb(&self) -> f64 {
        self.entries
            .read()
            .expect("registry lock poisoned")
            .values()
            .map(|e| e.desc.load_temp_gb)
            .fold(0.0, f64::max)
    }

    /// Total number of loads performed so far.
    pub fn total_loads(&self) -> u32 {
        self.entries
            .read()
            .expect("registry lock poisoned")
            .values()
            .map(|e| e.residency.load_count)
            .sum()
    }
}
