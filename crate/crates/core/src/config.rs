//! Run configuration as a TOML document with one section per subsystem. Every field has a
//! default, so an empty file is the stock device.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::CacheGeometry;
use crate::cipher::CipherConfig;
use crate::device::{DeviceConfig, DramConfig};
use crate::flash::{FlashGeometry, FlashTimings};
use crate::ftl::{FtlConfig, MappingPlacement};
use crate::secmem::SecMemConfig;
use crate::sim::Nanos;
use crate::tee::RuntimeConfig;
use crate::workloads::{CostModel, WorkloadKind, DEFAULT_PAGES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Host reads the dataset over the external link and computes on the host CPU.
    Host,
    /// Host inside an enclave: host compute scaled by a fixed multiplier.
    HostSgx,
    /// In-storage computing without protection.
    Isc,
    /// In-storage computing inside a TEE with encrypted, verified memory.
    SecureIsc,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Host, Mode::HostSgx, Mode::Isc, Mode::SecureIsc];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Host => "host",
            Mode::HostSgx => "host_sgx",
            Mode::Isc => "isc",
            Mode::SecureIsc => "secure_isc",
        }
    }

    pub fn in_storage(self) -> bool {
        matches!(self, Mode::Isc | Mode::SecureIsc)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlashSection {
    pub geometry: FlashGeometry,
    pub timings: FlashTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeeSection {
    pub create_ns: Nanos,
    pub delete_ns: Nanos,
    /// In-storage cores; TEEs are pinned round-robin and time-sliced when they outnumber cores.
    pub cores: usize,
    pub cpu_ghz: f64,
    pub slice_ns: Nanos,
    /// Pages per flash request issued by a TEE.
    pub io_pages: u32,
    /// Input buffers (of `io_pages` each) a TEE keeps in flight.
    pub ring_slots: u32,
    pub l2: CacheGeometry,
}

impl Default for TeeSection {
    fn default() -> Self {
        let rt = RuntimeConfig::default();
        Self {
            create_ns: rt.create_ns,
            delete_ns: rt.delete_ns,
            cores: 4,
            cpu_ghz: 1.6,
            slice_ns: 100_000,
            io_pages: 256,
            ring_slots: 1,
            l2: CacheGeometry::default(),
        }
    }
}

/// Host-side model. `io_overhead_ns` and `compute_speedup` are calibration knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HostConfig {
    /// Host software cost per request (syscall, file system, copy, completion).
    pub io_overhead_ns: Nanos,
    /// How much faster the host CPU runs a program than the in-storage core.
    pub compute_speedup: f64,
    /// Compute slowdown inside a host enclave.
    pub sgx_multiplier: f64,
    /// Pages per host read request.
    pub request_pages: u32,
    pub queue_depth: u32,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self { io_overhead_ns: 160_000, compute_speedup: 2.47, sgx_multiplier: 2.03, request_pages: 32, queue_depth: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    /// Dataset size per workload, in 4KB pages.
    pub dataset_pages: u32,
    pub costs: CostModel,
    pub host: HostConfig,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self { dataset_pages: DEFAULT_PAGES, costs: CostModel::default(), host: HostConfig::default() }
    }
}

/// What `run` executes: the cross product of workloads and modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub workloads: Vec<WorkloadKind>,
    pub modes: Vec<Mode>,
    pub baseline: Mode,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 42, workloads: WorkloadKind::ALL.to_vec(), modes: Mode::ALL.to_vec(), baseline: Mode::Host }
    }
}

/// Axes for `sweep`. An empty axis is left at the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub channels: Vec<u32>,
    pub t_rd_us: Vec<u64>,
    pub cpu_ghz: Vec<f64>,
    pub dram_gb: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { channels: vec![4, 8, 16, 32], t_rd_us: vec![], cpu_ghz: vec![], dram_gb: vec![] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub flash: FlashSection,
    pub ftl: FtlConfig,
    pub mem_protect: DramConfig,
    pub secure_memory: SecMemConfig,
    pub cipher: CipherConfig,
    pub tee_runtime: TeeSection,
    pub workloads: WorkloadSection,
    pub run: RunSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.flash.geometry.validate().map_err(|e| invalid("flash.geometry", e.to_string()))?;
        self.flash.timings.validate().map_err(|e| invalid("flash.timings", e.to_string()))?;
        self.ftl.validate().map_err(|e| invalid("ftl", e.to_string()))?;
        let t = &self.tee_runtime;
        if t.cores == 0 {
            return Err(invalid("tee_runtime.cores", "must be >= 1"));
        }
        if !(t.cpu_ghz > 0.0) {
            return Err(invalid("tee_runtime.cpu_ghz", "must be positive"));
        }
        if t.io_pages == 0 || t.ring_slots == 0 {
            return Err(invalid("tee_runtime.io_pages", "io_pages and ring_slots must be >= 1"));
        }
        if t.slice_ns == 0 {
            return Err(invalid("tee_runtime.slice_ns", "must be positive"));
        }
        if t.l2.bytes < 64 * t.l2.ways as u64 || t.l2.ways == 0 || !t.l2.sets().is_power_of_two() {
            return Err(invalid("tee_runtime.l2", "need a power-of-two number of 64-byte sets"));
        }
        let ring = t.ring_slots as u64 * t.io_pages as u64 * 4096;
        let biggest = WorkloadKind::ALL.iter().map(|k| k.heap_bytes() + k.code_bytes()).max().unwrap();
        if ring + biggest + 4096 > self.mem_protect.tee_region_bytes {
            return Err(invalid(
                "mem_protect.tee_region_bytes",
                format!("{} bytes cannot hold the input ring ({ring}) plus the largest program", self.mem_protect.tee_region_bytes),
            ));
        }
        let w = &self.workloads;
        if w.dataset_pages == 0 {
            return Err(invalid("workloads.dataset_pages", "must be >= 1"));
        }
        if w.dataset_pages as u64 * 4 > self.ftl.logical_pages as u64 {
            return Err(invalid("workloads.dataset_pages", "four tenants' datasets must fit the logical space"));
        }
        if !(w.host.compute_speedup > 0.0) || !(w.host.sgx_multiplier >= 1.0) || w.host.queue_depth == 0 || w.host.request_pages == 0 {
            return Err(invalid("workloads.host", "compute_speedup > 0, sgx_multiplier >= 1, queue_depth and request_pages >= 1"));
        }
        if self.run.workloads.is_empty() || self.run.modes.is_empty() {
            return Err(invalid("run", "need at least one workload and one mode"));
        }
        if self.sweep.channels.iter().any(|&c| c == 0) {
            return Err(invalid("sweep.channels", "channel counts must be >= 1"));
        }
        if self.sweep.t_rd_us.iter().any(|&t| t == 0) {
            return Err(invalid("sweep.t_rd_us", "latencies must be >= 1"));
        }
        Ok(())
    }

    /// Device as seen by `mode`. Only the protected mode keeps the configured mapping-table
    /// placement; the unprotected baselines run a plain firmware table.
    pub fn device_config(&self, mode: Mode) -> DeviceConfig {
        let mut ftl = self.ftl.clone();
        if mode != Mode::SecureIsc {
            ftl.placement = MappingPlacement::Firmware;
        }
        DeviceConfig {
            geometry: self.flash.geometry,
            timings: self.flash.timings,
            ftl,
            dram: self.mem_protect.clone(),
            secmem: self.secure_memory.clone(),
            cipher: self.cipher.clone(),
            l2: self.tee_runtime.l2,
            cores: self.tee_runtime.cores,
            cpu_ghz: self.tee_runtime.cpu_ghz,
        }
    }

    pub fn runtime_config(&self, mode: Mode) -> RuntimeConfig {
        if mode == Mode::SecureIsc {
            RuntimeConfig { create_ns: self.tee_runtime.create_ns, delete_ns: self.tee_runtime.delete_ns }
        } else {
            RuntimeConfig { create_ns: 0, delete_ns: 0 }
        }
    }
}
