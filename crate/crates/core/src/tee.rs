//! In-storage TEE lifecycle: creation with ID assignment, exception handling, termination and
//! result return. Every operation charges its cost to the caller's timeline and returns it.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::Device;
use crate::flash::transfer_ns;
use crate::ftl::{FtlError, Translation};
use crate::protect::{AccessContext, AccessMode};
use crate::secmem::{PagePermission, PAGE_BYTES};
use crate::sim::Nanos;

pub const CREATE_NS: Nanos = 95_000;
pub const DELETE_NS: Nanos = 58_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TeeState {
    Creating,
    Running,
    Aborted,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AbortReason {
    AccessViolation,
    MemoryCorruption,
    ProgramException,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub eid: u8,
    pub tid: Option<u64>,
    pub reason: AbortReason,
    pub message: String,
    pub at: Nanos,
}

/// Stand-in for offloaded machine code: a program name plus its nominal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramImage {
    pub name: String,
    pub code_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffloadRequest {
    pub bin: ProgramImage,
    pub lpa: Vec<u32>,
    pub args: Vec<u8>,
    pub tid: u64,
}

/// Argument of CreateTEE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeeConfig {
    pub program: ProgramImage,
    pub grant: Vec<u32>,
    /// Heap the program needs on top of its code.
    pub memory_quota: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeeDescriptor {
    pub eid: u8,
    pub tid: Option<u64>,
    pub state: TeeState,
    pub program: ProgramImage,
    pub lpa_grant: Vec<u32>,
    /// 16MB window in normal DRAM.
    pub region: Range<u64>,
    /// Descriptor and result buffer in secure DRAM.
    pub metadata: Range<u64>,
    pub result: Option<Vec<u8>>,
    pub abort: Option<AbortRecord>,
    pub created_at: Nanos,
    pub reclaimed: bool,
}

impl TeeDescriptor {
    fn slot(&self) -> u8 {
        self.eid - 1
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TeeError {
    #[error("all TEE ids are in use")]
    NoFreeId,
    #[error("program needs {need} bytes but a TEE region holds {available}")]
    OutOfMemory { need: u64, available: u64 },
    #[error("no live TEE with id {0}")]
    UnknownTee(u8),
    #[error("unknown task id {0}")]
    UnknownTid(u64),
    #[error("task id {0} is already in flight")]
    DuplicateTid(u64),
    #[error("task {0} has not finished")]
    NotFinished(u64),
    #[error("TEE aborted: {0:?}")]
    Aborted(AbortRecord),
    #[error("TEE {eid} cannot go from {from:?} to {to:?}")]
    InvalidTransition { eid: u8, from: TeeState, to: TeeState },
    #[error("result of {len} bytes exceeds the metadata buffer")]
    ResultTooLarge { len: usize },
    #[error(transparent)]
    Ftl(#[from] FtlError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub created: u64,
    pub terminated: u64,
    pub aborted: u64,
    pub create_ns: Nanos,
    pub delete_ns: Nanos,
    pub result_ns: Nanos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeConfig {
    pub create_ns: Nanos,
    pub delete_ns: Nanos,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self { create_ns: CREATE_NS, delete_ns: DELETE_NS }
    }
}

/// Bytes of the metadata slot reserved for the descriptor itself; the rest is result buffer.
const DESCRIPTOR_BYTES: u64 = 4096;

#[derive(Debug, Default)]
pub struct TeeRuntime {
    cfg: RuntimeConfig,
    live: BTreeMap<u8, TeeDescriptor>,
    tids: HashMap<u64, u8>,
    retired: HashMap<u64, TeeDescriptor>,
    aborts: Vec<AbortRecord>,
    stats: RuntimeStats,
}

impl TeeRuntime {
    pub fn new(cfg: RuntimeConfig) -> Self {
        Self { cfg, ..Default::default() }
    }

    pub fn stats(&self) -> RuntimeStats {
        self.stats
    }

    pub fn aborts(&self) -> &[AbortRecord] {
        &self.aborts
    }

    pub fn descriptor(&self, eid: u8) -> Option<&TeeDescriptor> {
        self.live.get(&eid)
    }

    pub fn live(&self) -> impl Iterator<Item = &TeeDescriptor> {
        self.live.values()
    }

    pub fn eid_of(&self, tid: u64) -> Option<u8> {
        self.tids.get(&tid).copied()
    }

    fn free_eid(&self, max: u8) -> Option<u8> {
        (1..=max).find(|e| !self.live.contains_key(e))
    }

    /// CreateTEE: lowest free id, preallocated region, ID bits stamped on the grant list.
    pub fn create_tee(&mut self, dev: &mut Device, cfg: TeeConfig, now: Nanos) -> Result<(u8, Nanos), TeeError> {
        let avail = dev.layout.slot_bytes;
        let need = cfg.program.code_size + cfg.memory_quota;
        if need > avail {
            return Err(TeeError::OutOfMemory { need, available: avail });
        }
        let eid = self.free_eid(dev.layout.slots).ok_or(TeeError::NoFreeId)?;
        dev.ftl.set_id_bits(eid, &cfg.grant)?;
        let mut d = TeeDescriptor {
            eid,
            tid: None,
            state: TeeState::Creating,
            program: cfg.program,
            lpa_grant: cfg.grant,
            region: dev.layout.slot(eid - 1),
            metadata: dev.layout.metadata_slot(eid - 1),
            result: None,
            abort: None,
            created_at: now,
            reclaimed: false,
        };
        // descriptor is written by the secure world
        debug_assert!(dev.protect.access(&AccessContext::secure(), d.metadata.start, AccessMode::Write).is_allowed());
        let pages = self.arena_pages(dev, &d);
        dev.mem.release(pages.clone());
        dev.mem.assign(pages, PagePermission::Writable);
        d.state = TeeState::Running;
        self.live.insert(eid, d);
        self.stats.created += 1;
        self.stats.create_ns += self.cfg.create_ns;
        Ok((eid, self.cfg.create_ns))
    }

    fn arena_pages(&self, dev: &Device, d: &TeeDescriptor) -> Range<u64> {
        let s = dev.layout.arena_offset(d.region.start) / PAGE_BYTES;
        s..s + (d.region.end - d.region.start) / PAGE_BYTES
    }

    /// OffloadCode: queue the request and create its TEE.
    pub fn offload_code(
        &mut self,
        dev: &mut Device,
        req: OffloadRequest,
        memory_quota: u64,
        now: Nanos,
    ) -> Result<(u8, Nanos), TeeError> {
        if self.tids.contains_key(&req.tid) || self.retired.contains_key(&req.tid) {
            return Err(TeeError::DuplicateTid(req.tid));
        }
        let (eid, cost) = self.create_tee(dev, TeeConfig { program: req.bin, grant: req.lpa, memory_quota }, now)?;
        self.live.get_mut(&eid).unwrap().tid = Some(req.tid);
        self.tids.insert(req.tid, eid);
        Ok((eid, cost))
    }

    /// ReadMappingEntry on behalf of `eid`; a denied lookup aborts the TEE.
    pub fn read_mapping_entry(
        &mut self,
        dev: &mut Device,
        eid: u8,
        lpa: u32,
        now: Nanos,
    ) -> Result<Translation, TeeError> {
        self.running(eid)?;
        match dev.ftl.read_mapping_entry(eid, lpa, now) {
            Ok(t) => Ok(t),
            Err(e @ FtlError::PermissionDenied { .. }) => {
                let rec = self.throw_out_tee(eid, AbortReason::AccessViolation, e.to_string(), now)?;
                Err(TeeError::Aborted(rec))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Memory access by the TEE's program, checked against the protection map and its window.
    pub fn check_access(
        &mut self,
        dev: &mut Device,
        eid: u8,
        addr: u64,
        mode: AccessMode,
        now: Nanos,
    ) -> Result<(), TeeError> {
        let d = self.running(eid)?;
        let ctx = AccessContext::tee(eid, d.region.clone());
        if dev.protect.access(&ctx, addr, mode).is_allowed() {
            return Ok(());
        }
        let msg = format!("{mode:?} of {addr:#x} outside the TEE window");
        Err(TeeError::Aborted(self.throw_out_tee(eid, AbortReason::AccessViolation, msg, now)?))
    }

    fn running(&self, eid: u8) -> Result<&TeeDescriptor, TeeError> {
        let d = self.live.get(&eid).ok_or(TeeError::UnknownTee(eid))?;
        match d.state {
            TeeState::Running => Ok(d),
            TeeState::Aborted => Err(TeeError::Aborted(d.abort.clone().unwrap())),
            s => Err(TeeError::InvalidTransition { eid, from: s, to: TeeState::Running }),
        }
    }

    /// ThrowOutTEE: abort the program and record the reason.
    pub fn throw_out_tee(
        &mut self,
        eid: u8,
        reason: AbortReason,
        msg: impl Into<String>,
        now: Nanos,
    ) -> Result<AbortRecord, TeeError> {
        let d = self.live.get_mut(&eid).ok_or(TeeError::UnknownTee(eid))?;
        if d.state != TeeState::Running {
            return Err(TeeError::InvalidTransition { eid, from: d.state, to: TeeState::Aborted });
        }
        let rec = AbortRecord { eid, tid: d.tid, reason, message: msg.into(), at: now };
        d.state = TeeState::Aborted;
        d.abort = Some(rec.clone());
        self.aborts.push(rec.clone());
        self.stats.aborted += 1;
        Ok(rec)
    }

    /// The program finished; its result is copied into the TEE's metadata region.
    pub fn complete(&mut self, eid: u8, result: Vec<u8>) -> Result<(), TeeError> {
        self.running(eid)?;
        let d = self.live.get_mut(&eid).unwrap();
        if result.len() as u64 > d.metadata.end - d.metadata.start - DESCRIPTOR_BYTES {
            return Err(TeeError::ResultTooLarge { len: result.len() });
        }
        d.result = Some(result);
        Ok(())
    }

    /// TerminateTEE: reclaim the region, clear ID bits, free the id.
    pub fn terminate_tee(&mut self, dev: &mut Device, eid: u8, now: Nanos) -> Result<(u64, Nanos), TeeError> {
        let _ = now;
        let d = self.live.get(&eid).ok_or(TeeError::UnknownTee(eid))?;
        if !matches!(d.state, TeeState::Running | TeeState::Aborted) {
            return Err(TeeError::InvalidTransition { eid, from: d.state, to: TeeState::Terminated });
        }
        let mut d = self.live.remove(&eid).unwrap();
        dev.ftl.release(eid);
        let pages = self.arena_pages(dev, &d);
        dev.mem.release(pages);
        dev.l2.invalidate_range(dev.layout.arena_offset(d.region.start), dev.layout.arena_offset(d.region.end));
        if d.state == TeeState::Running {
            d.state = TeeState::Terminated;
        }
        d.reclaimed = true;
        let reclaimed = (d.region.end - d.region.start) + (d.metadata.end - d.metadata.start);
        debug_assert_eq!(d.slot() + 1, eid);
        if let Some(tid) = d.tid {
            self.tids.remove(&tid);
            self.retired.insert(tid, d);
        }
        self.stats.terminated += 1;
        self.stats.delete_ns += self.cfg.delete_ns;
        Ok((reclaimed, self.cfg.delete_ns))
    }

    /// GetResult: result bytes shipped to the host over the external link.
    pub fn get_result(&mut self, dev: &Device, tid: u64) -> Result<(Vec<u8>, Nanos), TeeError> {
        if let Some(&eid) = self.tids.get(&tid) {
            let d = &self.live[&eid];
            return Err(match &d.abort {
                Some(a) => TeeError::Aborted(a.clone()),
                None => TeeError::NotFinished(tid),
            });
        }
        let d = self.retired.get(&tid).ok_or(TeeError::UnknownTid(tid))?;
        if let Some(a) = &d.abort {
            return Err(TeeError::Aborted(a.clone()));
        }
        let r = d.result.clone().ok_or(TeeError::NotFinished(tid))?;
        let cost = transfer_ns(r.len() as u64, dev.ftl.flash().timings().external_bw);
        self.stats.result_ns += cost;
        Ok((r, cost))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceConfig, DramConfig};
    use crate::flash::FlashGeometry;
    use crate::ftl::FtlConfig;

    pub(crate) fn small_device() -> Device {
        let cfg = DeviceConfig {
            geometry: FlashGeometry {
                channels: 2,
                chips_per_channel: 1,
                dies_per_chip: 2,
                planes_per_die: 1,
                blocks_per_plane: 16,
                pages_per_block: 16,
                page_size: 4096,
            },
            ftl: FtlConfig { logical_pages: 256, cache_entries: Some(1024), ..Default::default() },
            dram: DramConfig { dram_bytes: 512 << 20, tee_region_bytes: 1 << 20, ..Default::default() },
            ..Default::default()
        };
        Device::new(&cfg, true, [1; 16]).unwrap()
    }

    fn image() -> ProgramImage {
        ProgramImage { name: "filter".into(), code_size: 28 << 10 }
    }

    fn load(dev: &mut Device, lpas: Range<u32>) {
        for l in lpas {
            dev.ftl.secure_write(l, &vec![l as u8; 4096], 0).unwrap();
        }
    }

    #[test]
    fn offload_creates_running_tee() {
        let mut dev = small_device();
        load(&mut dev, 0..3);
        let mut rt = TeeRuntime::default();
        let req = OffloadRequest { bin: image(), lpa: vec![0, 1, 2], args: vec![], tid: 7 };
        let (eid, cost) = rt.offload_code(&mut dev, req.clone(), 0, 0).unwrap();
        assert_eq!((eid, cost), (1, 95_000));
        assert_eq!(rt.descriptor(eid).unwrap().state, TeeState::Running);
        assert_eq!(rt.offload_code(&mut dev, req, 0, 0).unwrap_err(), TeeError::DuplicateTid(7));
    }

    #[test]
    fn oversized_program_fails() {
        let mut dev = small_device();
        let mut rt = TeeRuntime::default();
        let cfg = TeeConfig { program: ProgramImage { name: "big".into(), code_size: 2 << 20 }, grant: vec![], memory_quota: 0 };
        assert!(matches!(rt.create_tee(&mut dev, cfg, 0), Err(TeeError::OutOfMemory { .. })));
    }

    #[test]
    fn ids_exhaust_and_are_reused() {
        let mut dev = small_device();
        let mut rt = TeeRuntime::default();
        let mk = || TeeConfig { program: image(), grant: vec![], memory_quota: 0 };
        for want in 1..=15u8 {
            assert_eq!(rt.create_tee(&mut dev, mk(), 0).unwrap().0, want);
        }
        assert_eq!(rt.create_tee(&mut dev, mk(), 0).unwrap_err(), TeeError::NoFreeId);
        let (reclaimed, cost) = rt.terminate_tee(&mut dev, 6, 0).unwrap();
        assert_eq!(cost, 58_000);
        assert_eq!(reclaimed, (1 << 20) + (64 << 10));
        assert_eq!(rt.create_tee(&mut dev, mk(), 0).unwrap().0, 6);
    }

    #[test]
    fn recycled_id_does_not_inherit_grants() {
        let mut dev = small_device();
        load(&mut dev, 0..4);
        let mut rt = TeeRuntime::default();
        let cfg = TeeConfig { program: image(), grant: vec![0, 1], memory_quota: 0 };
        let (eid, _) = rt.create_tee(&mut dev, cfg, 0).unwrap();
        rt.read_mapping_entry(&mut dev, eid, 0, 0).unwrap();
        rt.terminate_tee(&mut dev, eid, 0).unwrap();
        let cfg = TeeConfig { program: image(), grant: vec![2], memory_quota: 0 };
        let (again, _) = rt.create_tee(&mut dev, cfg, 0).unwrap();
        assert_eq!(again, eid);
        let err = rt.read_mapping_entry(&mut dev, again, 0, 0).unwrap_err();
        assert!(matches!(err, TeeError::Aborted(AbortRecord { reason: AbortReason::AccessViolation, .. })));
    }

    #[test]
    fn miss_service_costs_two_switches_plus_read() {
        let mut dev = small_device();
        load(&mut dev, 0..2);
        dev.ftl.flush_cache();
        dev.ftl.flash_mut().reset_timing();
        let mut rt = TeeRuntime::default();
        let (eid, _) = rt.create_tee(&mut dev, TeeConfig { program: image(), grant: vec![0, 1], memory_quota: 0 }, 0).unwrap();
        let t = rt.read_mapping_entry(&mut dev, eid, 0, 0).unwrap();
        let tm = *dev.ftl.flash().timings();
        let read = tm.t_rd_ns + tm.channel_transfer_ns(4096);
        assert!(t.miss);
        assert_eq!(t.cost, 2 * 3_800 + read + 50);
        let t = rt.read_mapping_entry(&mut dev, eid, 1, t.cost).unwrap();
        assert!(!t.miss);
    }

    #[test]
    fn result_lifecycle() {
        let mut dev = small_device();
        let mut rt = TeeRuntime::default();
        let req = OffloadRequest { bin: image(), lpa: vec![], args: vec![], tid: 1 };
        let (eid, _) = rt.offload_code(&mut dev, req, 0, 0).unwrap();
        assert_eq!(rt.get_result(&dev, 1).unwrap_err(), TeeError::NotFinished(1));
        rt.complete(eid, 42u64.to_le_bytes().to_vec()).unwrap();
        rt.terminate_tee(&mut dev, eid, 0).unwrap();
        let (r, cost) = rt.get_result(&dev, 1).unwrap();
        assert_eq!(r, 42u64.to_le_bytes());
        assert_eq!(cost, 3);
    }

    #[test]
    fn aborted_tee_reports_record() {
        let mut dev = small_device();
        let mut rt = TeeRuntime::default();
        let req = OffloadRequest { bin: image(), lpa: vec![], args: vec![], tid: 9 };
        let (eid, _) = rt.offload_code(&mut dev, req, 0, 0).unwrap();
        rt.throw_out_tee(eid, AbortReason::ProgramException, "division by zero", 10).unwrap();
        assert!(matches!(rt.get_result(&dev, 9), Err(TeeError::Aborted(_))));
        assert!(rt.throw_out_tee(eid, AbortReason::ProgramException, "again", 11).is_err());
        rt.terminate_tee(&mut dev, eid, 20).unwrap();
        let Err(TeeError::Aborted(rec)) = rt.get_result(&dev, 9) else { panic!() };
        assert_eq!(rec.reason, AbortReason::ProgramException);
    }

    #[test]
    fn window_escape_aborts() {
        let mut dev = small_device();
        let mut rt = TeeRuntime::default();
        let (a, _) = rt.create_tee(&mut dev, TeeConfig { program: image(), grant: vec![], memory_quota: 0 }, 0).unwrap();
        let (b, _) = rt.create_tee(&mut dev, TeeConfig { program: image(), grant: vec![], memory_quota: 0 }, 0).unwrap();
        let own = rt.descriptor(a).unwrap().region.start;
        let other = rt.descriptor(b).unwrap().region.start;
        rt.check_access(&mut dev, a, own + 64, AccessMode::Write, 0).unwrap();
        let err = rt.check_access(&mut dev, a, other, AccessMode::Read, 0).unwrap_err();
        assert!(matches!(err, TeeError::Aborted(AbortRecord { reason: AbortReason::AccessViolation, .. })));
    }
}
