//! Three-region DRAM protection (normal / protected / secure) and world switching.
//!
//! Permission matrix:
//!
//! | world  | NORMAL | PROTECTED | SECURE |
//! |--------|--------|-----------|--------|
//! | secure | rw     | rw        | rw     |
//! | normal | rw     | r         | -      |
//!
//! Descriptor encoding (ARMv8-style NS, AP[2:1], plus the ES bit that carves the protected region
//! out of normal-world memory):
//!
//! | region    | NS | AP[2:1] | ES |
//! |-----------|----|---------|----|
//! | SECURE    | 0  | 00      | 0  |
//! | PROTECTED | 1  | 01      | 1  |
//! | NORMAL    | 1  | 01      | 0  |
//!
//! Every other combination is an invalid descriptor.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::Nanos;

pub const DEFAULT_SWITCH_NS: Nanos = 3_800;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtectError {
    #[error("already in the {0:?} world")]
    SameWorld(World),
    #[error("invalid region layout: {0}")]
    Layout(String),
    #[error("no such core {0}")]
    NoSuchCore(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionKind {
    Normal,
    Protected,
    Secure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum World {
    Normal,
    Secure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessMode {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DescriptorBits {
    pub ns: bool,
    pub ap: u8,
    pub es: bool,
}

impl DescriptorBits {
    pub fn for_region(kind: RegionKind) -> Self {
        match kind {
            RegionKind::Secure => Self { ns: false, ap: 0b00, es: false },
            RegionKind::Protected => Self { ns: true, ap: 0b01, es: true },
            RegionKind::Normal => Self { ns: true, ap: 0b01, es: false },
        }
    }

    pub fn region(&self) -> Option<RegionKind> {
        match (self.ns, self.ap, self.es) {
            (false, 0b00, false) => Some(RegionKind::Secure),
            (true, 0b01, true) => Some(RegionKind::Protected),
            (true, 0b01, false) => Some(RegionKind::Normal),
            _ => None,
        }
    }

    /// Packs as `es << 3 | ap << 1 | ns`.
    pub fn to_bits(&self) -> u8 {
        (self.es as u8) << 3 | (self.ap & 0b11) << 1 | self.ns as u8
    }

    pub fn from_bits(b: u8) -> Self {
        Self { ns: b & 1 != 0, ap: (b >> 1) & 0b11, es: b & 0b1000 != 0 }
    }
}

/// Total permission matrix over (world, region, mode).
pub fn permits(world: World, region: RegionKind, mode: AccessMode) -> bool {
    match (world, region, mode) {
        (World::Secure, _, _) => true,
        (World::Normal, RegionKind::Normal, _) => true,
        (World::Normal, RegionKind::Protected, AccessMode::Read) => true,
        (World::Normal, RegionKind::Protected, AccessMode::Write) => false,
        (World::Normal, RegionKind::Secure, _) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub kind: RegionKind,
    pub ranges: Vec<Range<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryMap {
    dram_bytes: u64,
    regions: Vec<Region>,
}

impl MemoryMap {
    /// Secure region first, then the protected region, normal world gets the rest.
    pub fn new(dram_bytes: u64, secure_bytes: u64, protected_bytes: u64) -> Result<Self, ProtectError> {
        if secure_bytes == 0 {
            return Err(ProtectError::Layout("secure region must be non-empty".into()));
        }
        if secure_bytes + protected_bytes >= dram_bytes {
            return Err(ProtectError::Layout(format!(
                "secure ({secure_bytes}) + protected ({protected_bytes}) leave no normal memory in {dram_bytes} bytes"
            )));
        }
        let p0 = secure_bytes;
        let n0 = p0 + protected_bytes;
        let mut regions = vec![Region { kind: RegionKind::Secure, ranges: vec![0..p0] }];
        regions.push(Region {
            kind: RegionKind::Protected,
            ranges: if protected_bytes > 0 { vec![p0..n0] } else { vec![] },
        });
        regions.push(Region { kind: RegionKind::Normal, ranges: vec![n0..dram_bytes] });
        Ok(Self { dram_bytes, regions })
    }

    pub fn dram_bytes(&self) -> u64 {
        self.dram_bytes
    }

    pub fn region_of(&self, addr: u64) -> Option<RegionKind> {
        self.regions
            .iter()
            .find(|r| r.ranges.iter().any(|rg| rg.contains(&addr)))
            .map(|r| r.kind)
    }

    pub fn range_of(&self, kind: RegionKind) -> Range<u64> {
        let r = self.regions.iter().find(|r| r.kind == kind).expect("all kinds present");
        r.ranges.first().cloned().unwrap_or(0..0)
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn descriptor(&self, addr: u64) -> Option<DescriptorBits> {
        self.region_of(addr).map(DescriptorBits::for_region)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub world: World,
    pub addr: u64,
    pub mode: AccessMode,
    pub region: Option<RegionKind>,
    pub tee: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessDecision {
    Allow,
    Fault(FaultRecord),
}

impl AccessDecision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, AccessDecision::Allow)
    }
}

/// Who is issuing an access. A normal-world TEE is further confined by its MMU mapping to its
/// own window of normal memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessContext {
    pub world: World,
    pub tee: Option<u8>,
    pub window: Option<Range<u64>>,
}

impl AccessContext {
    pub fn secure() -> Self {
        Self { world: World::Secure, tee: None, window: None }
    }

    pub fn normal() -> Self {
        Self { world: World::Normal, tee: None, window: None }
    }

    pub fn tee(eid: u8, window: Range<u64>) -> Self {
        Self { world: World::Normal, tee: Some(eid), window: Some(window) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorldState {
    pub current: World,
    pub switch_cost_ns: Nanos,
    pub switches: u64,
}

#[derive(Debug, Clone)]
pub struct MemProtect {
    map: MemoryMap,
    cores: Vec<WorldState>,
    faults: Vec<FaultRecord>,
}

impl MemProtect {
    pub fn new(map: MemoryMap, cores: usize, switch_cost_ns: Nanos) -> Self {
        let ws = WorldState { current: World::Normal, switch_cost_ns, switches: 0 };
        Self { map, cores: vec![ws; cores.max(1)], faults: Vec::new() }
    }

    pub fn map(&self) -> &MemoryMap {
        &self.map
    }

    pub fn access(&mut self, ctx: &AccessContext, addr: u64, mode: AccessMode) -> AccessDecision {
        let region = self.map.region_of(addr);
        let mut ok = region.is_some_and(|r| permits(ctx.world, r, mode));
        if ok && ctx.world == World::Normal && region == Some(RegionKind::Normal) {
            if let Some(w) = &ctx.window {
                ok = w.contains(&addr);
            }
        }
        if ok {
            AccessDecision::Allow
        } else {
            let rec = FaultRecord { world: ctx.world, addr, mode, region, tee: ctx.tee };
            self.faults.push(rec.clone());
            AccessDecision::Fault(rec)
        }
    }

    /// Checks every 64-byte line touched by `[addr, addr+len)`; the first fault wins.
    pub fn access_range(
        &mut self,
        ctx: &AccessContext,
        addr: u64,
        len: u64,
        mode: AccessMode,
    ) -> AccessDecision {
        let mut a = addr & !63;
        while a < addr + len.max(1) {
            let d = self.access(ctx, a.max(addr), mode);
            if !d.is_allowed() {
                return d;
            }
            a += 64;
        }
        AccessDecision::Allow
    }

    pub fn faults(&self) -> &[FaultRecord] {
        &self.faults
    }

    pub fn fault_count(&self) -> usize {
        self.faults.len()
    }

    pub fn world(&self, core: usize) -> World {
        self.cores[core].current
    }

    pub fn switches(&self) -> u64 {
        self.cores.iter().map(|c| c.switches).sum()
    }

    pub fn switch_cost_ns(&self) -> Nanos {
        self.cores[0].switch_cost_ns
    }

    /// Switches `core` to `target` and returns the cost charged to the caller's timeline.
    pub fn switch_world(&mut self, core: usize, target: World) -> Result<Nanos, ProtectError> {
        let ws = self.cores.get_mut(core).ok_or(ProtectError::NoSuchCore(core))?;
        if ws.current == target {
            return Err(ProtectError::SameWorld(target));
        }
        ws.current = target;
        ws.switches += 1;
        Ok(ws.switch_cost_ns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1 << 20;

    fn mp() -> MemProtect {
        MemProtect::new(MemoryMap::new(256 * MB, 64 * MB, 4 * MB).unwrap(), 1, DEFAULT_SWITCH_NS)
    }

    #[test]
    fn normal_write_to_protected_faults_read_allowed() {
        let mut m = mp();
        let p = m.map().range_of(RegionKind::Protected).start;
        assert!(!m.access(&AccessContext::normal(), p, AccessMode::Write).is_allowed());
        assert!(m.access(&AccessContext::normal(), p, AccessMode::Read).is_allowed());
        assert_eq!(m.fault_count(), 1);
    }

    #[test]
    fn secure_world_writes_anywhere() {
        let mut m = mp();
        for addr in [0, 64 * MB, 100 * MB, 256 * MB - 1] {
            assert!(m.access(&AccessContext::secure(), addr, AccessMode::Write).is_allowed());
        }
        assert_eq!(m.fault_count(), 0);
    }

    #[test]
    fn normal_world_cannot_touch_secure() {
        let mut m = mp();
        for mode in [AccessMode::Read, AccessMode::Write] {
            assert!(!m.access(&AccessContext::normal(), 10, mode).is_allowed());
        }
    }

    #[test]
    fn out_of_range_is_a_fault() {
        let mut m = mp();
        assert!(!m.access(&AccessContext::secure(), 256 * MB, AccessMode::Read).is_allowed());
    }

    #[test]
    fn tee_window_confines_normal_accesses() {
        let mut m = mp();
        let n = m.map().range_of(RegionKind::Normal).start;
        let ctx = AccessContext::tee(3, n..n + 16 * MB);
        assert!(m.access(&ctx, n + 5, AccessMode::Write).is_allowed());
        let d = m.access(&ctx, n + 16 * MB, AccessMode::Read);
        match d {
            AccessDecision::Fault(f) => assert_eq!(f.tee, Some(3)),
            _ => panic!("expected fault"),
        }
        // protected region is still readable
        let p = m.map().range_of(RegionKind::Protected).start;
        assert!(m.access(&ctx, p, AccessMode::Read).is_allowed());
    }

    #[test]
    fn permission_matrix_is_total() {
        let worlds = [World::Normal, World::Secure];
        let regions = [RegionKind::Normal, RegionKind::Protected, RegionKind::Secure];
        let modes = [AccessMode::Read, AccessMode::Write];
        let mut allowed = 0;
        for w in worlds {
            for r in regions {
                for m in modes {
                    allowed += permits(w, r, m) as u32;
                }
            }
        }
        // secure: 6, normal: rw normal + r protected = 3
        assert_eq!(allowed, 9);
    }

    #[test]
    fn descriptor_encoding_is_bijective_on_valid_set() {
        let mut valid = 0;
        for b in 0u8..16 {
            let d = DescriptorBits::from_bits(b);
            assert_eq!(d.to_bits(), b);
            if let Some(kind) = d.region() {
                valid += 1;
                assert_eq!(DescriptorBits::for_region(kind), d);
            }
        }
        assert_eq!(valid, 3);
        for kind in [RegionKind::Normal, RegionKind::Protected, RegionKind::Secure] {
            assert_eq!(DescriptorBits::for_region(kind).region(), Some(kind));
        }
    }

    #[test]
    fn descriptor_follows_layout() {
        let m = mp();
        assert_eq!(m.map().descriptor(0).unwrap().region(), Some(RegionKind::Secure));
        assert_eq!(m.map().descriptor(64 * MB).unwrap().region(), Some(RegionKind::Protected));
        assert_eq!(m.map().descriptor(68 * MB).unwrap().region(), Some(RegionKind::Normal));
    }

    #[test]
    fn world_switch_cost_and_same_world_rejected() {
        let mut m = mp();
        assert_eq!(m.switch_world(0, World::Secure).unwrap(), 3_800);
        assert_eq!(m.switch_world(0, World::Secure).unwrap_err(), ProtectError::SameWorld(World::Secure));
        assert_eq!(m.switch_world(0, World::Normal).unwrap(), 3_800);
        assert_eq!(m.switches(), 2);
    }

    #[test]
    fn bad_layout_rejected() {
        assert!(MemoryMap::new(64 * MB, 64 * MB, 0).is_err());
        assert!(MemoryMap::new(64 * MB, 0, 0).is_err());
    }

    #[test]
    fn regions_are_disjoint_and_cover_dram() {
        let m = mp();
        let mut total = 0;
        for r in m.map().regions() {
            for rg in &r.ranges {
                total += rg.end - rg.start;
            }
        }
        assert_eq!(total, 256 * MB);
        for addr in (0..256 * MB).step_by(MB as usize) {
            assert!(m.map().region_of(addr).is_some());
        }
    }
}
