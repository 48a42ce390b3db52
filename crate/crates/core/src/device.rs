//! The SSD as one bundle: flash + FTL, the DRAM layout with its protection map, the TEE memory
//! arena (plain or encrypted), the page cipher and the shared L2.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{Cache, CacheGeometry};
use crate::cipher::{CipherConfig, CipherEngine};
use crate::flash::{FlashArray, FlashError, FlashGeometry, FlashTimings};
use crate::ftl::{Ftl, FtlConfig, FtlError};
use crate::protect::{MemProtect, MemoryMap, ProtectError, RegionKind};
use crate::secmem::{
    OpCost, PagePermission, SecMemConfig, SecMemError, SecMemStats, SecureMemory, LINE_BYTES, PAGE_BYTES,
};

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error(transparent)]
    Flash(#[from] FlashError),
    #[error(transparent)]
    Ftl(#[from] FtlError),
    #[error(transparent)]
    Protect(#[from] ProtectError),
    #[error("DRAM layout: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DramConfig {
    pub dram_bytes: u64,
    pub secure_bytes: u64,
    pub protected_bytes: u64,
    /// Preallocated contiguous region per TEE.
    pub tee_region_bytes: u64,
    pub max_tees: u8,
    /// Descriptor plus result buffer per TEE, inside the secure region.
    pub metadata_slot_bytes: u64,
    /// Stall for an L2 miss to working-state memory (input streams are prefetched).
    pub access_ns: u64,
}

impl Default for DramConfig {
    fn default() -> Self {
        Self {
            dram_bytes: 4 << 30,
            secure_bytes: 32 << 20,
            protected_bytes: 64 << 20,
            tee_region_bytes: 16 << 20,
            max_tees: 15,
            metadata_slot_bytes: 64 << 10,
            access_ns: 45,
        }
    }
}

/// Where things live in SSD DRAM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DramLayout {
    pub map: MemoryMap,
    pub arena: Range<u64>,
    pub slot_bytes: u64,
    pub slots: u8,
    pub metadata: Range<u64>,
    pub metadata_slot_bytes: u64,
}

impl DramLayout {
    pub fn new(cfg: &DramConfig, mapping_cache_bytes: u64) -> Result<Self, DeviceError> {
        if cfg.tee_region_bytes == 0 || cfg.tee_region_bytes % PAGE_BYTES != 0 {
            return Err(DeviceError::Layout("tee_region_bytes must be a positive multiple of 4096".into()));
        }
        if cfg.max_tees == 0 || cfg.max_tees > crate::ftl::MAX_TEE_ID {
            return Err(DeviceError::Layout(format!("max_tees must be in 1..={}", crate::ftl::MAX_TEE_ID)));
        }
        if mapping_cache_bytes > cfg.protected_bytes {
            return Err(DeviceError::Layout(format!(
                "mapping cache needs {mapping_cache_bytes} bytes but the protected region has {}",
                cfg.protected_bytes
            )));
        }
        let meta = cfg.metadata_slot_bytes * cfg.max_tees as u64;
        if meta > cfg.secure_bytes {
            return Err(DeviceError::Layout("TEE metadata does not fit in the secure region".into()));
        }
        let map = MemoryMap::new(cfg.dram_bytes, cfg.secure_bytes, cfg.protected_bytes)?;
        let normal = map.range_of(RegionKind::Normal);
        let arena_len = cfg.tee_region_bytes * cfg.max_tees as u64;
        if arena_len > normal.end - normal.start {
            return Err(DeviceError::Layout("TEE regions do not fit in normal DRAM".into()));
        }
        let secure = map.range_of(RegionKind::Secure);
        Ok(Self {
            arena: normal.start..normal.start + arena_len,
            slot_bytes: cfg.tee_region_bytes,
            slots: cfg.max_tees,
            metadata: secure.start..secure.start + meta,
            metadata_slot_bytes: cfg.metadata_slot_bytes,
            map,
        })
    }

    /// DRAM range of TEE slot `slot` (0-based).
    pub fn slot(&self, slot: u8) -> Range<u64> {
        let s = self.arena.start + slot as u64 * self.slot_bytes;
        s..s + self.slot_bytes
    }

    pub fn metadata_slot(&self, slot: u8) -> Range<u64> {
        let s = self.metadata.start + slot as u64 * self.metadata_slot_bytes;
        s..s + self.metadata_slot_bytes
    }

    /// Offset of a DRAM address inside the arena.
    pub fn arena_offset(&self, addr: u64) -> u64 {
        addr - self.arena.start
    }
}

/// Unencrypted arena used by the unprotected in-storage baseline.
#[derive(Debug)]
pub struct PlainMemory {
    pages: Vec<Option<Box<[u8; PAGE_BYTES as usize]>>>,
    stats: SecMemStats,
}

impl PlainMemory {
    pub fn new(bytes: u64) -> Self {
        Self { pages: (0..bytes.div_ceil(PAGE_BYTES)).map(|_| None).collect(), stats: SecMemStats::default() }
    }

    fn bounds(&self, off: u64) -> Result<(usize, usize), SecMemError> {
        if off % LINE_BYTES != 0 {
            return Err(SecMemError::Unaligned(off));
        }
        let p = (off / PAGE_BYTES) as usize;
        if p >= self.pages.len() {
            return Err(SecMemError::OutOfRange(off));
        }
        Ok((p, (off % PAGE_BYTES) as usize))
    }
}

/// The TEE arena as seen by the memory controller. Offsets are arena-relative.
#[derive(Debug)]
pub enum TeeMemory {
    Plain(PlainMemory),
    Secure(Box<SecureMemory>),
}

impl TeeMemory {
    pub fn read_line(&mut self, off: u64) -> Result<([u8; 64], OpCost), SecMemError> {
        match self {
            TeeMemory::Secure(s) => s.mem_read(off),
            TeeMemory::Plain(m) => {
                let (p, o) = m.bounds(off)?;
                m.stats.line_reads += 1;
                m.stats.data_bytes += LINE_BYTES;
                let line = m.pages[p].as_ref().map_or([0; 64], |pg| pg[o..o + 64].try_into().unwrap());
                Ok((line, OpCost::default()))
            }
        }
    }

    pub fn write_line(&mut self, off: u64, data: &[u8; 64]) -> Result<OpCost, SecMemError> {
        match self {
            TeeMemory::Secure(s) => s.mem_write(off, data),
            TeeMemory::Plain(m) => {
                let (p, o) = m.bounds(off)?;
                m.stats.line_writes += 1;
                m.stats.data_bytes += LINE_BYTES;
                m.pages[p].get_or_insert_with(|| Box::new([0; PAGE_BYTES as usize]))[o..o + 64].copy_from_slice(data);
                Ok(OpCost::default())
            }
        }
    }

    /// DMA of whole pages into the arena.
    pub fn ingest(&mut self, off: u64, data: &[u8]) -> Result<OpCost, SecMemError> {
        match self {
            TeeMemory::Secure(s) => s.ingest_pages(off / PAGE_BYTES, data),
            TeeMemory::Plain(m) => {
                if data.len() as u64 % PAGE_BYTES != 0 {
                    return Err(SecMemError::BadLength(data.len()));
                }
                let first = (off / PAGE_BYTES) as usize;
                for (k, chunk) in data.chunks_exact(PAGE_BYTES as usize).enumerate() {
                    let slot = m.pages.get_mut(first + k).ok_or(SecMemError::OutOfRange(off))?;
                    slot.get_or_insert_with(|| Box::new([0; PAGE_BYTES as usize])).copy_from_slice(chunk);
                    m.stats.dma_pages += 1;
                    m.stats.data_bytes += PAGE_BYTES;
                }
                Ok(OpCost::default())
            }
        }
    }

    pub fn assign(&mut self, pages: Range<u64>, perm: PagePermission) {
        if let TeeMemory::Secure(s) = self {
            s.assign(pages, perm);
        }
    }

    pub fn release(&mut self, pages: Range<u64>) {
        match self {
            TeeMemory::Secure(s) => s.release(pages),
            TeeMemory::Plain(m) => {
                for p in pages {
                    m.pages[p as usize] = None;
                }
            }
        }
    }

    pub fn stats(&self) -> SecMemStats {
        match self {
            TeeMemory::Secure(s) => s.stats(),
            TeeMemory::Plain(m) => m.stats,
        }
    }

    pub fn secure(&self) -> Option<&SecureMemory> {
        match self {
            TeeMemory::Secure(s) => Some(s),
            TeeMemory::Plain(_) => None,
        }
    }

    pub fn secure_mut(&mut self) -> Option<&mut SecureMemory> {
        match self {
            TeeMemory::Secure(s) => Some(s),
            TeeMemory::Plain(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    pub geometry: FlashGeometry,
    pub timings: FlashTimings,
    pub ftl: FtlConfig,
    pub dram: DramConfig,
    pub secmem: SecMemConfig,
    pub cipher: CipherConfig,
    pub l2: CacheGeometry,
    /// In-storage cores (one TEE runs per core).
    pub cores: usize,
    pub cpu_ghz: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            geometry: FlashGeometry::default(),
            timings: FlashTimings::default(),
            ftl: FtlConfig::default(),
            dram: DramConfig::default(),
            secmem: SecMemConfig::default(),
            cipher: CipherConfig::default(),
            l2: CacheGeometry::default(),
            cores: 4,
            cpu_ghz: 1.6,
        }
    }
}

#[derive(Debug)]
pub struct Device {
    pub ftl: Ftl,
    pub protect: MemProtect,
    pub layout: DramLayout,
    pub mem: TeeMemory,
    pub cipher: CipherEngine,
    pub l2: Cache,
    pub cores: usize,
    pub cpu_ghz: f64,
    pub dram_access_ns: u64,
}

impl Device {
    /// `secure` selects the encrypted arena; otherwise the arena is plain DRAM.
    pub fn new(cfg: &DeviceConfig, secure: bool, mem_key: [u8; 16]) -> Result<Self, DeviceError> {
        if cfg.cores == 0 {
            return Err(DeviceError::Layout("cores must be >= 1".into()));
        }
        let flash = FlashArray::new(cfg.geometry, cfg.timings)?;
        let ftl = Ftl::new(flash, cfg.ftl.clone())?;
        let layout = DramLayout::new(&cfg.dram, cfg.ftl.cache_bytes())?;
        let arena = layout.arena.end - layout.arena.start;
        let mem = if secure {
            TeeMemory::Secure(Box::new(SecureMemory::new(cfg.secmem.clone(), arena, mem_key)))
        } else {
            TeeMemory::Plain(PlainMemory::new(arena))
        };
        Ok(Self {
            protect: MemProtect::new(layout.map.clone(), cfg.cores, cfg.ftl.switch_ns),
            ftl,
            layout,
            mem,
            cipher: CipherEngine::new(cfg.cipher.clone(), cfg.geometry.page_size as usize),
            l2: Cache::new(cfg.l2),
            cores: cfg.cores,
            cpu_ghz: cfg.cpu_ghz,
            dram_access_ns: cfg.dram.access_ns,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_places_arena_in_normal_memory() {
        let cfg = DramConfig::default();
        let l = DramLayout::new(&cfg, FtlConfig::default().cache_bytes()).unwrap();
        assert_eq!(l.map.region_of(l.arena.start), Some(RegionKind::Normal));
        assert_eq!(l.map.region_of(l.arena.end - 1), Some(RegionKind::Normal));
        assert_eq!(l.map.region_of(l.metadata.start), Some(RegionKind::Secure));
        assert_eq!(l.slot(1).start - l.slot(0).start, 16 << 20);
    }

    #[test]
    fn oversized_mapping_cache_rejected() {
        let cfg = DramConfig { protected_bytes: 4096, ..Default::default() };
        assert!(DramLayout::new(&cfg, 8192).is_err());
    }

    #[test]
    fn plain_memory_roundtrip() {
        let mut m = TeeMemory::Plain(PlainMemory::new(8192));
        m.write_line(64, &[3; 64]).unwrap();
        assert_eq!(m.read_line(64).unwrap().0, [3; 64]);
        m.ingest(4096, &[9; 4096]).unwrap();
        assert_eq!(m.read_line(4096 + 128).unwrap().0, [9; 64]);
        assert!(m.read_line(8192).is_err());
    }
}
