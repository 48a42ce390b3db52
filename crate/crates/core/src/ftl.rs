//! Page-level flash translation layer.
//!
//! The authoritative mapping table is the flash-resident one (translation pages, 512 eight-byte
//! entries per 4KB page, stored in block 0 of every plane). A fixed-capacity LRU cache of entries
//! lives in the protected DRAM region; a miss is serviced by the secure world (switch in, read the
//! translation page, install its entries, switch out).
//!
//! Writes are out-of-place and striped channel-first across dies. Garbage collection is greedy
//! (fewest valid pages) between a low and a high free-page watermark; wear leveling migrates the
//! coldest data block when the erase-count spread exceeds a threshold.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::num::NonZeroUsize;

use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flash::{FlashArray, FlashError, PageStatus, Ppa};
use crate::sim::Nanos;

pub const UNOWNED: u8 = 0;
pub const MAX_TEE_ID: u8 = 15;
pub const ENTRY_BYTES: u64 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FtlError {
    #[error("TEE {tee} may not access LPA {lpa}")]
    PermissionDenied { tee: u8, lpa: u32 },
    #[error("LPA {0} is not mapped")]
    UnmappedLpa(u32),
    #[error("LPA {0} is outside the logical space")]
    OutOfRange(u32),
    #[error("LPA {lpa} is already owned by TEE {owner}")]
    AlreadyOwned { lpa: u32, owner: u8 },
    #[error("no free pages left after garbage collection")]
    DeviceFull,
    #[error("invalid FTL configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Flash(#[from] FlashError),
}

/// Where the cached mapping table lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingPlacement {
    /// Only the secure world can read it: every translation request crosses worlds.
    SecureWorld,
    /// Readable from the normal world; only misses cross worlds.
    ProtectedRegion,
    /// Plain firmware table with no world split (unprotected baselines).
    Firmware,
}

/// 64-bit entry: `ppa` in bits 0..32, ID bits in 32..36, valid in bit 36, the rest reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct MappingEntry(pub u64);

impl MappingEntry {
    pub fn new(ppa: Ppa, id: u8, valid: bool) -> Self {
        Self(ppa.0 as u64 | ((id as u64 & 0xF) << 32) | ((valid as u64) << 36))
    }

    pub fn ppa(self) -> Ppa {
        Ppa(self.0 as u32)
    }

    pub fn id(self) -> u8 {
        ((self.0 >> 32) & 0xF) as u8
    }

    pub fn valid(self) -> bool {
        self.0 >> 36 & 1 == 1
    }

    pub fn with_id(self, id: u8) -> Self {
        Self((self.0 & !(0xF << 32)) | ((id as u64 & 0xF) << 32))
    }

    pub fn with_ppa(self, ppa: Ppa) -> Self {
        Self((self.0 & !0xFFFF_FFFF) | ppa.0 as u64 | 1 << 36)
    }
}

/// Allow iff the entry belongs to the caller, or it is unowned and the caller declared it.
pub fn check_access(tee: u8, entry: MappingEntry, declared: bool) -> bool {
    entry.id() == tee || (entry.id() == UNOWNED && declared)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtlConfig {
    /// Size of the exported logical space in pages.
    pub logical_pages: u32,
    /// Mapping-cache capacity in entries; `None` means 75% of the logical space.
    pub cache_entries: Option<u32>,
    pub gc_low_watermark: f64,
    pub gc_high_watermark: f64,
    pub wear_level_threshold: u32,
    pub placement: MappingPlacement,
    /// Cost of reading one cached entry from DRAM.
    pub entry_read_ns: Nanos,
    pub switch_ns: Nanos,
}

impl Default for FtlConfig {
    fn default() -> Self {
        Self {
            logical_pages: 1 << 18,
            cache_entries: None,
            gc_low_watermark: 0.05,
            gc_high_watermark: 0.10,
            wear_level_threshold: 20,
            placement: MappingPlacement::ProtectedRegion,
            entry_read_ns: 50,
            switch_ns: crate::protect::DEFAULT_SWITCH_NS,
        }
    }
}

impl FtlConfig {
    pub fn cache_capacity(&self) -> u32 {
        self.cache_entries
            .unwrap_or((self.logical_pages as u64 * 3 / 4) as u32)
            .max(1)
    }

    /// Bytes of protected DRAM needed for the cache.
    pub fn cache_bytes(&self) -> u64 {
        (self.cache_capacity() as u64 * ENTRY_BYTES).next_multiple_of(4096)
    }

    pub fn validate(&self) -> Result<(), FtlError> {
        if self.logical_pages == 0 {
            return Err(FtlError::Config("logical_pages must be >= 1".into()));
        }
        let (lo, hi) = (self.gc_low_watermark, self.gc_high_watermark);
        if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
            return Err(FtlError::Config(format!(
                "watermarks must satisfy 0 <= low <= high < 1, got {lo}/{hi}"
            )));
        }
        if self.switch_ns == 0 {
            return Err(FtlError::Config("switch_ns must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Translation {
    pub ppa: Ppa,
    pub cost: Nanos,
    pub world_switch: bool,
    pub miss: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchTranslation {
    pub ppas: Vec<Ppa>,
    pub cost: Nanos,
    pub misses: u64,
    pub world_switches: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FtlStats {
    pub translations: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// Secure-world round trips taken on behalf of translation (each is two world switches).
    pub round_trips: u64,
    pub world_switches: u64,
    pub host_writes: u64,
    pub gc_runs: u64,
    pub gc_relocations: u64,
    pub gc_erases: u64,
    pub wl_migrations: u64,
    pub wl_relocations: u64,
}

impl FtlStats {
    pub fn miss_ratio(&self) -> f64 {
        if self.translations == 0 {
            0.0
        } else {
            self.cache_misses as f64 / self.translations as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GcOutcome {
    pub relocated: u64,
    pub erased_blocks: u64,
    pub cost: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockState {
    Reserved,
    Fresh,
    Free,
    Active,
    Full,
}

#[derive(Debug, Clone, Copy)]
struct BlockMeta {
    state: BlockState,
    valid: u32,
    cursor: u32,
}

#[derive(Debug)]
struct DiePool {
    fresh_next: u32,
    recycled: BTreeSet<(u32, u32)>,
    active: Option<u32>,
}

#[derive(Debug)]
pub struct Ftl {
    cfg: FtlConfig,
    flash: FlashArray,
    table: Vec<MappingEntry>,
    cache: LruCache<u32, MappingEntry>,
    declared: HashMap<u8, HashSet<u32>>,
    blocks: Vec<BlockMeta>,
    dies: Vec<DiePool>,
    die_order: Vec<u32>,
    rr: usize,
    user_pages: u64,
    used_pages: u64,
    stats: FtlStats,
}

impl Ftl {
    pub fn new(flash: FlashArray, cfg: FtlConfig) -> Result<Self, FtlError> {
        cfg.validate()?;
        let g = *flash.geometry();
        if g.blocks_per_plane < 2 {
            return Err(FtlError::Config("need >= 2 blocks per plane (block 0 is reserved)".into()));
        }
        let planes = g.total_dies() as u64 * g.planes_per_die as u64;
        let per_tpage = g.page_size as u64 / ENTRY_BYTES;
        let tpages = (cfg.logical_pages as u64).div_ceil(per_tpage);
        if tpages > planes * g.pages_per_block as u64 {
            return Err(FtlError::Config("translation pages do not fit the reserved blocks".into()));
        }
        let user_pages = (g.total_blocks() - planes) * g.pages_per_block as u64;
        if (cfg.logical_pages as u64) > user_pages {
            return Err(FtlError::Config(format!(
                "logical space of {} pages exceeds {} physical pages",
                cfg.logical_pages, user_pages
            )));
        }
        let blocks = (0..g.total_blocks() as u32)
            .map(|b| BlockMeta {
                state: if b % g.blocks_per_plane == 0 { BlockState::Reserved } else { BlockState::Fresh },
                valid: 0,
                cursor: 0,
            })
            .collect();
        let dies = (0..g.total_dies())
            .map(|_| DiePool { fresh_next: 0, recycled: BTreeSet::new(), active: None })
            .collect();
        // channel-first striping: consecutive allocations land on consecutive channels
        let dpc = g.dies_per_channel();
        let die_order = (0..g.total_dies())
            .map(|i| (i % g.channels) * dpc + i / g.channels)
            .collect();
        let cap = NonZeroUsize::new(cfg.cache_capacity() as usize).expect("capacity >= 1");
        Ok(Self {
            table: vec![MappingEntry::default(); cfg.logical_pages as usize],
            cache: LruCache::new(cap),
            cfg,
            flash,
            declared: HashMap::new(),
            blocks,
            dies,
            die_order,
            rr: 0,
            user_pages,
            used_pages: 0,
            stats: FtlStats::default(),
        })
    }

    pub fn config(&self) -> &FtlConfig {
        &self.cfg
    }

    pub fn flash(&self) -> &FlashArray {
        &self.flash
    }

    pub fn flash_mut(&mut self) -> &mut FlashArray {
        &mut self.flash
    }

    pub fn stats(&self) -> FtlStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = FtlStats::default();
    }

    pub fn entries_per_tpage(&self) -> u32 {
        self.flash.geometry().page_size / ENTRY_BYTES as u32
    }

    pub fn free_ratio(&self) -> f64 {
        (self.user_pages - self.used_pages) as f64 / self.user_pages as f64
    }

    /// Authoritative (flash-resident) entry, bypassing the cache and all timing.
    pub fn entry(&self, lpa: u32) -> Result<MappingEntry, FtlError> {
        self.table.get(lpa as usize).copied().ok_or(FtlError::OutOfRange(lpa))
    }

    pub fn cached_entry(&self, lpa: u32) -> Option<MappingEntry> {
        self.cache.peek(&lpa).copied()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Offset of the cache slot for `lpa` within the protected region.
    pub fn entry_offset(&self, lpa: u32) -> u64 {
        (lpa as u64 % self.cfg.cache_capacity() as u64) * ENTRY_BYTES
    }

    pub fn flush_cache(&mut self) {
        self.cache.clear();
    }

    /// Records which unowned LPAs `tee` declared at creation.
    pub fn declare(&mut self, tee: u8, lpas: &[u32]) {
        self.declared.entry(tee).or_default().extend(lpas.iter().copied());
    }

    fn is_declared(&self, tee: u8, lpa: u32) -> bool {
        self.declared.get(&tee).is_some_and(|s| s.contains(&lpa))
    }

    fn tpage_ppa(&self, lpa: u32) -> Ppa {
        let g = self.flash.geometry();
        let t = lpa / self.entries_per_tpage();
        let planes = g.total_dies() * g.planes_per_die;
        let plane = t % planes;
        let page = (t / planes) % g.pages_per_block;
        let block = plane * g.blocks_per_plane;
        self.flash.ppa_of(block, page)
    }

    fn install_tpage(&mut self, lpa: u32) {
        let per = self.entries_per_tpage();
        let start = lpa / per * per;
        let end = (start + per).min(self.cfg.logical_pages);
        for l in start..end {
            if l != lpa {
                self.cache.put(l, self.table[l as usize]);
            }
        }
        // the requested entry goes in last so it is the most recently used
        self.cache.put(lpa, self.table[lpa as usize]);
    }

    /// Looks `lpa` up, servicing a miss from flash. Returns (entry, cost, missed).
    fn lookup(&mut self, lpa: u32, now: Nanos, in_secure: bool) -> Result<(MappingEntry, Nanos, bool), FtlError> {
        if lpa >= self.cfg.logical_pages {
            return Err(FtlError::OutOfRange(lpa));
        }
        self.stats.translations += 1;
        if let Some(e) = self.cache.get(&lpa) {
            self.stats.cache_hits += 1;
            return Ok((*e, self.cfg.entry_read_ns, false));
        }
        self.stats.cache_misses += 1;
        let cross = !in_secure && self.cfg.placement == MappingPlacement::ProtectedRegion;
        let sw = if cross { self.cfg.switch_ns } else { 0 };
        let issue = now + sw;
        let done = self.flash.read_metadata_page(self.tpage_ppa(lpa), issue)?;
        self.install_tpage(lpa);
        if cross {
            self.stats.round_trips += 1;
            self.stats.world_switches += 2;
        }
        let cost = (done - now) + sw + self.cfg.entry_read_ns;
        Ok((self.table[lpa as usize], cost, true))
    }

    fn authorize(&self, tee: u8, lpa: u32, e: MappingEntry) -> Result<Ppa, FtlError> {
        if !check_access(tee, e, self.is_declared(tee, lpa)) {
            return Err(FtlError::PermissionDenied { tee, lpa });
        }
        if !e.valid() {
            return Err(FtlError::UnmappedLpa(lpa));
        }
        Ok(e.ppa())
    }

    /// Single translation requested by TEE `tee` at time `now`.
    pub fn translate(&mut self, tee: u8, lpa: u32, now: Nanos) -> Result<Translation, FtlError> {
        let b = self.translate_batch(tee, &[lpa], now)?;
        Ok(Translation {
            ppa: b.ppas[0],
            cost: b.cost,
            world_switch: b.world_switches > 0,
            miss: b.misses > 0,
        })
    }

    /// Translates one I/O request worth of LPAs. With secure-world placement every page access
    /// makes its own round trip; with protected-region placement only misses cross worlds.
    pub fn translate_batch(&mut self, tee: u8, lpas: &[u32], now: Nanos) -> Result<BatchTranslation, FtlError> {
        let secure = self.cfg.placement == MappingPlacement::SecureWorld;
        let sw = self.cfg.switch_ns;
        let mut t = now;
        let mut switches = 0;
        let mut ppas = Vec::with_capacity(lpas.len());
        let mut misses = 0;
        for &lpa in lpas {
            if secure {
                t += sw;
                switches += 2;
                self.stats.round_trips += 1;
                self.stats.world_switches += 2;
            }
            let (e, cost, missed) = self.lookup(lpa, t, secure)?;
            t += cost;
            if missed {
                misses += 1;
                if self.cfg.placement == MappingPlacement::ProtectedRegion {
                    switches += 2;
                }
            }
            ppas.push(self.authorize(tee, lpa, e)?);
        }
        Ok(BatchTranslation { ppas, cost: t - now, misses, world_switches: switches })
    }

    /// Secure-world service of ReadMappingEntry: load the entry into the cache.
    pub fn read_mapping_entry(&mut self, tee: u8, lpa: u32, now: Nanos) -> Result<Translation, FtlError> {
        self.translate(tee, lpa, now)
    }

    /// Stamps `lpas` with `tee`. Entries already stamped with `tee` are left alone.
    pub fn set_id_bits(&mut self, tee: u8, lpas: &[u32]) -> Result<u64, FtlError> {
        for &lpa in lpas {
            let e = self.entry(lpa)?;
            if e.id() != UNOWNED && e.id() != tee {
                return Err(FtlError::AlreadyOwned { lpa, owner: e.id() });
            }
        }
        let mut n = 0;
        for &lpa in lpas {
            let e = self.table[lpa as usize];
            if e.id() != tee {
                self.update_entry(lpa, e.with_id(tee));
                n += 1;
            }
        }
        Ok(n)
    }

    /// Clears every ID stamp and declaration belonging to `tee`.
    pub fn release(&mut self, tee: u8) -> u64 {
        self.declared.remove(&tee);
        let mut n = 0;
        for lpa in 0..self.table.len() {
            let e = self.table[lpa];
            if e.id() == tee && tee != UNOWNED {
                self.update_entry(lpa as u32, e.with_id(UNOWNED));
                n += 1;
            }
        }
        n
    }

    fn update_entry(&mut self, lpa: u32, e: MappingEntry) {
        self.table[lpa as usize] = e;
        if let Some(c) = self.cache.peek_mut(&lpa) {
            *c = e;
        }
    }

    /// Secure-world write (the FTL itself, or the runtime populating a dataset). Returns completion.
    pub fn secure_write(&mut self, lpa: u32, content: &[u8], now: Nanos) -> Result<Nanos, FtlError> {
        if lpa >= self.cfg.logical_pages {
            return Err(FtlError::OutOfRange(lpa));
        }
        if self.free_ratio() < self.cfg.gc_low_watermark {
            self.garbage_collect(now)?;
        }
        self.stats.host_writes += 1;
        let ppa = self.alloc_page()?;
        let done = self.flash.program_page(ppa, content, Some(lpa), now)?;
        self.remap(lpa, ppa)?;
        Ok(done)
    }

    /// Write issued by TEE `tee`; the LPA must pass the access check.
    pub fn write(&mut self, tee: u8, lpa: u32, content: &[u8], now: Nanos) -> Result<Nanos, FtlError> {
        let e = self.entry(lpa)?;
        if !check_access(tee, e, self.is_declared(tee, lpa)) {
            return Err(FtlError::PermissionDenied { tee, lpa });
        }
        self.secure_write(lpa, content, now)
    }

    /// Reads the current content of `lpa` without timing or permission checks (test oracle hook).
    pub fn peek(&mut self, lpa: u32) -> Result<Vec<u8>, FtlError> {
        let e = self.entry(lpa)?;
        if !e.valid() {
            return Err(FtlError::UnmappedLpa(lpa));
        }
        Ok(self.flash.read_page(e.ppa(), 0)?.data)
    }

    fn remap(&mut self, lpa: u32, ppa: Ppa) -> Result<(), FtlError> {
        let old = self.table[lpa as usize];
        if old.valid() {
            self.flash.invalidate_page(old.ppa())?;
            let b = self.block_of(old.ppa());
            self.blocks[b].valid -= 1;
        }
        let b = self.block_of(ppa);
        self.blocks[b].valid += 1;
        self.update_entry(lpa, old.with_ppa(ppa));
        Ok(())
    }

    fn block_of(&self, ppa: Ppa) -> usize {
        let g = self.flash.geometry();
        let a = g.decode(ppa).expect("FTL only handles in-range PPAs");
        g.block_index(&a) as usize
    }

    fn take_free_block(&mut self, die: u32) -> Option<u32> {
        let g = *self.flash.geometry();
        let bpd = g.blocks_per_die();
        let pool = &mut self.dies[die as usize];
        while pool.fresh_next < bpd {
            let b = die * bpd + pool.fresh_next;
            pool.fresh_next += 1;
            if self.blocks[b as usize].state == BlockState::Fresh {
                return Some(b);
            }
        }
        pool.recycled.pop_first().map(|(_, b)| b)
    }

    fn alloc_on_die(&mut self, die: u32) -> Option<Ppa> {
        let ppb = self.flash.geometry().pages_per_block;
        let active = match self.dies[die as usize].active {
            Some(b) => b,
            None => {
                let b = self.take_free_block(die)?;
                self.blocks[b as usize].state = BlockState::Active;
                self.dies[die as usize].active = Some(b);
                b
            }
        };
        let meta = &mut self.blocks[active as usize];
        let page = meta.cursor;
        meta.cursor += 1;
        if meta.cursor == ppb {
            meta.state = BlockState::Full;
            self.dies[die as usize].active = None;
        }
        self.used_pages += 1;
        Some(self.flash.ppa_of(active, page))
    }

    fn alloc_page(&mut self) -> Result<Ppa, FtlError> {
        let n = self.die_order.len();
        for i in 0..n {
            let die = self.die_order[(self.rr + i) % n];
            if let Some(ppa) = self.alloc_on_die(die) {
                self.rr = (self.rr + i + 1) % n;
                return Ok(ppa);
            }
        }
        Err(FtlError::DeviceFull)
    }

    /// Moves every valid page out of `block` and erases it. Returns (relocated, completion).
    fn evacuate(&mut self, block: u32, now: Nanos) -> Result<(u64, Nanos), FtlError> {
        let statuses = self.flash.block_pages(block);
        let mut t = now;
        let mut moved = 0;
        for (page, st) in statuses.iter().enumerate() {
            if *st != PageStatus::Valid {
                continue;
            }
            let src = self.flash.ppa_of(block, page as u32);
            let lpa = self.flash.page_owner(src)?.expect("valid pages have an owner");
            let rd = self.flash.read_page(src, now)?;
            let dst = self.alloc_page()?;
            let done = self.flash.program_page(dst, &rd.data, Some(lpa), rd.completion)?;
            self.remap(lpa, dst)?;
            t = t.max(done);
            moved += 1;
        }
        let done = self.flash.erase_block(block, t)?;
        let meta = &mut self.blocks[block as usize];
        debug_assert_eq!(meta.valid, 0);
        self.used_pages -= meta.cursor as u64;
        *meta = BlockMeta { state: BlockState::Free, valid: 0, cursor: 0 };
        let g = self.flash.geometry();
        let die = block / g.blocks_per_die();
        let ec = self.flash.erase_count(block);
        self.dies[die as usize].recycled.insert((ec, block));
        Ok((moved, done))
    }

    fn gc_victim(&self) -> Option<u32> {
        let ppb = self.flash.geometry().pages_per_block;
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, m)| m.state == BlockState::Full && m.valid < ppb)
            .min_by_key(|(i, m)| (m.valid, *i))
            .map(|(i, _)| i as u32)
    }

    /// Greedy GC: reclaims at least one victim (if any exists) and keeps going until the free
    /// ratio reaches the high watermark.
    pub fn garbage_collect(&mut self, now: Nanos) -> Result<GcOutcome, FtlError> {
        let mut out = GcOutcome::default();
        let mut end = now;
        while let Some(v) = self.gc_victim() {
            let (moved, done) = self.evacuate(v, now)?;
            out.relocated += moved;
            out.erased_blocks += 1;
            end = end.max(done);
            if self.free_ratio() >= self.cfg.gc_high_watermark {
                break;
            }
        }
        if out.erased_blocks > 0 {
            self.stats.gc_runs += 1;
        }
        self.stats.gc_relocations += out.relocated;
        self.stats.gc_erases += out.erased_blocks;
        out.cost = end - now;
        Ok(out)
    }

    /// (min, max) erase count over user blocks.
    pub fn erase_spread(&self) -> (u32, u32) {
        let mut lo = u32::MAX;
        let mut hi = 0;
        for (i, m) in self.blocks.iter().enumerate() {
            if m.state != BlockState::Reserved {
                let ec = self.flash.erase_count(i as u32);
                lo = lo.min(ec);
                hi = hi.max(ec);
            }
        }
        (lo, hi)
    }

    /// Migrates cold data out of the least-erased full blocks while the spread exceeds the threshold.
    /// Returns the number of blocks migrated.
    pub fn wear_level(&mut self, now: Nanos) -> Result<u64, FtlError> {
        let (_, hi) = self.erase_spread();
        let th = self.cfg.wear_level_threshold;
        let mut cold: Vec<(u32, u32)> = self
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, m)| m.state == BlockState::Full)
            .map(|(i, _)| (self.flash.erase_count(i as u32), i as u32))
            .filter(|(ec, _)| hi - ec > th)
            .collect();
        cold.sort_unstable();
        let mut migrations = 0;
        for (_, b) in cold {
            // keep a margin so migration never runs the device dry
            if self.free_ratio() < self.cfg.gc_low_watermark / 2.0 {
                break;
            }
            let (moved, _) = self.evacuate(b, now)?;
            self.stats.wl_relocations += moved;
            migrations += 1;
        }
        self.stats.wl_migrations += migrations;
        Ok(migrations)
    }

    /// Number of VALID physical pages currently owned by `lpa` (scans the array; test helper).
    pub fn valid_copies(&self, lpa: u32) -> u64 {
        let mut n = 0;
        for (i, m) in self.blocks.iter().enumerate() {
            if m.cursor == 0 {
                continue;
            }
            for (p, st) in self.flash.block_pages(i as u32).iter().enumerate() {
                if *st == PageStatus::Valid
                    && self.flash.page_owner(self.flash.ppa_of(i as u32, p as u32)).ok().flatten() == Some(lpa)
                {
                    n += 1;
                }
            }
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flash::{FlashGeometry, FlashTimings};

    fn tiny_geometry() -> FlashGeometry {
        FlashGeometry {
            channels: 2,
            chips_per_channel: 1,
            dies_per_chip: 2,
            planes_per_die: 1,
            blocks_per_plane: 16,
            pages_per_block: 8,
            page_size: 512,
        }
    }

    fn ftl(logical: u32) -> Ftl {
        let flash = FlashArray::new(tiny_geometry(), FlashTimings::default()).unwrap();
        Ftl::new(flash, FtlConfig { logical_pages: logical, ..Default::default() }).unwrap()
    }

    fn page(byte: u8) -> Vec<u8> {
        vec![byte; 512]
    }

    #[test]
    fn entry_packing() {
        let e = MappingEntry::new(Ppa(0xDEAD_BEEF), 3, true);
        assert_eq!(e.ppa(), Ppa(0xDEAD_BEEF));
        assert_eq!(e.id(), 3);
        assert!(e.valid());
        assert_eq!(e.with_id(9).id(), 9);
        assert_eq!(e.with_id(9).ppa(), Ppa(0xDEAD_BEEF));
        assert_eq!(e.0 >> 37, 0, "reserved bits stay clear");
        // 4 ID bits out of 64
        assert_eq!(4.0 / 64.0, 0.0625);
    }

    #[test]
    fn access_rule() {
        let e = MappingEntry::new(Ppa(1), 3, true);
        assert!(check_access(3, e, false));
        assert!(!check_access(5, e, true));
        let unowned = MappingEntry::new(Ppa(1), UNOWNED, true);
        assert!(check_access(5, unowned, true));
        assert!(!check_access(5, unowned, false));
    }

    #[test]
    fn write_then_translate_and_old_page_invalid() {
        let mut f = ftl(32);
        f.set_id_bits(1, &[7]).unwrap();
        f.write(1, 7, &page(1), 0).unwrap();
        let first = f.entry(7).unwrap().ppa();
        f.write(1, 7, &page(2), 0).unwrap();
        let t = f.translate(1, 7, 0).unwrap();
        assert_ne!(t.ppa, first);
        assert_eq!(f.flash().page_status(first).unwrap(), PageStatus::Invalid);
        assert_eq!(f.peek(7).unwrap(), page(2));
    }

    #[test]
    fn repeated_writes_leave_one_valid_copy() {
        let mut f = ftl(32);
        for i in 0..20u8 {
            f.secure_write(3, &page(i), 0).unwrap();
        }
        assert_eq!(f.valid_copies(3), 1);
        assert_eq!(f.flash().stats().page_programs, 20);
    }

    #[test]
    fn hit_and_miss_costs() {
        let mut f = ftl(32);
        f.secure_write(0, &page(0), 0).unwrap();
        f.flash_mut().reset_timing();
        let miss = f.translate(UNOWNED, 0, 0).unwrap();
        assert!(miss.miss && miss.world_switch);
        // 2 switches + tRD + one page transfer on an idle channel + the cached read
        let xfer = crate::flash::transfer_ns(512, 600_000_000);
        assert_eq!(miss.cost, 2 * 3_800 + 50_000 + xfer + 50);
        let hit = f.translate(UNOWNED, 0, miss.cost).unwrap();
        assert!(!hit.miss && !hit.world_switch);
        assert_eq!(hit.cost, 50);
        assert_eq!(f.stats().world_switches, 2);
        assert_eq!(f.stats().round_trips, f.stats().cache_misses);
    }

    #[test]
    fn foreign_entry_denied() {
        let mut f = ftl(32);
        f.secure_write(4, &page(4), 0).unwrap();
        f.set_id_bits(3, &[4]).unwrap();
        assert!(f.translate(3, 4, 0).is_ok());
        assert_eq!(f.translate(5, 4, 0).unwrap_err(), FtlError::PermissionDenied { tee: 5, lpa: 4 });
        assert_eq!(f.write(5, 4, &page(9), 0).unwrap_err(), FtlError::PermissionDenied { tee: 5, lpa: 4 });
    }

    #[test]
    fn unowned_needs_declaration() {
        let mut f = ftl(32);
        f.secure_write(2, &page(2), 0).unwrap();
        assert!(f.translate(6, 2, 0).is_err());
        f.declare(6, &[2]);
        assert!(f.translate(6, 2, 0).is_ok());
        f.release(6);
        assert!(f.translate(6, 2, 0).is_err());
    }

    #[test]
    fn set_id_bits_conflicts() {
        let mut f = ftl(32);
        assert_eq!(f.set_id_bits(1, &[]).unwrap(), 0);
        assert_eq!(f.set_id_bits(1, &[1, 2]).unwrap(), 2);
        assert_eq!(f.set_id_bits(1, &[1, 2]).unwrap(), 0);
        assert_eq!(f.set_id_bits(2, &[2]).unwrap_err(), FtlError::AlreadyOwned { lpa: 2, owner: 1 });
        assert_eq!(f.release(1), 2);
        assert_eq!(f.set_id_bits(2, &[2]).unwrap(), 1);
    }

    #[test]
    fn unmapped_and_out_of_range() {
        let mut f = ftl(32);
        assert_eq!(f.translate(UNOWNED, 5, 0).unwrap_err(), FtlError::UnmappedLpa(5));
        assert_eq!(f.translate(UNOWNED, 32, 0).unwrap_err(), FtlError::OutOfRange(32));
    }

    #[test]
    fn gc_on_clean_device_does_nothing() {
        let mut f = ftl(32);
        for l in 0..16 {
            f.secure_write(l, &page(l as u8), 0).unwrap();
        }
        let out = f.garbage_collect(0).unwrap();
        assert_eq!((out.relocated, out.erased_blocks), (0, 0));
    }

    #[test]
    fn gc_of_fully_invalid_block_erases_only() {
        let mut f = ftl(32);
        // 8 pages per block, 4 dies: 32 writes fill one block per die
        for l in 0..32 {
            f.secure_write(l, &page(1), 0).unwrap();
        }
        for l in 0..32 {
            f.secure_write(l, &page(2), 0).unwrap();
        }
        let out = f.garbage_collect(0).unwrap();
        assert!(out.erased_blocks >= 1);
        assert_eq!(out.relocated, 0);
        for l in 0..32 {
            assert_eq!(f.peek(l).unwrap(), page(2));
        }
    }

    #[test]
    fn cache_agrees_with_table_after_flush() {
        let mut f = ftl(64);
        for l in 0..64 {
            f.secure_write(l, &page(l as u8), 0).unwrap();
        }
        let before: Vec<_> = (0..64).map(|l| f.translate(UNOWNED, l, 0).unwrap().ppa).collect();
        for l in 0..64 {
            f.secure_write(l, &page(0xAA), 0).unwrap();
            if let Some(c) = f.cached_entry(l) {
                assert_eq!(c, f.entry(l).unwrap());
            }
        }
        f.flush_cache();
        let after: Vec<_> = (0..64).map(|l| f.translate(UNOWNED, l, 0).unwrap().ppa).collect();
        assert_ne!(before, after);
        for l in 0..64 {
            assert_eq!(after[l as usize], f.entry(l).unwrap().ppa());
        }
    }

    #[test]
    fn writes_stripe_across_channels() {
        let mut f = ftl(32);
        let g = tiny_geometry();
        let chans: Vec<u32> = (0..4)
            .map(|l| {
                f.secure_write(l, &page(0), 0).unwrap();
                g.decode(f.entry(l).unwrap().ppa()).unwrap().channel
            })
            .collect();
        assert_eq!(chans, vec![0, 1, 0, 1]);
    }

    #[test]
    fn secure_placement_switches_for_every_page() {
        let flash = FlashArray::new(tiny_geometry(), FlashTimings::default()).unwrap();
        let cfg = FtlConfig {
            logical_pages: 64,
            placement: MappingPlacement::SecureWorld,
            ..Default::default()
        };
        let mut f = Ftl::new(flash, cfg).unwrap();
        for l in 0..64 {
            f.secure_write(l, &page(0), 0).unwrap();
        }
        let lpas: Vec<u32> = (0..32).collect();
        let b = f.translate_batch(UNOWNED, &lpas, 0).unwrap();
        assert_eq!(b.world_switches, 64);
        assert_eq!(f.stats().round_trips, 32);
    }
}
