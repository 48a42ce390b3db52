//! NAND flash array: geometry, physical page addresses, page state and a timing model.
//!
//! Array access (tR / tPROG / tBERS) occupies a die; the data transfer occupies the channel bus.
//! Dies work in parallel, transfers on one channel are serialized. The two phases of one page
//! operation are additive.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::Nanos;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlashError {
    #[error("address out of bounds: {0}")]
    OutOfBounds(String),
    #[error("read of free page {0:?}")]
    ReadOfFreePage(Ppa),
    #[error("program of non-free page {0:?}")]
    ProgramOfNonFreePage(Ppa),
    #[error("content length {got} does not match page size {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlashGeometry {
    pub channels: u32,
    pub chips_per_channel: u32,
    pub dies_per_chip: u32,
    pub planes_per_die: u32,
    pub blocks_per_plane: u32,
    pub pages_per_block: u32,
    pub page_size: u32,
}

impl Default for FlashGeometry {
    fn default() -> Self {
        Self {
            channels: 8,
            chips_per_channel: 4,
            dies_per_chip: 4,
            planes_per_die: 2,
            blocks_per_plane: 2048,
            pages_per_block: 512,
            page_size: 4096,
        }
    }
}

fn bits_for(count: u32) -> u32 {
    if count <= 1 {
        0
    } else {
        32 - (count - 1).leading_zeros()
    }
}

impl FlashGeometry {
    pub fn validate(&self) -> Result<(), FlashError> {
        let counts = [
            ("channels", self.channels),
            ("chips_per_channel", self.chips_per_channel),
            ("dies_per_chip", self.dies_per_chip),
            ("planes_per_die", self.planes_per_die),
            ("blocks_per_plane", self.blocks_per_plane),
            ("pages_per_block", self.pages_per_block),
            ("page_size", self.page_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(FlashError::InvalidGeometry(format!("{name} must be >= 1")));
            }
        }
        if !self.page_size.is_power_of_two() {
            return Err(FlashError::InvalidGeometry(format!(
                "page_size {} is not a power of two",
                self.page_size
            )));
        }
        if self.page_size % 64 != 0 {
            return Err(FlashError::InvalidGeometry(
                "page_size must be a multiple of 64 bytes".into(),
            ));
        }
        if self.ppa_bits() > 32 {
            return Err(FlashError::InvalidGeometry(format!(
                "geometry needs {} address bits, PPA is 32 bits",
                self.ppa_bits()
            )));
        }
        Ok(())
    }

    fn widths(&self) -> [u32; 6] {
        [
            bits_for(self.pages_per_block),
            bits_for(self.blocks_per_plane),
            bits_for(self.planes_per_die),
            bits_for(self.dies_per_chip),
            bits_for(self.chips_per_channel),
            bits_for(self.channels),
        ]
    }

    pub fn ppa_bits(&self) -> u32 {
        self.widths().iter().sum()
    }

    pub fn total_dies(&self) -> u32 {
        self.channels * self.chips_per_channel * self.dies_per_chip
    }

    pub fn dies_per_channel(&self) -> u32 {
        self.chips_per_channel * self.dies_per_chip
    }

    pub fn blocks_per_die(&self) -> u32 {
        self.planes_per_die * self.blocks_per_plane
    }

    pub fn total_blocks(&self) -> u64 {
        self.total_dies() as u64 * self.blocks_per_die() as u64
    }

    pub fn total_pages(&self) -> u64 {
        self.total_blocks() * self.pages_per_block as u64
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.total_pages() * self.page_size as u64
    }

    pub fn encode(&self, a: &PageAddr) -> Result<Ppa, FlashError> {
        self.check(a)?;
        let w = self.widths();
        let fields = [a.page, a.block, a.plane, a.die, a.chip, a.channel];
        let mut raw = 0u32;
        let mut shift = 0;
        for (v, width) in fields.iter().zip(w) {
            raw |= v << shift;
            shift += width;
        }
        Ok(Ppa(raw))
    }

    pub fn decode(&self, ppa: Ppa) -> Result<PageAddr, FlashError> {
        let w = self.widths();
        let mut fields = [0u32; 6];
        let mut shift = 0;
        for (f, width) in fields.iter_mut().zip(w) {
            *f = if width == 0 { 0 } else { (ppa.0 >> shift) & ((1u32 << width) - 1) };
            shift += width;
        }
        if shift < 32 && (ppa.0 >> shift) != 0 {
            return Err(FlashError::OutOfBounds(format!("{ppa:?} has bits above the PPA width")));
        }
        let a = PageAddr {
            page: fields[0],
            block: fields[1],
            plane: fields[2],
            die: fields[3],
            chip: fields[4],
            channel: fields[5],
        };
        self.check(&a)?;
        Ok(a)
    }

    fn check(&self, a: &PageAddr) -> Result<(), FlashError> {
        let ok = a.channel < self.channels
            && a.chip < self.chips_per_channel
            && a.die < self.dies_per_chip
            && a.plane < self.planes_per_die
            && a.block < self.blocks_per_plane
            && a.page < self.pages_per_block;
        if ok {
            Ok(())
        } else {
            Err(FlashError::OutOfBounds(format!("{a:?}")))
        }
    }

    /// Global die index, channel-major: dies of channel 0 come first.
    pub fn die_index(&self, a: &PageAddr) -> u32 {
        (a.channel * self.chips_per_channel + a.chip) * self.dies_per_chip + a.die
    }

    pub fn block_index(&self, a: &PageAddr) -> u32 {
        self.die_index(a) * self.blocks_per_die() + a.plane * self.blocks_per_plane + a.block
    }

    /// Inverse of [`block_index`](Self::block_index); the page field is zero.
    pub fn block_addr(&self, block_index: u32) -> PageAddr {
        let bpd = self.blocks_per_die();
        let die = block_index / bpd;
        let within = block_index % bpd;
        let dpc = self.dies_per_channel();
        PageAddr {
            channel: die / dpc,
            chip: (die % dpc) / self.dies_per_chip,
            die: die % self.dies_per_chip,
            plane: within / self.blocks_per_plane,
            block: within % self.blocks_per_plane,
            page: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlashTimings {
    pub t_rd_ns: Nanos,
    pub t_wr_ns: Nanos,
    pub t_erase_ns: Nanos,
    /// Bytes per second on one channel bus.
    pub channel_bw: u64,
    /// Bytes per second on the host link.
    pub external_bw: u64,
}

impl Default for FlashTimings {
    fn default() -> Self {
        Self {
            t_rd_ns: 50_000,
            t_wr_ns: 300_000,
            t_erase_ns: 3_000_000,
            channel_bw: 600_000_000,
            external_bw: 3_200_000_000,
        }
    }
}

impl FlashTimings {
    pub fn validate(&self) -> Result<(), FlashError> {
        if self.t_rd_ns == 0 || self.t_wr_ns == 0 || self.t_erase_ns == 0 {
            return Err(FlashError::InvalidGeometry("latencies must be positive".into()));
        }
        if self.channel_bw == 0 || self.external_bw == 0 {
            return Err(FlashError::InvalidGeometry("bandwidths must be positive".into()));
        }
        if self.t_wr_ns < self.t_rd_ns {
            return Err(FlashError::InvalidGeometry("t_wr must be >= t_rd".into()));
        }
        Ok(())
    }

    pub fn channel_transfer_ns(&self, bytes: u64) -> Nanos {
        transfer_ns(bytes, self.channel_bw)
    }

    pub fn external_transfer_ns(&self, bytes: u64) -> Nanos {
        transfer_ns(bytes, self.external_bw)
    }
}

/// `ceil(bytes / bw)` in nanoseconds.
pub fn transfer_ns(bytes: u64, bytes_per_sec: u64) -> Nanos {
    ((bytes as u128 * 1_000_000_000u128).div_ceil(bytes_per_sec as u128)) as Nanos
}

/// Packed physical page address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Ppa(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PageAddr {
    pub channel: u32,
    pub chip: u32,
    pub die: u32,
    pub plane: u32,
    pub block: u32,
    pub page: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageStatus {
    Free,
    Valid,
    Invalid,
}

const NO_OWNER: u32 = u32::MAX;

#[derive(Debug)]
struct BlockPages {
    status: Vec<PageStatus>,
    owner: Vec<u32>,
    data: Vec<Option<Box<[u8]>>>,
}

impl BlockPages {
    fn new(pages: usize) -> Self {
        Self {
            status: vec![PageStatus::Free; pages],
            owner: vec![NO_OWNER; pages],
            data: (0..pages).map(|_| None).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashStats {
    pub page_reads: u64,
    pub page_programs: u64,
    pub block_erases: u64,
    pub metadata_reads: u64,
}

/// Timed result of a page read.
#[derive(Debug, Clone)]
pub struct ReadDone {
    pub data: Vec<u8>,
    pub completion: Nanos,
    /// When the page left the die and its transfer began.
    pub transfer_start: Nanos,
}

#[derive(Debug)]
pub struct FlashArray {
    geometry: FlashGeometry,
    timings: FlashTimings,
    materialize: bool,
    blocks: Vec<Option<Box<BlockPages>>>,
    erase_counts: Vec<u32>,
    die_free: Vec<Nanos>,
    channel_free: Vec<Nanos>,
    stats: FlashStats,
}

impl FlashArray {
    pub fn new(geometry: FlashGeometry, timings: FlashTimings) -> Result<Self, FlashError> {
        geometry.validate()?;
        timings.validate()?;
        let nblocks = geometry.total_blocks() as usize;
        Ok(Self {
            geometry,
            timings,
            materialize: true,
            blocks: (0..nblocks).map(|_| None).collect(),
            erase_counts: vec![0; nblocks],
            die_free: vec![0; geometry.total_dies() as usize],
            channel_free: vec![0; geometry.channels as usize],
            stats: FlashStats::default(),
        })
    }

    /// With materialization off, programmed contents are dropped and reads return zeros.
    pub fn set_materialize(&mut self, on: bool) {
        self.materialize = on;
    }

    pub fn geometry(&self) -> &FlashGeometry {
        &self.geometry
    }

    pub fn timings(&self) -> &FlashTimings {
        &self.timings
    }

    pub fn stats(&self) -> FlashStats {
        self.stats
    }

    /// Clears all busy horizons; used after untimed setup such as dataset population.
    pub fn reset_timing(&mut self) {
        self.die_free.iter_mut().for_each(|t| *t = 0);
        self.channel_free.iter_mut().for_each(|t| *t = 0);
    }

    /// Shifts every busy horizon so that nothing is busy before `t`.
    pub fn align_timing(&mut self, t: Nanos) {
        self.die_free.iter_mut().for_each(|x| *x = (*x).max(t));
        self.channel_free.iter_mut().for_each(|x| *x = (*x).max(t));
    }

    pub fn channel_free_at(&self, channel: u32) -> Nanos {
        self.channel_free[channel as usize]
    }

    fn locate(&self, ppa: Ppa) -> Result<(PageAddr, usize, usize), FlashError> {
        let a = self.geometry.decode(ppa)?;
        let b = self.geometry.block_index(&a) as usize;
        Ok((a, b, a.page as usize))
    }

    pub fn page_status(&self, ppa: Ppa) -> Result<PageStatus, FlashError> {
        let (_, b, p) = self.locate(ppa)?;
        Ok(self.blocks[b].as_ref().map_or(PageStatus::Free, |blk| blk.status[p]))
    }

    pub fn page_owner(&self, ppa: Ppa) -> Result<Option<u32>, FlashError> {
        let (_, b, p) = self.locate(ppa)?;
        Ok(self.blocks[b]
            .as_ref()
            .and_then(|blk| (blk.owner[p] != NO_OWNER).then_some(blk.owner[p])))
    }

    pub fn erase_count(&self, block_index: u32) -> u32 {
        self.erase_counts[block_index as usize]
    }

    pub fn erase_counts(&self) -> &[u32] {
        &self.erase_counts
    }

    fn reserve_read(&mut self, a: &PageAddr, issue_at: Nanos) -> (Nanos, Nanos) {
        let die = self.geometry.die_index(a) as usize;
        let ch = a.channel as usize;
        let array_end = issue_at.max(self.die_free[die]) + self.timings.t_rd_ns;
        let xfer_start = array_end.max(self.channel_free[ch]);
        let end = xfer_start + self.timings.channel_transfer_ns(self.geometry.page_size as u64);
        self.channel_free[ch] = end;
        self.die_free[die] = end;
        (xfer_start, end)
    }

    /// Reads a VALID page. Completion = array read on the die, then the transfer on the channel.
    pub fn read_page(&mut self, ppa: Ppa, issue_at: Nanos) -> Result<ReadDone, FlashError> {
        let (a, b, p) = self.locate(ppa)?;
        let blk = self.blocks[b].as_ref();
        let status = blk.map_or(PageStatus::Free, |blk| blk.status[p]);
        if status == PageStatus::Free {
            return Err(FlashError::ReadOfFreePage(ppa));
        }
        let data = blk
            .and_then(|blk| blk.data[p].as_ref())
            .map(|d| d.to_vec())
            .unwrap_or_else(|| vec![0; self.geometry.page_size as usize]);
        let (transfer_start, completion) = self.reserve_read(&a, issue_at);
        self.stats.page_reads += 1;
        Ok(ReadDone { data, completion, transfer_start })
    }

    /// Timed read of a firmware metadata page (translation pages). No state is checked.
    pub fn read_metadata_page(&mut self, ppa: Ppa, issue_at: Nanos) -> Result<Nanos, FlashError> {
        let (a, _, _) = self.locate(ppa)?;
        let (_, end) = self.reserve_read(&a, issue_at);
        self.stats.metadata_reads += 1;
        Ok(end)
    }

    /// Programs a FREE page. Completion = transfer on the channel, then tPROG on the die.
    pub fn program_page(
        &mut self,
        ppa: Ppa,
        content: &[u8],
        owner_lpa: Option<u32>,
        issue_at: Nanos,
    ) -> Result<Nanos, FlashError> {
        let (a, b, p) = self.locate(ppa)?;
        let ps = self.geometry.page_size as usize;
        if content.len() != ps {
            return Err(FlashError::BadLength { got: content.len(), expected: ps });
        }
        let ppb = self.geometry.pages_per_block as usize;
        let blk = self.blocks[b].get_or_insert_with(|| Box::new(BlockPages::new(ppb)));
        if blk.status[p] != PageStatus::Free {
            return Err(FlashError::ProgramOfNonFreePage(ppa));
        }
        blk.status[p] = PageStatus::Valid;
        blk.owner[p] = owner_lpa.unwrap_or(NO_OWNER);
        blk.data[p] = if self.materialize { Some(content.into()) } else { None };

        let die = self.geometry.die_index(&a) as usize;
        let ch = a.channel as usize;
        let start = issue_at.max(self.die_free[die]).max(self.channel_free[ch]);
        let xfer_end = start + self.timings.channel_transfer_ns(ps as u64);
        self.channel_free[ch] = xfer_end;
        let end = xfer_end + self.timings.t_wr_ns;
        self.die_free[die] = end;
        self.stats.page_programs += 1;
        Ok(end)
    }

    /// Marks a VALID page INVALID (out-of-band metadata update, untimed).
    pub fn invalidate_page(&mut self, ppa: Ppa) -> Result<(), FlashError> {
        let (_, b, p) = self.locate(ppa)?;
        if let Some(blk) = self.blocks[b].as_mut() {
            if blk.status[p] == PageStatus::Valid {
                blk.status[p] = PageStatus::Invalid;
                blk.data[p] = None;
            }
        }
        Ok(())
    }

    /// Erases a whole block. Live pages are not checked here; relocation policy is the FTL's job.
    pub fn erase_block(&mut self, block_index: u32, issue_at: Nanos) -> Result<Nanos, FlashError> {
        if block_index as u64 >= self.geometry.total_blocks() {
            return Err(FlashError::OutOfBounds(format!("block {block_index}")));
        }
        let a = self.geometry.block_addr(block_index);
        self.blocks[block_index as usize] = None;
        self.erase_counts[block_index as usize] += 1;
        let die = self.geometry.die_index(&a) as usize;
        let end = issue_at.max(self.die_free[die]) + self.timings.t_erase_ns;
        self.die_free[die] = end;
        self.stats.block_erases += 1;
        Ok(end)
    }

    /// Status of every page in a block.
    pub fn block_pages(&self, block_index: u32) -> Vec<PageStatus> {
        let ppb = self.geometry.pages_per_block as usize;
        match self.blocks[block_index as usize].as_ref() {
            Some(b) => b.status.clone(),
            None => vec![PageStatus::Free; ppb],
        }
    }

    pub fn ppa_of(&self, block_index: u32, page: u32) -> Ppa {
        let mut a = self.geometry.block_addr(block_index);
        a.page = page;
        self.geometry.encode(&a).expect("block index in range")
    }
}
