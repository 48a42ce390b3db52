//! Set-associative, write-back, LRU cache holding 64-byte lines (the in-storage core's L2).

use serde::{Deserialize, Serialize};

pub const LINE: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheGeometry {
    pub bytes: u64,
    pub ways: u32,
}

impl Default for CacheGeometry {
    fn default() -> Self {
        Self { bytes: 1 << 20, ways: 16 }
    }
}

impl CacheGeometry {
    pub fn sets(&self) -> u64 {
        (self.bytes / LINE / self.ways as u64).max(1)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub loads: u64,
    pub stores: u64,
    pub hits: u64,
    pub misses: u64,
    pub writebacks: u64,
}

#[derive(Debug, Clone)]
struct Way {
    tag: u64,
    valid: bool,
    dirty: bool,
    stamp: u64,
    data: [u8; 64],
}

/// What the backing store must do for one access.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Access {
    pub hit: bool,
    /// Line address that has to be fetched (on a miss).
    pub fill: Option<u64>,
    /// Dirty victim to write back, with its data.
    pub writeback: Option<(u64, [u8; 64])>,
}

#[derive(Debug, Clone)]
pub struct Cache {
    geo: CacheGeometry,
    sets: u64,
    ways: Vec<Way>,
    clock: u64,
    stats: CacheStats,
}

impl Cache {
    pub fn new(geo: CacheGeometry) -> Self {
        let sets = geo.sets();
        let n = (sets * geo.ways as u64) as usize;
        let w = Way { tag: 0, valid: false, dirty: false, stamp: 0, data: [0; 64] };
        Self { geo, sets, ways: vec![w; n], clock: 0, stats: CacheStats::default() }
    }

    pub fn geometry(&self) -> CacheGeometry {
        self.geo
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    fn slot(&self, line: u64) -> (usize, u64) {
        let set = (line % self.sets) as usize;
        (set * self.geo.ways as usize, line / self.sets)
    }

    /// Looks up the line holding `addr`. On a miss the caller must fetch `fill` and pass the bytes to
    /// [`fill`](Self::fill); the victim (if dirty) is reported for write-back.
    pub fn lookup(&mut self, addr: u64, write: bool) -> Access {
        self.clock += 1;
        if write {
            self.stats.stores += 1;
        } else {
            self.stats.loads += 1;
        }
        let line = addr / LINE;
        let (base, tag) = self.slot(line);
        let ways = self.geo.ways as usize;
        for w in &mut self.ways[base..base + ways] {
            if w.valid && w.tag == tag {
                w.stamp = self.clock;
                w.dirty |= write;
                self.stats.hits += 1;
                return Access { hit: true, fill: None, writeback: None };
            }
        }
        self.stats.misses += 1;
        let victim = self.ways[base..base + ways]
            .iter()
            .enumerate()
            .min_by_key(|(_, w)| (w.valid, w.stamp))
            .map(|(i, _)| base + i)
            .expect("ways >= 1");
        let v = &mut self.ways[victim];
        let writeback = (v.valid && v.dirty).then(|| {
            self.stats.writebacks += 1;
            ((v.tag * self.sets + (line % self.sets)) * LINE, v.data)
        });
        *v = Way { tag, valid: true, dirty: write, stamp: self.clock, data: [0; 64] };
        Access { hit: false, fill: Some(line * LINE), writeback }
    }

    /// Installs fetched bytes for a line that [`lookup`](Self::lookup) just allocated.
    pub fn fill(&mut self, addr: u64, data: [u8; 64]) {
        if let Some(w) = self.way_mut(addr) {
            w.data = data;
        }
    }

    fn way_mut(&mut self, addr: u64) -> Option<&mut Way> {
        let (base, tag) = self.slot(addr / LINE);
        let ways = self.geo.ways as usize;
        self.ways[base..base + ways].iter_mut().find(|w| w.valid && w.tag == tag)
    }

    pub fn data(&mut self, addr: u64) -> Option<&mut [u8; 64]> {
        self.way_mut(addr).map(|w| &mut w.data)
    }

    /// Drops every line in `[start, end)` without writing it back.
    pub fn invalidate_range(&mut self, start: u64, end: u64) {
        let sets = self.sets;
        let ways = self.geo.ways as u64;
        for (i, w) in self.ways.iter_mut().enumerate() {
            let set = i as u64 / ways;
            let addr = (w.tag * sets + set) * LINE;
            if w.valid && addr >= start && addr < end {
                w.valid = false;
                w.dirty = false;
            }
        }
    }

    /// Returns and cleans every dirty line.
    pub fn drain_dirty(&mut self) -> Vec<(u64, [u8; 64])> {
        let sets = self.sets;
        let ways = self.geo.ways as u64;
        let mut out = Vec::new();
        for (i, w) in self.ways.iter_mut().enumerate() {
            if w.valid && w.dirty {
                let set = i as u64 / ways;
                out.push(((w.tag * sets + set) * LINE, w.data));
                w.dirty = false;
            }
        }
        out.sort_by_key(|(a, _)| *a);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hit_after_fill() {
        let mut c = Cache::new(CacheGeometry { bytes: 4096, ways: 4 });
        let a = c.lookup(128, false);
        assert!(!a.hit);
        assert_eq!(a.fill, Some(128));
        c.fill(128, [7; 64]);
        assert!(c.lookup(130, false).hit);
        assert_eq!(c.data(128).unwrap()[0], 7);
    }

    #[test]
    fn lru_eviction_writes_back_dirty_victim() {
        // 1 set, 2 ways
        let mut c = Cache::new(CacheGeometry { bytes: 128, ways: 2 });
        c.lookup(0, true);
        c.fill(0, [1; 64]);
        c.lookup(64, false);
        c.lookup(0, false); // 0 is now MRU
        let a = c.lookup(128, false);
        assert_eq!(a.writeback, None, "64 was clean and is the LRU victim");
        let a = c.lookup(192, false);
        assert_eq!(a.writeback.map(|(addr, d)| (addr, d[0])), Some((0, 1)));
        assert_eq!(c.stats().writebacks, 1);
    }

    #[test]
    fn victim_address_reconstructed_across_sets() {
        let mut c = Cache::new(CacheGeometry { bytes: 64 * 8, ways: 1 });
        c.lookup(64 * 3, true);
        let a = c.lookup(64 * 11, false);
        assert_eq!(a.writeback.map(|w| w.0), Some(64 * 3));
    }

    #[test]
    fn drain_returns_dirty_lines() {
        let mut c = Cache::new(CacheGeometry::default());
        for i in 0..10 {
            c.lookup(i * 64, i % 2 == 0);
        }
        assert_eq!(c.drain_dirty().len(), 5);
        assert!(c.drain_dirty().is_empty());
    }
}
