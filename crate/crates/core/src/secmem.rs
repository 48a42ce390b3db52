//! Counter-mode memory encryption with integrity trees for the TEE arena of SSD DRAM.
//!
//! Every 64-byte line is encrypted by XOR with a one-time pad `AES_k(line ‖ major ‖ minor ‖ chunk)`
//! and authenticated by a 64-bit MAC over `(line, major, minor, ciphertext)`.
//!
//! Counters come in two block formats, each 64 bytes:
//!
//! * split block (one per 4KB page): 64-bit major + 64 × 7-bit minors, packed LSB-first;
//! * major block (one per 8 pages): 8 × 64-bit majors, used for read-only pages.
//!
//! With the hybrid scheme a read-only page takes its counter from the major tree and a writable
//! page from the split tree. Each set of counter blocks is covered by an arity-8 Bonsai Merkle
//! tree; the two roots live in on-chip registers and cannot be touched by the attack hooks.
//!
//! MAC (pinned for reproducibility): AES-128 CBC-MAC under a MAC key `K_m = AES_k(0xA5 × 16)`.
//! The first block is a header `[domain, b1, idx (6 bytes LE), extra (8 bytes LE)]`, followed by
//! the four 16-byte chunks of the 64-byte input; the tag is the first 8 bytes of the last state
//! (little-endian). Domains: 1 = data line (`b1` = minor or 0x80 for read-only, `extra` = major),
//! 2 = split tree, 3 = major tree (`b1` = level, `extra` = 0).
//!
//! Timing: a counter-block fetch that misses the counter cache costs one verification charge plus
//! one AES latency (pad generation waits for the counter). Each encrypted write-back costs one
//! encryption charge; a DMA page fill costs one encryption charge for the whole burst.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::num::NonZeroUsize;

use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::Picos;

pub const LINE_BYTES: u64 = 64;
pub const PAGE_BYTES: u64 = 4096;
pub const LINES_PER_PAGE: usize = 64;
pub const ARITY: usize = 8;
pub const MINOR_MAX: u8 = 127;
const RO_MINOR_TAG: u8 = 0x80;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SecMemError {
    #[error("write to read-only page at {0:#x}")]
    WriteToReadOnly(u64),
    #[error("integrity violation: {what} (address {addr:#x})")]
    IntegrityViolation { what: String, addr: u64 },
    #[error("address {0:#x} outside the protected arena")]
    OutOfRange(u64),
    #[error("address {0:#x} is not 64-byte aligned")]
    Unaligned(u64),
    #[error("page {0} already has the requested permission")]
    SamePermission(u64),
    #[error("bad data length {0}")]
    BadLength(usize),
}

impl SecMemError {
    pub fn is_integrity(&self) -> bool {
        matches!(self, SecMemError::IntegrityViolation { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterScheme {
    Hybrid,
    SplitOnly,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PagePermission {
    ReadOnly,
    Writable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    Split,
    Major,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecMemConfig {
    pub scheme: CounterScheme,
    pub counter_cache_bytes: u64,
    pub encrypt_ps: Picos,
    pub verify_ps: Picos,
    pub aes_ps: Picos,
    /// Scales the write-back encryption charge; 1.0 means tree updates are fully serial.
    pub parallel_update_discount: f64,
    /// When false, lines are stored in plaintext and MACs are not computed; counters, trees,
    /// timing and traffic are unchanged.
    pub functional: bool,
}

impl Default for SecMemConfig {
    fn default() -> Self {
        Self {
            scheme: CounterScheme::Hybrid,
            counter_cache_bytes: 128 * 1024,
            encrypt_ps: 102_600,
            verify_ps: 151_200,
            aes_ps: 60_000,
            parallel_update_discount: 1.0,
            functional: true,
        }
    }
}

/// Latency charged by one operation, split by breakdown category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCost {
    pub encrypt_ps: Picos,
    pub verify_ps: Picos,
}

impl OpCost {
    pub fn total_ps(&self) -> Picos {
        self.encrypt_ps + self.verify_ps
    }

    pub fn add(&mut self, o: OpCost) {
        self.encrypt_ps += o.encrypt_ps;
        self.verify_ps += o.verify_ps;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecMemStats {
    pub line_reads: u64,
    pub line_writes: u64,
    pub dma_pages: u64,
    pub counter_hits: u64,
    pub counter_misses: u64,
    pub verifications: u64,
    pub encryptions: u64,
    pub reencryptions: u64,
    pub overflows: u64,
    pub major_increments: u64,
    pub permission_changes: u64,
    /// Payload bytes moved between DRAM and the chip (lines plus DMA fills).
    pub data_bytes: u64,
    /// Counter-block fetches and write-throughs.
    pub counter_bytes: u64,
    /// Tree-node reads (verification) and writes (updates).
    pub tree_bytes: u64,
    /// Per-line MAC bytes; these ride in the ECC side-band and are reported separately.
    pub mac_bytes: u64,
}

impl SecMemStats {
    pub fn encryption_traffic_pct(&self) -> f64 {
        pct(self.counter_bytes, self.data_bytes)
    }

    pub fn verification_traffic_pct(&self) -> f64 {
        pct(self.tree_bytes, self.data_bytes)
    }
}

fn pct(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        100.0 * a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounterBlock {
    pub major: u64,
    pub minors: [u8; 64],
}

impl Default for SplitCounterBlock {
    fn default() -> Self {
        Self { major: 0, minors: [0; 64] }
    }
}

impl SplitCounterBlock {
    pub fn encode(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..8].copy_from_slice(&self.major.to_le_bytes());
        for (i, &m) in self.minors.iter().enumerate() {
            let bit = i * 7;
            for b in 0..7 {
                if m >> b & 1 == 1 {
                    let pos = bit + b;
                    out[8 + pos / 8] |= 1 << (pos % 8);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8; 64]) -> Self {
        let major = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let mut minors = [0u8; 64];
        for (i, m) in minors.iter_mut().enumerate() {
            for b in 0..7 {
                let pos = i * 7 + b;
                if bytes[8 + pos / 8] >> (pos % 8) & 1 == 1 {
                    *m |= 1 << b;
                }
            }
        }
        Self { major, minors }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MajorCounterBlock {
    pub majors: [u64; 8],
}

impl MajorCounterBlock {
    pub fn encode(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        for (i, m) in self.majors.iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&m.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8; 64]) -> Self {
        let mut majors = [0u64; 8];
        for (i, m) in majors.iter_mut().enumerate() {
            *m = u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        }
        Self { majors }
    }
}

#[derive(Debug, Clone)]
struct Crypto {
    pad: Aes128,
    mac: Aes128,
}

impl Crypto {
    fn new(key: [u8; 16]) -> Self {
        let pad = Aes128::new(&key.into());
        let mut mk = [0xA5u8; 16].into();
        pad.encrypt_block(&mut mk);
        Self { pad, mac: Aes128::new(&mk) }
    }

    fn pad(&self, line: u64, major: u64, minor: u8) -> [u8; 64] {
        let mut out = [0u8; 64];
        for chunk in 0..4u8 {
            let mut b = [0u8; 16];
            b[..5].copy_from_slice(&line.to_le_bytes()[..5]);
            b[5..13].copy_from_slice(&major.to_le_bytes());
            b[13] = minor;
            b[14] = 0x01;
            b[15] = chunk;
            let mut blk = b.into();
            self.pad.encrypt_block(&mut blk);
            out[chunk as usize * 16..chunk as usize * 16 + 16].copy_from_slice(&blk);
        }
        out
    }

    fn mac(&self, domain: u8, b1: u8, idx: u64, extra: u64, data: &[u8; 64]) -> u64 {
        let mut h = [0u8; 16];
        h[0] = domain;
        h[1] = b1;
        h[2..8].copy_from_slice(&idx.to_le_bytes()[..6]);
        h[8..16].copy_from_slice(&extra.to_le_bytes());
        let mut state = h.into();
        self.mac.encrypt_block(&mut state);
        for c in data.chunks_exact(16) {
            for (s, d) in state.iter_mut().zip(c) {
                *s ^= d;
            }
            self.mac.encrypt_block(&mut state);
        }
        u64::from_le_bytes(state[..8].try_into().unwrap())
    }
}

/// Bonsai Merkle tree over one array of counter blocks. `levels[0][i]` is the MAC of counter block
/// `i`; `levels[l+1][j]` is the MAC of the 64-byte node holding `levels[l][8j..8j+8]`. The last
/// level has one element, which is the root and is kept on chip.
#[derive(Debug, Clone)]
struct Tree {
    kind: TreeKind,
    levels: Vec<Vec<u64>>,
    root: u64,
}

impl Tree {
    fn domain(&self) -> u8 {
        match self.kind {
            TreeKind::Split => 2,
            TreeKind::Major => 3,
        }
    }

    fn node_bytes(level: &[u64], j: usize) -> [u8; 64] {
        let mut out = [0u8; 64];
        for k in 0..ARITY {
            if let Some(m) = level.get(j * ARITY + k) {
                out[k * 8..k * 8 + 8].copy_from_slice(&m.to_le_bytes());
            }
        }
        out
    }

    fn build(kind: TreeKind, blocks: &[[u8; 64]], c: &Crypto) -> Self {
        let mut t = Tree { kind, levels: Vec::new(), root: 0 };
        let d = t.domain();
        let mut cur: Vec<u64> = blocks.iter().enumerate().map(|(i, b)| c.mac(d, 0, i as u64, 0, b)).collect();
        let mut lvl = 1u8;
        while cur.len() > 1 {
            let next = (0..cur.len().div_ceil(ARITY))
                .map(|j| c.mac(d, lvl, j as u64, 0, &Self::node_bytes(&cur, j)))
                .collect();
            t.levels.push(cur);
            cur = next;
            lvl += 1;
        }
        t.root = cur[0];
        t.levels.push(cur);
        t
    }

    /// Levels that live in DRAM (everything but the root level).
    fn dram_levels(&self) -> usize {
        self.levels.len() - 1
    }

    fn dram_bytes(&self) -> u64 {
        self.levels[..self.dram_levels()]
            .iter()
            .map(|l| l.len().div_ceil(ARITY) as u64 * 64)
            .sum()
    }

    /// Checks block `i` against its leaf MAC and every node on the path to the root register.
    fn verify_path(&self, i: usize, block: &[u8; 64], c: &Crypto) -> bool {
        let d = self.domain();
        if c.mac(d, 0, i as u64, 0, block) != self.levels[0][i] {
            return false;
        }
        let mut idx = i;
        for l in 0..self.dram_levels() {
            let j = idx / ARITY;
            let m = c.mac(d, l as u8 + 1, j as u64, 0, &Self::node_bytes(&self.levels[l], j));
            let expect = if l + 1 == self.dram_levels() { self.root } else { self.levels[l + 1][j] };
            if m != expect {
                return false;
            }
            idx = j;
        }
        true
    }

    /// Recomputes leaves for `dirty` blocks and every ancestor once. Returns DRAM nodes rewritten.
    fn update(&mut self, dirty: &BTreeSet<usize>, blocks: &[[u8; 64]], c: &Crypto) -> u64 {
        let d = self.domain();
        let mut cur: BTreeSet<usize> = dirty.clone();
        for &i in &cur {
            self.levels[0][i] = c.mac(d, 0, i as u64, 0, &blocks[i]);
        }
        let mut written = 0u64;
        for l in 0..self.dram_levels() {
            let parents: BTreeSet<usize> = cur.iter().map(|i| i / ARITY).collect();
            written += parents.len() as u64;
            for &j in &parents {
                self.levels[l + 1][j] = c.mac(d, l as u8 + 1, j as u64, 0, &Self::node_bytes(&self.levels[l], j));
            }
            cur = parents;
        }
        self.root = self.levels[self.dram_levels()][0];
        written
    }

    fn audit(&self, blocks: &[[u8; 64]], c: &Crypto) -> Option<String> {
        let d = self.domain();
        for (i, b) in blocks.iter().enumerate() {
            if c.mac(d, 0, i as u64, 0, b) != self.levels[0][i] {
                return Some(format!("{:?} counter block {i}", self.kind));
            }
        }
        for l in 0..self.dram_levels() {
            for j in 0..self.levels[l + 1].len() {
                let m = c.mac(d, l as u8 + 1, j as u64, 0, &Self::node_bytes(&self.levels[l], j));
                let expect = if l + 1 == self.dram_levels() { self.root } else { self.levels[l + 1][j] };
                if m != expect {
                    return Some(format!("{:?} tree node level {} index {j}", self.kind, l + 1));
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
struct PageData {
    ct: Vec<[u8; 64]>,
    mac: Vec<u64>,
    written: u64,
}

impl PageData {
    fn new() -> Self {
        Self { ct: vec![[0; 64]; LINES_PER_PAGE], mac: vec![0; LINES_PER_PAGE], written: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cached {
    Split(SplitCounterBlock),
    Major(MajorCounterBlock),
}

/// Copy of every attacker-visible byte for a page range.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pages: std::ops::Range<u64>,
    data: Vec<Option<PageData>>,
    split: Vec<[u8; 64]>,
    major: Vec<[u8; 64]>,
    split_levels: Vec<Vec<u64>>,
    major_levels: Vec<Vec<u64>>,
}

/// Reported sizes of counter storage and trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub dram_bytes: u64,
    pub split_counter_bytes: u64,
    pub major_counter_bytes: u64,
    pub split_tree_bytes: u64,
    pub major_tree_bytes: u64,
}

/// Counter and tree sizes for a DRAM of `dram_bytes` under the arity-8 layout.
pub fn footprint(dram_bytes: u64) -> Footprint {
    let pages = dram_bytes / PAGE_BYTES;
    let split_blocks = pages;
    let major_blocks = pages.div_ceil(8);
    let tree = |mut n: u64| {
        let mut bytes = 0;
        while n > 1 {
            bytes += n.div_ceil(ARITY as u64) * 64;
            n = n.div_ceil(ARITY as u64);
        }
        bytes
    };
    Footprint {
        dram_bytes,
        split_counter_bytes: split_blocks * 64,
        major_counter_bytes: major_blocks * 64,
        split_tree_bytes: tree(split_blocks),
        major_tree_bytes: tree(major_blocks),
    }
}

#[derive(Debug)]
pub struct SecureMemory {
    cfg: SecMemConfig,
    crypto: Crypto,
    pages: u64,
    data: Vec<Option<PageData>>,
    perm: Vec<PagePermission>,
    split: Vec<[u8; 64]>,
    major: Vec<[u8; 64]>,
    split_tree: Tree,
    major_tree: Tree,
    cache: LruCache<(TreeKind, u32), Cached>,
    stats: SecMemStats,
    pad_log: Option<HashSet<(u64, u64, u8)>>,
    pad_reuses: u64,
}

impl SecureMemory {
    /// Covers `arena_bytes` of DRAM starting at offset 0. Every page starts writable and zeroed.
    pub fn new(cfg: SecMemConfig, arena_bytes: u64, key: [u8; 16]) -> Self {
        let pages = arena_bytes.div_ceil(PAGE_BYTES).max(1);
        let crypto = Crypto::new(key);
        let split = vec![SplitCounterBlock::default().encode(); pages as usize];
        let major = vec![MajorCounterBlock::default().encode(); pages.div_ceil(8) as usize];
        let split_tree = Tree::build(TreeKind::Split, &split, &crypto);
        let major_tree = Tree::build(TreeKind::Major, &major, &crypto);
        let cap = (cfg.counter_cache_bytes / 64).max(1) as usize;
        Self {
            cache: LruCache::new(NonZeroUsize::new(cap).unwrap()),
            cfg,
            crypto,
            pages,
            data: vec![None; pages as usize],
            perm: vec![PagePermission::Writable; pages as usize],
            split,
            major,
            split_tree,
            major_tree,
            stats: SecMemStats::default(),
            pad_log: None,
            pad_reuses: 0,
        }
    }

    pub fn config(&self) -> &SecMemConfig {
        &self.cfg
    }

    pub fn stats(&self) -> SecMemStats {
        self.stats
    }

    pub fn pages(&self) -> u64 {
        self.pages
    }

    pub fn arena_bytes(&self) -> u64 {
        self.pages * PAGE_BYTES
    }

    pub fn permission(&self, page: u64) -> PagePermission {
        self.perm[page as usize]
    }

    pub fn root(&self, kind: TreeKind) -> u64 {
        self.tree(kind).root
    }

    pub fn tree_dram_bytes(&self, kind: TreeKind) -> u64 {
        self.tree(kind).dram_bytes()
    }

    /// Starts recording every (line, major, minor) used to encrypt; reuses are counted.
    pub fn enable_pad_audit(&mut self) {
        self.pad_log = Some(HashSet::new());
    }

    pub fn pad_reuses(&self) -> u64 {
        self.pad_reuses
    }

    pub fn flush_counter_cache(&mut self) {
        self.cache.clear();
    }

    fn tree(&self, kind: TreeKind) -> &Tree {
        match kind {
            TreeKind::Split => &self.split_tree,
            TreeKind::Major => &self.major_tree,
        }
    }

    fn uses_major(&self, page: u64) -> bool {
        self.cfg.scheme == CounterScheme::Hybrid && self.perm[page as usize] == PagePermission::ReadOnly
    }

    fn check_addr(&self, addr: u64) -> Result<(u64, usize), SecMemError> {
        if addr % LINE_BYTES != 0 {
            return Err(SecMemError::Unaligned(addr));
        }
        if addr >= self.arena_bytes() {
            return Err(SecMemError::OutOfRange(addr));
        }
        Ok((addr / PAGE_BYTES, ((addr % PAGE_BYTES) / LINE_BYTES) as usize))
    }

    fn miss_cost(&self) -> OpCost {
        OpCost { encrypt_ps: self.cfg.aes_ps, verify_ps: self.cfg.verify_ps }
    }

    /// Returns the trusted counter block, fetching and verifying it on a counter-cache miss.
    fn fetch(&mut self, kind: TreeKind, idx: u32, cost: &mut OpCost) -> Result<Cached, SecMemError> {
        if let Some(c) = self.cache.get(&(kind, idx)) {
            self.stats.counter_hits += 1;
            return Ok(*c);
        }
        self.stats.counter_misses += 1;
        self.stats.verifications += 1;
        cost.add(self.miss_cost());
        let bytes = match kind {
            TreeKind::Split => self.split[idx as usize],
            TreeKind::Major => self.major[idx as usize],
        };
        let levels = self.tree(kind).dram_levels() as u64;
        self.stats.counter_bytes += 64;
        self.stats.tree_bytes += 64 * levels;
        if !self.tree(kind).verify_path(idx as usize, &bytes, &self.crypto) {
            return Err(SecMemError::IntegrityViolation {
                what: format!("{kind:?} counter block {idx} fails tree verification"),
                addr: idx as u64 * 64,
            });
        }
        let c = match kind {
            TreeKind::Split => Cached::Split(SplitCounterBlock::decode(&bytes)),
            TreeKind::Major => Cached::Major(MajorCounterBlock::decode(&bytes)),
        };
        self.cache.put((kind, idx), c);
        Ok(c)
    }

    /// Writes a counter block through to DRAM and refreshes the trusted copy (tree update deferred).
    fn store(&mut self, kind: TreeKind, idx: u32, c: Cached) {
        let bytes = match c {
            Cached::Split(s) => s.encode(),
            Cached::Major(m) => m.encode(),
        };
        match kind {
            TreeKind::Split => self.split[idx as usize] = bytes,
            TreeKind::Major => self.major[idx as usize] = bytes,
        }
        self.stats.counter_bytes += 64;
        self.cache.put((kind, idx), c);
    }

    fn update_tree(&mut self, kind: TreeKind, dirty: &BTreeSet<usize>) {
        if dirty.is_empty() {
            return;
        }
        let written = match kind {
            TreeKind::Split => self.split_tree.update(dirty, &self.split, &self.crypto),
            TreeKind::Major => self.major_tree.update(dirty, &self.major, &self.crypto),
        };
        self.stats.tree_bytes += 64 * written;
    }

    /// Current (major, minor-or-RO-tag) for a line, through the counter cache.
    fn counter_of(&mut self, page: u64, line: usize, cost: &mut OpCost) -> Result<(u64, u8), SecMemError> {
        if self.uses_major(page) {
            match self.fetch(TreeKind::Major, (page / 8) as u32, cost)? {
                Cached::Major(m) => Ok((m.majors[(page % 8) as usize], RO_MINOR_TAG)),
                Cached::Split(_) => unreachable!(),
            }
        } else {
            match self.fetch(TreeKind::Split, page as u32, cost)? {
                Cached::Split(s) => Ok((s.major, s.minors[line])),
                Cached::Major(_) => unreachable!(),
            }
        }
    }

    fn line_index(page: u64, line: usize) -> u64 {
        page * LINES_PER_PAGE as u64 + line as u64
    }

    fn seal(&mut self, page: u64, line: usize, plain: &[u8; 64], major: u64, minor: u8) {
        let li = Self::line_index(page, line);
        if let Some(log) = self.pad_log.as_mut() {
            if !log.insert((li, major, minor)) {
                self.pad_reuses += 1;
            }
        }
        self.stats.encryptions += 1;
        self.stats.mac_bytes += 8;
        let functional = self.cfg.functional;
        let (ct, mac) = if functional {
            let pad = self.crypto.pad(li, major, minor);
            let mut ct = [0u8; 64];
            for i in 0..64 {
                ct[i] = plain[i] ^ pad[i];
            }
            let mac = self.crypto.mac(1, minor, li, major, &ct);
            (ct, mac)
        } else {
            (*plain, 0)
        };
        let pd = self.data[page as usize].get_or_insert_with(PageData::new);
        pd.ct[line] = ct;
        pd.mac[line] = mac;
        pd.written |= 1 << line;
    }

    fn open(&self, page: u64, line: usize, major: u64, minor: u8) -> Result<[u8; 64], SecMemError> {
        let Some(pd) = self.data[page as usize].as_ref().filter(|pd| pd.written >> line & 1 == 1) else {
            // never written since allocation: zero-initialised memory
            return Ok([0; 64]);
        };
        if !self.cfg.functional {
            return Ok(pd.ct[line]);
        }
        let li = Self::line_index(page, line);
        let ct = pd.ct[line];
        if self.crypto.mac(1, minor, li, major, &ct) != pd.mac[line] {
            return Err(SecMemError::IntegrityViolation {
                what: "line MAC mismatch".into(),
                addr: page * PAGE_BYTES + line as u64 * LINE_BYTES,
            });
        }
        let pad = self.crypto.pad(li, major, minor);
        let mut out = [0u8; 64];
        for i in 0..64 {
            out[i] = ct[i] ^ pad[i];
        }
        Ok(out)
    }

    /// Decrypts and verifies one line.
    pub fn mem_read(&mut self, addr: u64) -> Result<([u8; 64], OpCost), SecMemError> {
        let (page, line) = self.check_addr(addr)?;
        let mut cost = OpCost::default();
        let (major, minor) = self.counter_of(page, line, &mut cost)?;
        let plain = self.open(page, line, major, minor)?;
        self.stats.line_reads += 1;
        self.stats.data_bytes += LINE_BYTES;
        Ok((plain, cost))
    }

    /// Encrypts one line write-back: bumps its minor counter (handling overflow) and updates the
    /// split tree.
    pub fn mem_write(&mut self, addr: u64, data: &[u8; 64]) -> Result<OpCost, SecMemError> {
        let (page, line) = self.check_addr(addr)?;
        if self.perm[page as usize] == PagePermission::ReadOnly {
            return Err(SecMemError::WriteToReadOnly(addr));
        }
        let mut cost = OpCost::default();
        let Cached::Split(mut blk) = self.fetch(TreeKind::Split, page as u32, &mut cost)? else {
            unreachable!()
        };
        let enc = (self.cfg.encrypt_ps as f64 * self.cfg.parallel_update_discount).round() as Picos;
        if blk.minors[line] == MINOR_MAX {
            // re-encrypt the whole page under a fresh major
            let mut plains = Vec::with_capacity(LINES_PER_PAGE);
            for l in 0..LINES_PER_PAGE {
                plains.push(if l == line { *data } else { self.open(page, l, blk.major, blk.minors[l])? });
            }
            blk.major += 1;
            blk.minors = [0; 64];
            for (l, p) in plains.iter().enumerate() {
                self.seal(page, l, p, blk.major, 0);
            }
            self.stats.overflows += 1;
            self.stats.major_increments += 1;
            self.stats.reencryptions += LINES_PER_PAGE as u64;
            self.stats.data_bytes += 2 * PAGE_BYTES;
            cost.encrypt_ps += enc * LINES_PER_PAGE as Picos;
        } else {
            blk.minors[line] += 1;
            self.seal(page, line, data, blk.major, blk.minors[line]);
            cost.encrypt_ps += enc;
        }
        self.store(TreeKind::Split, page as u32, Cached::Split(blk));
        self.update_tree(TreeKind::Split, &BTreeSet::from([page as usize]));
        self.stats.line_writes += 1;
        self.stats.data_bytes += LINE_BYTES;
        Ok(cost)
    }

    /// DMA fill of whole pages starting at `first_page` (`data.len()` must be a page multiple).
    /// The page's counter is bumped (major for read-only pages under the hybrid scheme, otherwise
    /// split major with minors reset), all lines are sealed, and the trees are updated once.
    pub fn ingest_pages(&mut self, first_page: u64, data: &[u8]) -> Result<OpCost, SecMemError> {
        if data.len() as u64 % PAGE_BYTES != 0 {
            return Err(SecMemError::BadLength(data.len()));
        }
        let n = data.len() as u64 / PAGE_BYTES;
        if first_page + n > self.pages {
            return Err(SecMemError::OutOfRange((first_page + n) * PAGE_BYTES));
        }
        let mut cost = OpCost::default();
        let mut dirty_split = BTreeSet::new();
        let mut dirty_major = BTreeSet::new();
        for k in 0..n {
            let page = first_page + k;
            let chunk = &data[(k * PAGE_BYTES) as usize..((k + 1) * PAGE_BYTES) as usize];
            let (major, minor) = if self.uses_major(page) {
                let idx = (page / 8) as u32;
                let Cached::Major(mut m) = self.fetch(TreeKind::Major, idx, &mut cost)? else { unreachable!() };
                m.majors[(page % 8) as usize] += 1;
                let v = m.majors[(page % 8) as usize];
                self.store(TreeKind::Major, idx, Cached::Major(m));
                dirty_major.insert(idx as usize);
                (v, RO_MINOR_TAG)
            } else {
                let Cached::Split(mut s) = self.fetch(TreeKind::Split, page as u32, &mut cost)? else {
                    unreachable!()
                };
                s.major += 1;
                s.minors = [0; 64];
                self.store(TreeKind::Split, page as u32, Cached::Split(s));
                dirty_split.insert(page as usize);
                (s.major, 0)
            };
            self.stats.major_increments += 1;
            for l in 0..LINES_PER_PAGE {
                let plain: &[u8; 64] = chunk[l * 64..l * 64 + 64].try_into().unwrap();
                self.seal(page, l, plain, major, minor);
            }
            cost.encrypt_ps += self.cfg.encrypt_ps;
            self.stats.dma_pages += 1;
            self.stats.data_bytes += PAGE_BYTES;
        }
        self.update_tree(TreeKind::Split, &dirty_split);
        self.update_tree(TreeKind::Major, &dirty_major);
        Ok(cost)
    }

    /// Sets the permission of fresh pages (no data yet) without counter migration.
    pub fn assign(&mut self, pages: std::ops::Range<u64>, perm: PagePermission) {
        for p in pages {
            self.perm[p as usize] = perm;
        }
    }

    /// Drops the contents of a page range (TEE teardown). Counters are kept so pads never repeat.
    pub fn release(&mut self, pages: std::ops::Range<u64>) {
        for p in pages {
            self.data[p as usize] = None;
            self.perm[p as usize] = PagePermission::Writable;
        }
    }

    /// Moves a page between the read-only (major tree) and writable (split tree) states.
    pub fn change_permission(&mut self, page: u64, to: PagePermission) -> Result<OpCost, SecMemError> {
        if page >= self.pages {
            return Err(SecMemError::OutOfRange(page * PAGE_BYTES));
        }
        if self.perm[page as usize] == to {
            return Err(SecMemError::SamePermission(page));
        }
        let mut cost = OpCost::default();
        let mut plains = Vec::with_capacity(LINES_PER_PAGE);
        for l in 0..LINES_PER_PAGE {
            let (major, minor) = self.counter_of(page, l, &mut cost)?;
            plains.push(self.open(page, l, major, minor)?);
        }
        let written = self.data[page as usize].as_ref().map_or(0, |d| d.written);
        let midx = (page / 8) as u32;
        let Cached::Major(mut mblk) = self.fetch(TreeKind::Major, midx, &mut cost)? else { unreachable!() };
        let Cached::Split(mut sblk) = self.fetch(TreeKind::Split, page as u32, &mut cost)? else {
            unreachable!()
        };
        let slot = (page % 8) as usize;
        self.perm[page as usize] = to;
        if self.cfg.scheme == CounterScheme::Hybrid {
            match to {
                PagePermission::Writable => {
                    sblk.major = mblk.majors[slot] + 1;
                    sblk.minors = [0; 64];
                }
                PagePermission::ReadOnly => {
                    mblk.majors[slot] = sblk.major + 1;
                }
            }
        } else {
            // one counter format only: re-key in place
            sblk.major += 1;
            sblk.minors = [0; 64];
        }
        self.store(TreeKind::Major, midx, Cached::Major(mblk));
        self.store(TreeKind::Split, page as u32, Cached::Split(sblk));
        self.stats.major_increments += 1;
        let (major, minor) = self.counter_of(page, 0, &mut cost)?;
        for (l, p) in plains.iter().enumerate() {
            if written >> l & 1 == 1 {
                self.seal(page, l, p, major, minor);
                self.stats.reencryptions += 1;
                cost.encrypt_ps += self.cfg.encrypt_ps;
            }
        }
        self.update_tree(TreeKind::Major, &BTreeSet::from([midx as usize]));
        self.update_tree(TreeKind::Split, &BTreeSet::from([page as usize]));
        self.stats.permission_changes += 1;
        Ok(cost)
    }

    pub fn split_counter(&self, page: u64) -> SplitCounterBlock {
        SplitCounterBlock::decode(&self.split[page as usize])
    }

    pub fn major_counter(&self, page: u64) -> u64 {
        MajorCounterBlock::decode(&self.major[(page / 8) as usize]).majors[(page % 8) as usize]
    }

    /// Full audit: recomputes every leaf and node from DRAM and compares with the root register.
    pub fn verify_root(&self, kind: TreeKind) -> Result<(), SecMemError> {
        let blocks = match kind {
            TreeKind::Split => &self.split,
            TreeKind::Major => &self.major,
        };
        match self.tree(kind).audit(blocks, &self.crypto) {
            None => Ok(()),
            Some(what) => Err(SecMemError::IntegrityViolation { what, addr: 0 }),
        }
    }

    // --- attack hooks: they mutate untrusted DRAM state only ---

    /// Flips one bit of the stored ciphertext of a line.
    pub fn flip_data_bit(&mut self, addr: u64, bit: u32) {
        let (page, line) = self.check_addr(addr & !63).expect("attack inside arena");
        let pd = self.data[page as usize].get_or_insert_with(PageData::new);
        pd.ct[line][(bit / 8 % 64) as usize] ^= 1 << (bit % 8);
    }

    pub fn flip_mac_bit(&mut self, addr: u64, bit: u32) {
        let (page, line) = self.check_addr(addr & !63).expect("attack inside arena");
        let pd = self.data[page as usize].get_or_insert_with(PageData::new);
        pd.mac[line] ^= 1 << (bit % 64);
    }

    pub fn flip_counter_bit(&mut self, kind: TreeKind, block: usize, bit: u32) {
        let b = match kind {
            TreeKind::Split => &mut self.split[block],
            TreeKind::Major => &mut self.major[block],
        };
        b[(bit / 8 % 64) as usize] ^= 1 << (bit % 8);
    }

    /// Flips a bit in a stored tree MAC at `level` (0 = leaf MACs). The root level is on chip and
    /// cannot be targeted.
    pub fn flip_tree_bit(&mut self, kind: TreeKind, level: usize, index: usize, bit: u32) -> bool {
        let t = match kind {
            TreeKind::Split => &mut self.split_tree,
            TreeKind::Major => &mut self.major_tree,
        };
        if level >= t.dram_levels() || index >= t.levels[level].len() {
            return false;
        }
        t.levels[level][index] ^= 1 << (bit % 64);
        true
    }

    pub fn tree_shape(&self, kind: TreeKind) -> Vec<usize> {
        let t = self.tree(kind);
        t.levels[..t.dram_levels()].iter().map(|l| l.len()).collect()
    }

    pub fn counter_blocks(&self, kind: TreeKind) -> usize {
        match kind {
            TreeKind::Split => self.split.len(),
            TreeKind::Major => self.major.len(),
        }
    }

    pub fn swap_counter_blocks(&mut self, kind: TreeKind, a: usize, b: usize) {
        match kind {
            TreeKind::Split => self.split.swap(a, b),
            TreeKind::Major => self.major.swap(a, b),
        }
    }

    /// Swaps the stored ciphertext and MAC of two lines.
    pub fn swap_lines(&mut self, a: u64, b: u64) {
        let (pa, la) = self.check_addr(a).expect("attack inside arena");
        let (pb, lb) = self.check_addr(b).expect("attack inside arena");
        let get = |s: &mut Self, p: u64, l: usize| {
            let pd = s.data[p as usize].get_or_insert_with(PageData::new);
            (pd.ct[l], pd.mac[l])
        };
        let va = get(self, pa, la);
        let vb = get(self, pb, lb);
        let pd = self.data[pa as usize].as_mut().unwrap();
        (pd.ct[la], pd.mac[la]) = vb;
        let pd = self.data[pb as usize].as_mut().unwrap();
        (pd.ct[lb], pd.mac[lb]) = va;
    }

    pub fn snapshot(&self, pages: std::ops::Range<u64>) -> Snapshot {
        Snapshot {
            data: pages.clone().map(|p| self.data[p as usize].clone()).collect(),
            split: self.split.clone(),
            major: self.major.clone(),
            split_levels: self.split_tree.levels[..self.split_tree.dram_levels()].to_vec(),
            major_levels: self.major_tree.levels[..self.major_tree.dram_levels()].to_vec(),
            pages,
        }
    }

    /// Rolls DRAM back to a snapshot (replay). Roots stay as they are.
    pub fn restore(&mut self, s: &Snapshot) {
        for (i, p) in s.pages.clone().enumerate() {
            self.data[p as usize] = s.data[i].clone();
        }
        self.split = s.split.clone();
        self.major = s.major.clone();
        let n = self.split_tree.dram_levels();
        self.split_tree.levels[..n].clone_from_slice(&s.split_levels);
        let n = self.major_tree.dram_levels();
        self.major_tree.levels[..n].clone_from_slice(&s.major_levels);
    }

    /// Lines currently holding data, as addresses (test helper).
    pub fn written_lines(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for (p, pd) in self.data.iter().enumerate() {
            if let Some(pd) = pd {
                for l in 0..LINES_PER_PAGE {
                    if pd.written >> l & 1 == 1 {
                        out.push(p as u64 * PAGE_BYTES + l as u64 * LINE_BYTES);
                    }
                }
            }
        }
        out
    }

    /// Reads every written line with a cold counter cache, then audits both trees. Any tampering
    /// with DRAM state shows up here.
    pub fn audit_all(&mut self) -> Result<HashMap<u64, [u8; 64]>, SecMemError> {
        self.flush_counter_cache();
        let mut out = HashMap::new();
        for addr in self.written_lines() {
            out.insert(addr, self.mem_read(addr)?.0);
        }
        self.verify_root(TreeKind::Split)?;
        self.verify_root(TreeKind::Major)?;
        Ok(out)
    }
}
