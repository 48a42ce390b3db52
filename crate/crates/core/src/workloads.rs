//! Benchmark datasets and the in-storage programs that scan them.
//!
//! Every program keeps its working state in native Rust structures and tells a [`Machine`] which
//! heap lines it touches and how many cycles it spends; the machine turns that into time, cache
//! traffic and (for protected runs) encryption and verification work. Input rows reach the program
//! as the bytes that actually came out of flash.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SeededRng;

pub const ROW_BYTES: usize = 64;
pub const PAGE_BYTES: usize = 4096;
pub const ROWS_PER_PAGE: usize = PAGE_BYTES / ROW_BYTES;
/// 64MB at 4KB pages.
pub const DEFAULT_PAGES: u32 = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Arithmetic,
    Aggregate,
    Filter,
    TpchQ1,
    TpchQ3,
    TpchQ12,
    TpchQ14,
    TpchQ19,
    TpcB,
    TpcC,
    Wordcount,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 11] = [
        WorkloadKind::Arithmetic,
        WorkloadKind::Aggregate,
        WorkloadKind::Filter,
        WorkloadKind::TpchQ1,
        WorkloadKind::TpchQ3,
        WorkloadKind::TpchQ12,
        WorkloadKind::TpchQ14,
        WorkloadKind::TpchQ19,
        WorkloadKind::TpcB,
        WorkloadKind::TpcC,
        WorkloadKind::Wordcount,
    ];

    /// Scan-dominated programs with negligible write traffic.
    pub const READ_INTENSIVE: [WorkloadKind; 6] = [
        WorkloadKind::Arithmetic,
        WorkloadKind::Aggregate,
        WorkloadKind::Filter,
        WorkloadKind::TpchQ1,
        WorkloadKind::TpchQ12,
        WorkloadKind::TpchQ14,
    ];

    pub const TPCH: [WorkloadKind; 5] = [
        WorkloadKind::TpchQ1,
        WorkloadKind::TpchQ3,
        WorkloadKind::TpchQ12,
        WorkloadKind::TpchQ14,
        WorkloadKind::TpchQ19,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::Arithmetic => "arithmetic",
            WorkloadKind::Aggregate => "aggregate",
            WorkloadKind::Filter => "filter",
            WorkloadKind::TpchQ1 => "tpch_q1",
            WorkloadKind::TpchQ3 => "tpch_q3",
            WorkloadKind::TpchQ12 => "tpch_q12",
            WorkloadKind::TpchQ14 => "tpch_q14",
            WorkloadKind::TpchQ19 => "tpch_q19",
            WorkloadKind::TpcB => "tpc_b",
            WorkloadKind::TpcC => "tpc_c",
            WorkloadKind::Wordcount => "wordcount",
        }
    }

    pub fn data_kind(self) -> DataKind {
        match self {
            WorkloadKind::Wordcount => DataKind::Text,
            _ => DataKind::Lineitem,
        }
    }

    /// Write ratio reported for the full-scale runs, for side-by-side printing.
    pub fn reference_write_ratio(self) -> f64 {
        match self {
            WorkloadKind::Arithmetic => 2.02e-4,
            WorkloadKind::Aggregate => 2.08e-4,
            WorkloadKind::Filter => 1.71e-4,
            WorkloadKind::TpchQ1 => 6.40e-6,
            WorkloadKind::TpchQ3 => 3.96e-3,
            WorkloadKind::TpchQ12 => 2.99e-5,
            WorkloadKind::TpchQ14 => 3.94e-6,
            WorkloadKind::TpchQ19 => 9.92e-7,
            WorkloadKind::TpcB => 5.19e-2,
            WorkloadKind::TpcC => 9.05e-2,
            WorkloadKind::Wordcount => 4.61e-1,
        }
    }

    /// Heap the program asks for at TEE creation.
    pub fn heap_bytes(self) -> u64 {
        match self {
            WorkloadKind::TpchQ3 => 2 << 20,
            WorkloadKind::TpcB => 2 << 20,
            WorkloadKind::TpcC => 4 << 20,
            WorkloadKind::Wordcount => 3 << 20,
            _ => 256 << 10,
        }
    }

    /// Nominal size of the offloaded binary (metadata only).
    pub fn code_bytes(self) -> u64 {
        match self {
            WorkloadKind::Arithmetic | WorkloadKind::Aggregate | WorkloadKind::Filter => 28 << 10,
            WorkloadKind::TpcB | WorkloadKind::TpcC => 512 << 10,
            WorkloadKind::Wordcount => 64 << 10,
            _ => 256 << 10,
        }
    }

    pub fn program(self, costs: &CostModel) -> Box<dyn Program> {
        let c = costs.record_cycles(self);
        let p = costs.probe_cycles;
        match self {
            WorkloadKind::Arithmetic => Box::new(Arithmetic::new(c)),
            WorkloadKind::Aggregate => Box::new(Aggregate::new(c)),
            WorkloadKind::Filter => Box::new(Filter::new(c)),
            WorkloadKind::TpchQ1 => Box::new(Q1::new(c)),
            WorkloadKind::TpchQ3 => Box::new(Q3::new(c, p)),
            WorkloadKind::TpchQ12 => Box::new(Q12::new(c)),
            WorkloadKind::TpchQ14 => Box::new(Q14::new(c)),
            WorkloadKind::TpchQ19 => Box::new(Q19::new(c)),
            WorkloadKind::TpcB => Box::new(TpcB::new(c, p)),
            WorkloadKind::TpcC => Box::new(TpcC::new(c, p)),
            WorkloadKind::Wordcount => Box::new(Wordcount::new(c, p)),
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WorkloadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown workload `{s}`"))
    }
}

/// Per-record compute cost in in-storage core cycles. These are calibration
/// constants chosen so that scans are compute-bound at ~1.5-2µs per 4KB page on a 1.6GHz core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Cycles per 64-byte row (per word for wordcount).
    pub record_cycles: BTreeMap<WorkloadKind, u64>,
    /// Extra cycles per hash-table probe or table update.
    pub probe_cycles: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        use WorkloadKind::*;
        let record_cycles = [
            (Arithmetic, 44),
            (Aggregate, 40),
            (Filter, 36),
            (TpchQ1, 56),
            (TpchQ3, 60),
            (TpchQ12, 48),
            (TpchQ14, 42),
            (TpchQ19, 64),
            (TpcB, 110),
            (TpcC, 130),
            (Wordcount, 24),
        ]
        .into_iter()
        .collect();
        Self { record_cycles, probe_cycles: 20 }
    }
}

impl CostModel {
    pub fn record_cycles(&self, k: WorkloadKind) -> u64 {
        self.record_cycles.get(&k).copied().unwrap_or(50)
    }
}

// ---------------------------------------------------------------------------------------------
// rows

/// Lineitem-like row joined with the order, customer and part columns the queries need.
/// Money is in cents, dates are days since 1992-01-01, percentages are integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Row {
    pub orderkey: u32,
    pub partkey: u32,
    pub custkey: u32,
    pub suppkey: u16,
    pub linenumber: u8,
    /// 0 = A, 1 = N, 2 = R
    pub returnflag: u8,
    /// 0 = F, 1 = O
    pub linestatus: u8,
    pub shipmode: u8,
    pub quantity: u32,
    pub extendedprice: u32,
    pub discount: u8,
    pub tax: u8,
    pub shipinstruct: u8,
    pub brand: u8,
    pub container: u8,
    pub ptype: u8,
    pub orderpriority: u8,
    pub segment: u8,
    pub shipdate: u16,
    pub commitdate: u16,
    pub receiptdate: u16,
    pub orderdate: u16,
    pub size: u8,
    pub a: i32,
    pub b: i32,
    pub c: i32,
    pub d: i32,
    pub rowid: u32,
}

pub const SHIPMODES: [&str; 7] = ["REG AIR", "AIR", "RAIL", "SHIP", "TRUCK", "MAIL", "FOB"];
pub const RETURNFLAGS: [char; 3] = ['A', 'N', 'R'];
pub const LINESTATUS: [char; 2] = ['F', 'O'];
pub const SEG_BUILDING: u8 = 1;
pub const INSTRUCT_DELIVER_IN_PERSON: u8 = 0;
/// Part types below this are PROMO.
pub const PROMO_TYPES: u8 = 25;
/// 1995-06-17, the "current date" that decides return flags and line status.
pub const CURRENT_DAY: u16 = 1263;
pub const LAST_ORDER_DAY: u16 = 2405;

impl Row {
    pub fn encode(&self) -> [u8; ROW_BYTES] {
        let mut b = [0u8; ROW_BYTES];
        b[0..4].copy_from_slice(&self.orderkey.to_le_bytes());
        b[4..8].copy_from_slice(&self.partkey.to_le_bytes());
        b[8..12].copy_from_slice(&self.custkey.to_le_bytes());
        b[12..14].copy_from_slice(&self.suppkey.to_le_bytes());
        b[14] = self.linenumber;
        b[15] = self.returnflag | self.linestatus << 2 | self.shipmode << 3;
        b[16..20].copy_from_slice(&self.quantity.to_le_bytes());
        b[20..24].copy_from_slice(&self.extendedprice.to_le_bytes());
        b[24] = self.discount;
        b[25] = self.tax;
        b[26] = self.shipinstruct;
        b[27] = self.brand;
        b[28] = self.container;
        b[29] = self.ptype;
        b[30] = self.orderpriority;
        b[31] = self.segment;
        b[32..34].copy_from_slice(&self.shipdate.to_le_bytes());
        b[34..36].copy_from_slice(&self.commitdate.to_le_bytes());
        b[36..38].copy_from_slice(&self.receiptdate.to_le_bytes());
        b[38..40].copy_from_slice(&self.orderdate.to_le_bytes());
        b[40] = self.size;
        b[44..48].copy_from_slice(&self.a.to_le_bytes());
        b[48..52].copy_from_slice(&self.b.to_le_bytes());
        b[52..56].copy_from_slice(&self.c.to_le_bytes());
        b[56..60].copy_from_slice(&self.d.to_le_bytes());
        b[60..64].copy_from_slice(&self.rowid.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; ROW_BYTES]) -> Row {
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(b[o..o + 2].try_into().unwrap());
        Row {
            orderkey: u32_at(0),
            partkey: u32_at(4),
            custkey: u32_at(8),
            suppkey: u16_at(12),
            linenumber: b[14],
            returnflag: b[15] & 3,
            linestatus: b[15] >> 2 & 1,
            shipmode: b[15] >> 3 & 7,
            quantity: u32_at(16),
            extendedprice: u32_at(20),
            discount: b[24],
            tax: b[25],
            shipinstruct: b[26],
            brand: b[27],
            container: b[28],
            ptype: b[29],
            orderpriority: b[30],
            segment: b[31],
            shipdate: u16_at(32),
            commitdate: u16_at(34),
            receiptdate: u16_at(36),
            orderdate: u16_at(38),
            size: b[40],
            a: u32_at(44) as i32,
            b: u32_at(48) as i32,
            c: u32_at(52) as i32,
            d: u32_at(56) as i32,
            rowid: u32_at(60),
        }
    }

    /// extendedprice * (1 - discount), in cents * 100.
    pub fn disc_price(&self) -> i64 {
        self.extendedprice as i64 * (100 - self.discount as i64)
    }
}

fn part_price(partkey: u32) -> u32 {
    90_000 + (partkey / 10) % 20_001 + 100 * (partkey % 1_000)
}

struct RowGen {
    rng: SeededRng,
    next: u32,
    order: u32,
    lines_left: u8,
    orderdate: u16,
    custkey: u32,
    priority: u8,
}

impl RowGen {
    fn new(seed: u64) -> Self {
        Self { rng: SeededRng::new(seed), next: 0, order: 0, lines_left: 0, orderdate: 0, custkey: 0, priority: 0 }
    }

    fn range(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.rng.below(hi - lo + 1)
    }

    fn row(&mut self) -> Row {
        if self.lines_left == 0 {
            self.order += 1;
            self.lines_left = self.range(1, 7) as u8;
            self.orderdate = self.range(0, LAST_ORDER_DAY as u64) as u16;
            self.custkey = self.range(1, 150_000) as u32;
            self.priority = self.range(0, 4) as u8;
        }
        let linenumber = 8 - self.lines_left;
        self.lines_left -= 1;
        let partkey = self.range(1, 200_000) as u32;
        let quantity = self.range(1, 50) as u32;
        let shipdate = self.orderdate + self.range(1, 121) as u16;
        let receiptdate = shipdate + self.range(1, 30) as u16;
        let returnflag = if receiptdate <= CURRENT_DAY { if self.rng.chance(1, 2) { 2 } else { 0 } } else { 1 };
        let r = Row {
            orderkey: self.order,
            partkey,
            custkey: self.custkey,
            suppkey: self.range(1, 10_000) as u16,
            linenumber,
            returnflag,
            linestatus: (shipdate > CURRENT_DAY) as u8,
            shipmode: self.range(0, 6) as u8,
            quantity,
            extendedprice: quantity * part_price(partkey),
            discount: self.range(0, 10) as u8,
            tax: self.range(0, 8) as u8,
            shipinstruct: self.range(0, 3) as u8,
            brand: self.range(0, 24) as u8,
            container: self.range(0, 39) as u8,
            ptype: self.range(0, 149) as u8,
            orderpriority: self.priority,
            segment: (self.custkey % 5) as u8,
            shipdate,
            commitdate: self.orderdate + self.range(30, 90) as u16,
            receiptdate,
            orderdate: self.orderdate,
            size: self.range(1, 50) as u8,
            a: self.range(0, 999_999) as i32,
            b: self.range(0, 2_000) as i32 - 1_000,
            c: self.range(0, 1 << 20) as i32,
            d: self.range(1, 1_000) as i32,
            rowid: self.next,
        };
        self.next += 1;
        r
    }
}

// ---------------------------------------------------------------------------------------------
// text

const VOCABULARY: usize = 60_000;
const ZIPF_S: f64 = 0.9;

fn vocabulary(rng: &mut SeededRng) -> Vec<String> {
    let mut seen = HashSet::with_capacity(VOCABULARY);
    let mut words = Vec::with_capacity(VOCABULARY);
    while words.len() < VOCABULARY {
        let len = 2 + rng.below(8) as usize;
        let w: String = (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Inverse-CDF sampler over ranks 0..n with P(k) ∝ 1/(k+1)^s.
struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    fn new(n: usize, s: f64) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (0..n)
            .map(|k| {
                acc += 1.0 / ((k + 1) as f64).powf(s);
                acc
            })
            .collect();
        for c in &mut cdf {
            *c /= acc;
        }
        Self { cdf }
    }

    fn sample(&self, rng: &mut SeededRng) -> usize {
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

fn text_rows(rows: u64, seed: u64, out: &mut Vec<u8>) {
    let mut rng = SeededRng::new(seed);
    let words = vocabulary(&mut rng.fork(1));
    let zipf = Zipf::new(words.len(), ZIPF_S);
    let mut pending: Option<usize> = None;
    for _ in 0..rows {
        let mut line = [b' '; ROW_BYTES];
        let mut at = 0;
        loop {
            let w = pending.take().unwrap_or_else(|| zipf.sample(&mut rng));
            let bytes = words[w].as_bytes();
            if at + bytes.len() >= ROW_BYTES {
                pending = Some(w);
                break;
            }
            line[at..at + bytes.len()].copy_from_slice(bytes);
            at += bytes.len() + 1;
        }
        out.extend_from_slice(&line);
    }
}

// ---------------------------------------------------------------------------------------------
// datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Lineitem,
    Text,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

pub const DATASET_MAGIC: [u8; 8] = *b"SSDTEEDS";
pub const DATASET_VERSION: u32 = 1;

/// Fixed-width rows packed into 4KB pages, 64 rows per page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub kind: DataKind,
    pub seed: u64,
    payload: Vec<u8>,
}

impl Dataset {
    pub fn generate(kind: DataKind, pages: u32, seed: u64) -> Dataset {
        assert!(pages >= 1, "a dataset needs at least one page");
        let rows = pages as u64 * ROWS_PER_PAGE as u64;
        let mut payload = Vec::with_capacity(rows as usize * ROW_BYTES);
        match kind {
            DataKind::Lineitem => {
                let mut g = RowGen::new(seed);
                for _ in 0..rows {
                    payload.extend_from_slice(&g.row().encode());
                }
            }
            DataKind::Text => text_rows(rows, seed, &mut payload),
        }
        Dataset { kind, seed, payload }
    }

    pub fn pages(&self) -> u32 {
        (self.payload.len() / PAGE_BYTES) as u32
    }

    pub fn rows(&self) -> u64 {
        (self.payload.len() / ROW_BYTES) as u64
    }

    pub fn page(&self, i: u32) -> &[u8] {
        &self.payload[i as usize * PAGE_BYTES..(i as usize + 1) * PAGE_BYTES]
    }

    pub fn row_bytes(&self, i: u64) -> &[u8; ROW_BYTES] {
        self.payload[i as usize * ROW_BYTES..(i as usize + 1) * ROW_BYTES].try_into().unwrap()
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Overwrites one row; used to plant faulty records.
    pub fn set_row(&mut self, i: u64, bytes: &[u8; ROW_BYTES]) {
        self.payload[i as usize * ROW_BYTES..(i as usize + 1) * ROW_BYTES].copy_from_slice(bytes);
    }

    pub fn checksum(&self) -> u64 {
        fnv1a(&self.payload)
    }

    /// Layout: magic[8], version u32, kind u32, row width u32, row count u64, seed u64, payload.
    /// Integers are little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        let kind: u32 = match self.kind {
            DataKind::Lineitem => 0,
            DataKind::Text => 1,
        };
        w.write_all(&kind.to_le_bytes())?;
        w.write_all(&(ROW_BYTES as u32).to_le_bytes())?;
        w.write_all(&self.rows().to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.payload)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Dataset, DatasetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != DATASET_MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != DATASET_VERSION {
            return Err(DatasetError::Version(version));
        }
        r.read_exact(&mut b4)?;
        let kind = match u32::from_le_bytes(b4) {
            0 => DataKind::Lineitem,
            1 => DataKind::Text,
            k => return Err(DatasetError::Malformed(format!("kind {k}"))),
        };
        r.read_exact(&mut b4)?;
        let width = u32::from_le_bytes(b4);
        if width as usize != ROW_BYTES {
            return Err(DatasetError::Malformed(format!("row width {width}")));
        }
        r.read_exact(&mut b8)?;
        let rows = u64::from_le_bytes(b8);
        if rows == 0 || rows % ROWS_PER_PAGE as u64 != 0 {
            return Err(DatasetError::Malformed(format!("row count {rows} is not a whole number of pages")));
        }
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let mut payload = vec![0u8; rows as usize * ROW_BYTES];
        r.read_exact(&mut payload)?;
        Ok(Dataset { kind, seed, payload })
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

// ---------------------------------------------------------------------------------------------
// execution interface

/// A fault raised while a program runs; maps 1:1 onto TEE abort reasons.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Fault {
    #[error("access violation at heap offset {0:#x}")]
    AccessViolation(u64),
    #[error("memory corruption: {0}")]
    MemoryCorruption(String),
    #[error("program exception: {0}")]
    ProgramException(String),
}

/// What a program sees of the machine it runs on. Heap offsets are relative to the program's
/// heap; one call touches the 64-byte line containing the offset.
pub trait Machine {
    fn compute(&mut self, cycles: u64);
    fn load(&mut self, heap_off: u64) -> Result<(), Fault>;
    /// Writes `bytes` (which must not cross a line) at `heap_off`.
    fn store(&mut self, heap_off: u64, bytes: &[u8]) -> Result<(), Fault>;
}

/// Counts accesses; no timing. Used for functional runs and oracles.
#[derive(Debug, Default, Clone)]
pub struct CountingMachine {
    pub cycles: u64,
    pub loads: u64,
    pub stores: u64,
    pub limit: Option<u64>,
}

impl Machine for CountingMachine {
    fn compute(&mut self, cycles: u64) {
        self.cycles += cycles;
    }

    fn load(&mut self, off: u64) -> Result<(), Fault> {
        if self.limit.is_some_and(|l| off >= l) {
            return Err(Fault::AccessViolation(off));
        }
        self.loads += 1;
        Ok(())
    }

    fn store(&mut self, off: u64, _: &[u8]) -> Result<(), Fault> {
        if self.limit.is_some_and(|l| off >= l) {
            return Err(Fault::AccessViolation(off));
        }
        self.stores += 1;
        Ok(())
    }
}

/// Functional answer of a program. Integer-only so every execution mode agrees bit for bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Answer {
    Sum { rows: u64, sum: i64 },
    Groups { groups: Vec<Group> },
    RowIds { count: u64, digest: u64, first: Vec<u32> },
    TopK { items: Vec<(u32, i64)> },
    Ratio { numerator: i64, denominator: i64 },
    Counts { values: Vec<(String, u64)> },
    Ledger { transactions: u64, updates: u64, total: i64, digest: u64 },
    Words { total: u64, distinct: u64, top: Vec<(String, u64)> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub key: String,
    pub count: u64,
    pub sums: Vec<i64>,
}

impl Answer {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("answers always serialize")
    }

    pub fn from_bytes(b: &[u8]) -> Option<Answer> {
        serde_json::from_slice(b).ok()
    }
}

/// An offloaded program. The driver feeds every input row, in dataset order, then calls `finish`.
pub trait Program {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault>;
    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault>;
}

/// Runs a program over a dataset without any timing model.
pub fn run_functional(kind: WorkloadKind, data: &Dataset, costs: &CostModel) -> Result<(Answer, CountingMachine), Fault> {
    let mut p = kind.program(costs);
    let mut m = CountingMachine { limit: Some(kind.heap_bytes()), ..Default::default() };
    for i in 0..data.rows() {
        m.loads += 1; // the input line itself
        p.record(&mut m, data.row_bytes(i))?;
    }
    let a = p.finish(&mut m)?;
    Ok((a, m))
}

/// Stores a small state blob every `every` records: the partial-result checkpoint that gives the
/// scan kernels their (tiny) write traffic.
struct Checkpoint {
    every: u64,
    seen: u64,
}

impl Checkpoint {
    fn tick(&mut self, m: &mut dyn Machine, state: i64) -> Result<(), Fault> {
        self.seen += 1;
        if self.seen % self.every == 0 {
            m.store(0, &state.to_le_bytes())?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------------------------
// programs

struct Arithmetic {
    cycles: u64,
    sum: i64,
    rows: u64,
    ck: Checkpoint,
}

impl Arithmetic {
    fn new(cycles: u64) -> Self {
        Self { cycles, sum: 0, rows: 0, ck: Checkpoint { every: 4_950, seen: 0 } }
    }
}

impl Program for Arithmetic {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault> {
        let r = Row::decode(row);
        m.compute(self.cycles);
        if r.d == 0 {
            return Err(Fault::ProgramException(format!("division by zero at row {}", r.rowid)));
        }
        self.sum = self.sum.wrapping_add((r.a as i64 * r.b as i64 + r.c as i64) / r.d as i64);
        self.rows += 1;
        self.ck.tick(m, self.sum)
    }

    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault> {
        m.store(0, &self.sum.to_le_bytes())?;
        Ok(Answer::Sum { rows: self.rows, sum: self.sum })
    }
}

/// Count, sum(price), sum(quantity) grouped by return flag.
struct Aggregate {
    cycles: u64,
    groups: [(u64, i64, i64); 3],
    ck: Checkpoint,
}

impl Aggregate {
    fn new(cycles: u64) -> Self {
        Self { cycles, groups: [(0, 0, 0); 3], ck: Checkpoint { every: 4_800, seen: 0 } }
    }
}

impl Program for Aggregate {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault> {
        let r = Row::decode(row);
        m.compute(self.cycles);
        let g = &mut self.groups[r.returnflag as usize];
        g.0 += 1;
        g.1 += r.extendedprice as i64;
        g.2 += r.quantity as i64;
        let s = g.1;
        self.ck.tick(m, s)
    }

    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault> {
        m.store(0, &self.groups[0].1.to_le_bytes())?;
        let groups = self
            .groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.0 > 0)
            .map(|(i, g)| Group { key: RETURNFLAGS[i].to_string(), count: g.0, sums: vec![g.1, g.2] })
            .collect();
        Ok(Answer::Groups { groups })
    }
}

pub const FILTER_THRESHOLD: i32 = 2_750;
const FILTER_FIRST: usize = 64;

/// Selects rows with `a < FILTER_THRESHOLD` (~0.28%) and writes their ids to an output buffer,
/// one full line per 16 ids.
struct Filter {
    cycles: u64,
    count: u64,
    digest: u64,
    first: Vec<u32>,
    pending: Vec<u8>,
    out_off: u64,
}

impl Filter {
    fn new(cycles: u64) -> Self {
        Self { cycles, count: 0, digest: 0xcbf2_9ce4_8422_2325, first: Vec::new(), pending: Vec::new(), out_off: 64 }
    }

    fn flush(&mut self, m: &mut dyn Machine) -> Result<(), Fault> {
        if !self.pending.is_empty() {
            m.store(self.out_off, &self.pending)?;
            self.out_off += 64;
            self.pending.clear();
        }
        Ok(())
    }
}

impl Program for Filter {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault> {
        let r = Row::decode(row);
        m.compute(self.cycles);
        if r.a < FILTER_THRESHOLD {
            self.count += 1;
            for b in r.rowid.to_le_bytes() {
                self.digest = (self.digest ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            if self.first.len() < FILTER_FIRST {
                self.first.push(r.rowid);
            }
            self.pending.extend_from_slice(&r.rowid.to_le_bytes());
            if self.pending.len() == 64 {
                self.flush(m)?;
            }
        }
        Ok(())
    }

    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault> {
        self.flush(m)?;
        Ok(Answer::RowIds { count: self.count, digest: self.digest, first: self.first.clone() })
    }
}

pub const Q1_CUTOFF: u16 = LAST_ORDER_DAY + 121 - 90;

/// Pricing summary: sums grouped by (returnflag, linestatus) for lines shipped before the cutoff.
struct Q1 {
    cycles: u64,
    groups: BTreeMap<(u8, u8), (u64, [i64; 5])>,
    ck: Checkpoint,
}

impl Q1 {
    fn new(cycles: u64) -> Self {
        Self { cycles, groups: BTreeMap::new(), ck: Checkpoint { every: 150_000, seen: 0 } }
    }
}

impl Program for Q1 {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault> {
        let r = Row::decode(row);
        m.compute(self.cycles);
        if r.shipdate <= Q1_CUTOFF {
            let g = self.groups.entry((r.returnflag, r.linestatus)).or_default();
            g.0 += 1;
            g.1[0] += r.quantity as i64;
            g.1[1] += r.extendedprice as i64;
            g.1[2] += r.disc_price();
            g.1[3] += r.disc_price() * (100 + r.tax as i64);
            g.1[4] += r.discount as i64;
        }
        self.ck.tick(m, self.groups.len() as i64)
    }

    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault> {
        m.store(0, &[1])?;
        let groups = self
            .groups
            .iter()
            .map(|(&(f, s), (n, sums))| Group {
                key: format!("{}{}", RETURNFLAGS[f as usize], LINESTATUS[s as usize]),
                count: *n,
                sums: sums.to_vec(),
            })
            .collect();
        Ok(Answer::Groups { groups })
    }
}

pub const Q3_DATE: u16 = 1169;
const HASH_BASE: u64 = 4096;

fn bucket_of(key: u64, buckets: u64) -> u64 {
    key.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40 & (buckets - 1)
}

/// Shipping priority: revenue per order for BUILDING customers around a date, top 10.
struct Q3 {
    cycles: u64,
    probe: u64,
    revenue: HashMap<u32, (i64, u16)>,
}

impl Q3 {
    const BUCKETS: u64 = 1 << 16;

    fn new(cycles: u64, probe: u64) -> Self {
        Self { cycles, probe, revenue: HashMap::new() }
    }
}

impl Program for Q3 {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault> {
        let r = Row::decode(row);
        m.compute(self.cycles);
        if r.segment == SEG_BUILDING && r.orderdate < Q3_DATE && r.shipdate > Q3_DATE {
            let off = HASH_BASE + bucket_of(r.orderkey as u64, Self::BUCKETS) * 16;
            m.compute(self.probe);
            m.load(off)?;
            let e = self.revenue.entry(r.orderkey).or_insert((0, r.orderdate));
            e.0 += r.disc_price();
            let mut slot = [0u8; 16];
            slot[..4].copy_from_slice(&r.orderkey.to_le_bytes());
            slot[8..].copy_from_slice(&e.0.to_le_bytes());
            m.store(off, &slot)?;
        }
        Ok(())
    }

    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault> {
        m.compute(self.probe * self.revenue.len() as u64);
        let mut v: Vec<(u32, i64, u16)> = self.revenue.iter().map(|(&k, &(rev, d))| (k, rev, d)).collect();
        v.sort_by(|x, y| y.1.cmp(&x.1).then(x.2.cmp(&y.2)).then(x.0.cmp(&y.0)));
        v.truncate(10);
        m.store(0, &(v.len() as u64).to_le_bytes())?;
        Ok(Answer::TopK { items: v.into_iter().map(|(k, r, _)| (k, r)).collect() })
    }
}

pub const Q12_MODES: [u8; 2] = [5, 3];
pub const Q12_YEAR: (u16, u16) = (731, 1096);

/// Shipping modes and order priority: late lines received in one year, high vs low priority.
struct Q12 {
    cycles: u64,
    counts: [[u64; 2]; 2],
    ck: Checkpoint,
}

impl Q12 {
    fn new(cycles: u64) -> Self {
        Self { cycles, counts: [[0; 2]; 2], ck: Checkpoint { every: 33_000, seen: 0 } }
    }
}

impl Program for Q12 {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault> {
        let r = Row::decode(row);
        m.compute(self.cycles);
        if let Some(i) = Q12_MODES.iter().position(|&s| s == r.shipmode) {
            if r.commitdate < r.receiptdate
                && r.shipdate < r.commitdate
                && (Q12_YEAR.0..Q12_YEAR.1).contains(&r.receiptdate)
            {
                self.counts[i][(r.orderpriority >= 2) as usize] += 1;
            }
        }
        self.ck.tick(m, self.counts[0][0] as i64)
    }

    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault> {
        m.store(0, &[1])?;
        let mut values = Vec::new();
        for (i, &mode) in Q12_MODES.iter().enumerate() {
            values.push((format!("{}:high", SHIPMODES[mode as usize]), self.counts[i][0]));
            values.push((format!("{}:low", SHIPMODES[mode as usize]), self.counts[i][1]));
        }
        Ok(Answer::Counts { values })
    }
}

pub const Q14_MONTH: (u16, u16) = (1339, 1369);

/// Promotion effect: promo share of one month's revenue.
struct Q14 {
    cycles: u64,
    promo: i64,
    total: i64,
    ck: Checkpoint,
}

impl Q14 {
    fn new(cycles: u64) -> Self {
        Self { cycles, promo: 0, total: 0, ck: Checkpoint { every: 250_000, seen: 0 } }
    }
}

impl Program for Q14 {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault> {
        let r = Row::decode(row);
        m.compute(self.cycles);
        if (Q14_MONTH.0..Q14_MONTH.1).contains(&r.shipdate) {
            let rev = r.disc_price();
            self.total += rev;
            if r.ptype < PROMO_TYPES {
                self.promo += rev;
            }
        }
        self.ck.tick(m, self.total)
    }

    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault> {
        m.store(0, &self.total.to_le_bytes())?;
        Ok(Answer::Ratio { numerator: 100 * self.promo, denominator: self.total })
    }
}

/// (brand, containers, quantity range, max size) for the three Q19 disjuncts.
pub const Q19_TERMS: [(u8, std::ops::Range<u8>, std::ops::RangeInclusive<u32>, u8); 3] =
    [(6, 0..5, 1..=11, 5), (12, 8..13, 10..=20, 10), (18, 16..21, 20..=30, 15)];

/// Discounted revenue: brand/container/quantity/size disjunction, air shipment, in-person delivery.
struct Q19 {
    cycles: u64,
    revenue: i64,
    ck: Checkpoint,
}

impl Q19 {
    fn new(cycles: u64) -> Self {
        Self { cycles, revenue: 0, ck: Checkpoint { every: 1_000_000, seen: 0 } }
    }
}

pub fn q19_matches(r: &Row) -> bool {
    r.shipmode <= 1
        && r.shipinstruct == INSTRUCT_DELIVER_IN_PERSON
        && Q19_TERMS.iter().any(|(brand, cont, qty, size)| {
            r.brand == *brand && cont.contains(&r.container) && qty.contains(&r.quantity) && r.size <= *size
        })
}

impl Program for Q19 {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault> {
        let r = Row::decode(row);
        m.compute(self.cycles);
        if q19_matches(&r) {
            self.revenue += r.disc_price();
        }
        self.ck.tick(m, self.revenue)
    }

    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault> {
        m.store(0, &self.revenue.to_le_bytes())?;
        Ok(Answer::Sum { rows: self.ck.seen, sum: self.revenue })
    }
}

pub const TPCB_ACCOUNTS: u64 = 100_000;
pub const TPCB_TELLERS: u64 = 1_000;
pub const TPCB_BRANCHES: u64 = 100;
/// One row in this many is a deposit; the rest are balance inquiries.
pub const TPCB_DEPOSIT_EVERY: i32 = 29;

/// Skewed account choice: squaring a uniform draw favours low account numbers.
pub fn tpcb_account(r: &Row) -> u64 {
    (r.a as u64 * r.a as u64 / 10_000_000) % TPCB_ACCOUNTS
}

/// Debit/credit: every row reads an account; deposits update account, teller and branch balances
/// and append a 16-byte history record.
struct TpcB {
    cycles: u64,
    probe: u64,
    accounts: Vec<i64>,
    tellers: Vec<i64>,
    branches: Vec<i64>,
    tx: u64,
    updates: u64,
}

impl TpcB {
    const ACCOUNT_BASE: u64 = 64 << 10;
    const TELLER_BASE: u64 = 8 << 10;
    const BRANCH_BASE: u64 = 4 << 10;
    const HISTORY_BASE: u64 = 1 << 20;

    fn new(cycles: u64, probe: u64) -> Self {
        Self {
            cycles,
            probe,
            accounts: vec![0; TPCB_ACCOUNTS as usize],
            tellers: vec![0; TPCB_TELLERS as usize],
            branches: vec![0; TPCB_BRANCHES as usize],
            tx: 0,
            updates: 0,
        }
    }
}

impl Program for TpcB {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault> {
        let r = Row::decode(row);
        m.compute(self.cycles);
        self.tx += 1;
        let acc = tpcb_account(&r);
        let a_off = Self::ACCOUNT_BASE + acc * 8;
        m.compute(self.probe);
        m.load(a_off)?;
        if r.b.rem_euclid(TPCB_DEPOSIT_EVERY) != 0 {
            return Ok(());
        }
        let delta = r.b as i64;
        let t = r.suppkey as u64 % TPCB_TELLERS;
        let br = r.suppkey as u64 % TPCB_BRANCHES;
        self.accounts[acc as usize] += delta;
        self.tellers[t as usize] += delta;
        self.branches[br as usize] += delta;
        m.compute(3 * self.probe);
        m.store(a_off, &self.accounts[acc as usize].to_le_bytes())?;
        m.load(Self::TELLER_BASE + t * 8)?;
        m.store(Self::TELLER_BASE + t * 8, &self.tellers[t as usize].to_le_bytes())?;
        m.load(Self::BRANCH_BASE + br * 8)?;
        m.store(Self::BRANCH_BASE + br * 8, &self.branches[br as usize].to_le_bytes())?;
        let h = Self::HISTORY_BASE + (self.updates * 16) % (512 << 10);
        let mut rec = [0u8; 16];
        rec[..8].copy_from_slice(&acc.to_le_bytes());
        rec[8..].copy_from_slice(&delta.to_le_bytes());
        m.store(h, &rec)?;
        self.updates += 1;
        Ok(())
    }

    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault> {
        m.store(0, &self.updates.to_le_bytes())?;
        let bytes: Vec<u8> = self.accounts.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(Answer::Ledger {
            transactions: self.tx,
            updates: self.updates,
            total: self.branches.iter().sum(),
            digest: fnv1a(&bytes),
        })
    }
}

pub const TPCC_ITEMS: u64 = 100_000;
pub const TPCC_DISTRICTS: u64 = 100;
/// One row in this many belongs to a new-order transaction; the rest are stock-level checks.
pub const TPCC_NEW_ORDER_EVERY: i32 = 14;

/// New-order / stock-level mix over a stock table: every row reads an item's stock; new-order
/// lines decrement it (restocking below 10), bump the district's order counter and append an
/// order line.
struct TpcC {
    cycles: u64,
    probe: u64,
    stock: Vec<i64>,
    next_order: Vec<u64>,
    lines: u64,
    rows: u64,
}

impl TpcC {
    const STOCK_BASE: u64 = 64 << 10;
    const DISTRICT_BASE: u64 = 4 << 10;
    const LINES_BASE: u64 = 2 << 20;

    fn new(cycles: u64, probe: u64) -> Self {
        Self { cycles, probe, stock: vec![50; TPCC_ITEMS as usize], next_order: vec![0; TPCC_DISTRICTS as usize], lines: 0, rows: 0 }
    }
}

impl Program for TpcC {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault> {
        let r = Row::decode(row);
        m.compute(self.cycles);
        self.rows += 1;
        let item = r.partkey as u64 % TPCC_ITEMS;
        let s_off = Self::STOCK_BASE + item * 16;
        m.compute(self.probe);
        m.load(s_off)?;
        if r.b.rem_euclid(TPCC_NEW_ORDER_EVERY) != 0 {
            return Ok(());
        }
        let q = r.quantity as i64 % 10 + 1;
        let s = &mut self.stock[item as usize];
        *s = if *s >= q + 10 { *s - q } else { *s - q + 91 };
        let mut slot = [0u8; 16];
        slot[..8].copy_from_slice(&s.to_le_bytes());
        m.compute(3 * self.probe);
        m.store(s_off, &slot)?;
        let d = r.custkey as u64 % TPCC_DISTRICTS;
        self.next_order[d as usize] += 1;
        m.load(Self::DISTRICT_BASE + d * 8)?;
        m.store(Self::DISTRICT_BASE + d * 8, &self.next_order[d as usize].to_le_bytes())?;
        let l = Self::LINES_BASE + (self.lines * 32) % (1 << 20);
        let mut rec = [0u8; 32];
        rec[..4].copy_from_slice(&r.orderkey.to_le_bytes());
        rec[4..8].copy_from_slice(&(item as u32).to_le_bytes());
        rec[8..16].copy_from_slice(&q.to_le_bytes());
        m.store(l, &rec)?;
        self.lines += 1;
        Ok(())
    }

    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault> {
        m.store(0, &self.lines.to_le_bytes())?;
        let bytes: Vec<u8> = self.stock.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(Answer::Ledger {
            transactions: self.rows,
            updates: self.lines,
            total: self.stock.iter().sum(),
            digest: fnv1a(&bytes),
        })
    }
}

/// Word frequencies in an open-addressing table of 16-byte slots (2MB, about half full). Each word probes until
/// it finds its slot or an empty one and then writes the updated count back.
struct Wordcount {
    cycles: u64,
    probe: u64,
    counts: HashMap<Box<[u8]>, u64>,
    slots: Vec<u64>,
    total: u64,
}

impl Wordcount {
    const SLOTS: u64 = 1 << 17;
    const BASE: u64 = 64 << 10;

    fn new(cycles: u64, probe: u64) -> Self {
        Self { cycles, probe, counts: HashMap::new(), slots: vec![0; Self::SLOTS as usize], total: 0 }
    }

    fn slot_for(&mut self, m: &mut dyn Machine, h: u64) -> Result<u64, Fault> {
        let h = h | 1;
        let mut i = bucket_of(h, Self::SLOTS);
        loop {
            m.compute(self.probe);
            m.load(Self::BASE + i * 16)?;
            let s = self.slots[i as usize];
            if s == h || s == 0 {
                self.slots[i as usize] = h;
                return Ok(i);
            }
            i = (i + 1) & (Self::SLOTS - 1);
        }
    }
}

impl Program for Wordcount {
    fn record(&mut self, m: &mut dyn Machine, row: &[u8; ROW_BYTES]) -> Result<(), Fault> {
        for w in row.split(|&b| b == b' ').filter(|w| !w.is_empty()) {
            m.compute(self.cycles);
            self.total += 1;
            let i = self.slot_for(m, fnv1a(w))?;
            let c = self.counts.entry(w.into()).or_insert(0);
            *c += 1;
            let mut slot = [0u8; 16];
            slot[..8].copy_from_slice(&self.slots[i as usize].to_le_bytes());
            slot[8..].copy_from_slice(&c.to_le_bytes());
            m.store(Self::BASE + i * 16, &slot)?;
        }
        Ok(())
    }

    fn finish(&mut self, m: &mut dyn Machine) -> Result<Answer, Fault> {
        m.store(0, &self.total.to_le_bytes())?;
        let mut v: Vec<(String, u64)> =
            self.counts.iter().map(|(w, &c)| (String::from_utf8_lossy(w).into_owned(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let distinct = v.len() as u64;
        v.truncate(10);
        Ok(Answer::Words { total: self.total, distinct, top: v })
    }
}
