//! Runs workloads on a simulated device and turns the timeline into reports.
//!
//! In-storage modes are event driven: each TEE is pinned to a core and keeps a ring of input
//! buffers in flight (issue → flash read → DMA into its window → compute). Cores round-robin
//! their TEEs in fixed slices. The host modes are a closed-form pipeline of flash, the external
//! link and the host CPU.

use std::collections::HashMap;
use std::ops::Range;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cipher::CipherError;
use crate::config::{ConfigError, Mode, RunConfig};
use crate::device::{Device, DeviceError};
use crate::flash::{transfer_ns, FlashError};
use crate::ftl::{FtlError, UNOWNED};
use crate::protect::{AccessContext, AccessMode};
use crate::report::{Breakdown, Counters, Overhead, SimReport, SCHEMA_VERSION};
use crate::secmem::{CounterScheme, OpCost, PagePermission, SecMemError, Snapshot, TreeKind, PAGE_BYTES};
use crate::sim::{ps_to_ns_ceil, Nanos, SeededRng, SimError, Simulator};
use crate::tee::{AbortReason, AbortRecord, OffloadRequest, ProgramImage, TeeConfig, TeeError, TeeRuntime};
use crate::workloads::{Answer, DataKind, Dataset, Fault, Machine, Program, Row, WorkloadKind};

/// Core clock the host speedup is quoted against; the host model does not follow the
/// in-storage frequency knob.
pub const BASE_CORE_GHZ: f64 = 1.6;

/// Request during which the memory attacks strike (early, after the ring has filled).
pub const ATTACK_REQUEST: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    /// Flip a ciphertext bit of an input line in the TEE window.
    FlipData,
    FlipMac,
    /// Flip a bit of the counter block covering an input page.
    FlipCounter,
    /// Flip a bit of a stored integrity-tree node.
    FlipTree,
    /// Swap two encrypted lines.
    SwapLines,
    /// Roll a reused input buffer back to its earlier contents and counters.
    Replay,
    /// Request a page owned by another TEE.
    CrossTee,
    /// Load from outside the TEE's memory window.
    WindowEscape,
    /// Plant a row that makes the arithmetic kernel divide by zero.
    ZeroDivisor,
}

impl Attack {
    pub const ALL: [Attack; 9] = [
        Attack::FlipData,
        Attack::FlipMac,
        Attack::FlipCounter,
        Attack::FlipTree,
        Attack::SwapLines,
        Attack::Replay,
        Attack::CrossTee,
        Attack::WindowEscape,
        Attack::ZeroDivisor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attack::FlipData => "flip_data",
            Attack::FlipMac => "flip_mac",
            Attack::FlipCounter => "flip_counter",
            Attack::FlipTree => "flip_tree",
            Attack::SwapLines => "swap_lines",
            Attack::Replay => "replay",
            Attack::CrossTee => "cross_tee",
            Attack::WindowEscape => "window_escape",
            Attack::ZeroDivisor => "zero_divisor",
        }
    }

    /// The abort the runtime must record.
    pub fn expected(self) -> AbortReason {
        match self {
            Attack::CrossTee | Attack::WindowEscape => AbortReason::AccessViolation,
            Attack::ZeroDivisor => AbortReason::ProgramException,
            _ => AbortReason::MemoryCorruption,
        }
    }
}

impl FromStr for Attack {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attack::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown attack `{s}`"))
    }
}

impl std::fmt::Display for Attack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Ftl(#[from] FtlError),
    #[error(transparent)]
    Flash(#[from] FlashError),
    #[error(transparent)]
    Tee(#[from] TeeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Memory(#[from] SecMemError),
    #[error("{0}")]
    Unsupported(String),
}

/// One simulation: a device, a mode and the TEEs sharing it. Tenant 0 is the workload of
/// interest; an attack always targets tenant 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub label: String,
    pub config: RunConfig,
    pub mode: Mode,
    pub tenants: Vec<WorkloadKind>,
    pub attack: Option<Attack>,
}

impl Job {
    pub fn single(label: impl Into<String>, config: &RunConfig, kind: WorkloadKind, mode: Mode) -> Job {
        Job { label: label.into(), config: config.clone(), mode, tenants: vec![kind], attack: None }
    }
}

/// Generated datasets, shared between runs (generation dominates short runs).
#[derive(Debug, Default)]
pub struct Datasets {
    cache: Mutex<HashMap<(DataKind, u32, u64), Arc<Dataset>>>,
}

impl Datasets {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, kind: DataKind, pages: u32, seed: u64) -> Arc<Dataset> {
        let mut c = self.cache.lock().unwrap();
        c.entry((kind, pages, seed)).or_insert_with(|| Arc::new(Dataset::generate(kind, pages, seed))).clone()
    }
}

// ---------------------------------------------------------------------------------------------
// the machine a program runs on

#[derive(Debug, Clone, Copy, Default)]
struct Charge {
    cycles: u64,
    stall_ns: Nanos,
    mem: OpCost,
    loads: u64,
    stores: u64,
    l2_accesses: u64,
    l2_misses: u64,
    l2_writebacks: u64,
}

impl Charge {
    fn add(&mut self, o: &Charge) {
        self.cycles += o.cycles;
        self.stall_ns += o.stall_ns;
        self.mem.add(o.mem);
        self.loads += o.loads;
        self.stores += o.stores;
        self.l2_accesses += o.l2_accesses;
        self.l2_misses += o.l2_misses;
        self.l2_writebacks += o.l2_writebacks;
    }
}

/// Time of one action on a core, by breakdown category.
#[derive(Debug, Clone, Copy, Default)]
struct Parts {
    compute: Nanos,
    encryption: Nanos,
    verification: Nanos,
    other: Nanos,
}

impl Parts {
    fn of(c: &Charge, ghz: f64) -> Parts {
        Parts {
            compute: (c.cycles as f64 / ghz).ceil() as Nanos + c.stall_ns,
            encryption: ps_to_ns_ceil(c.mem.encrypt_ps),
            verification: ps_to_ns_ceil(c.mem.verify_ps),
            other: 0,
        }
    }

    fn total(&self) -> Nanos {
        self.compute + self.encryption + self.verification + self.other
    }
}

fn mem_fault(e: SecMemError) -> Fault {
    if e.is_integrity() {
        Fault::MemoryCorruption(e.to_string())
    } else {
        Fault::ProgramException(e.to_string())
    }
}

/// Program loads and stores go through the shared L2 into TEE memory. Addresses given to the
/// L2 and the memory are arena offsets; protection checks use DRAM addresses.
struct DevMachine<'a> {
    dev: &'a mut Device,
    guard: Option<&'a AccessContext>,
    heap_off: u64,
    heap_addr: u64,
    heap_limit: u64,
    c: Charge,
    /// Write-backs of other TEEs' lines this machine's misses forced; charged to their owners.
    foreign: Vec<(u64, OpCost)>,
}

impl DevMachine<'_> {
    fn touch(&mut self, off: u64, write: bool, stall: bool) -> Result<(), Fault> {
        self.c.l2_accesses += 1;
        let a = self.dev.l2.lookup(off, write);
        if a.hit {
            return Ok(());
        }
        self.c.l2_misses += 1;
        if let Some((addr, data)) = a.writeback {
            let cost = self.dev.mem.write_line(addr, &data).map_err(mem_fault)?;
            if (self.heap_off..self.heap_off + self.heap_limit).contains(&addr) {
                self.c.l2_writebacks += 1;
                self.c.mem.add(cost);
            } else {
                self.foreign.push((addr, cost));
            }
        }
        let line = off & !63;
        let (data, cost) = self.dev.mem.read_line(line).map_err(mem_fault)?;
        self.c.mem.add(cost);
        if stall {
            self.c.stall_ns += self.dev.dram_access_ns;
        }
        self.dev.l2.fill(line, data);
        Ok(())
    }

    /// One prefetched input line.
    fn input(&mut self, off: u64) -> Result<[u8; 64], Fault> {
        self.touch(off, false, false)?;
        self.c.loads += 1;
        Ok(*self.dev.l2.data(off).expect("line was just filled"))
    }

    fn check(&mut self, off: u64, mode: AccessMode) -> Result<(), Fault> {
        if let Some(ctx) = self.guard {
            let addr = self.heap_addr.saturating_add(off);
            if !self.dev.protect.access(ctx, addr, mode).is_allowed() {
                return Err(Fault::AccessViolation(off));
            }
        }
        if off >= self.heap_limit {
            return Err(Fault::AccessViolation(off));
        }
        Ok(())
    }
}

impl Machine for DevMachine<'_> {
    fn compute(&mut self, cycles: u64) {
        self.c.cycles += cycles;
    }

    fn load(&mut self, off: u64) -> Result<(), Fault> {
        self.check(off, AccessMode::Read)?;
        self.touch(self.heap_off + off, false, true)?;
        self.c.loads += 1;
        Ok(())
    }

    fn store(&mut self, off: u64, bytes: &[u8]) -> Result<(), Fault> {
        self.check(off, AccessMode::Write)?;
        let addr = self.heap_off + off;
        self.touch(addr, true, true)?;
        let line = self.dev.l2.data(addr).expect("line was just filled");
        let o = (addr % 64) as usize;
        let n = bytes.len().min(64 - o);
        line[o..o + n].copy_from_slice(&bytes[..n]);
        self.c.stores += 1;
        Ok(())
    }
}

fn scan(m: &mut DevMachine, p: &mut dyn Program, ring_off: u64, pages: u64) -> Result<(), Fault> {
    for l in 0..pages * 64 {
        let row = m.input(ring_off + l * 64)?;
        p.record(m, &row)?;
    }
    Ok(())
}

/// Layout of one TEE window: code, input ring, heap.
#[derive(Debug, Clone)]
struct Window {
    region: Range<u64>,
    ring_off: u64,
    ring_pages: Range<u64>,
    heap_off: u64,
    heap_addr: u64,
}

impl Window {
    fn new(dev: &Device, region: Range<u64>, kind: WorkloadKind, ring_bytes: u64) -> Window {
        let code = kind.code_bytes().next_multiple_of(PAGE_BYTES);
        let start = dev.layout.arena_offset(region.start);
        let ring_off = start + code;
        Window {
            ring_pages: ring_off / PAGE_BYTES..(ring_off + ring_bytes) / PAGE_BYTES,
            heap_off: ring_off + ring_bytes,
            heap_addr: region.start + code + ring_bytes,
            ring_off,
            region,
        }
    }
}

fn mem_key(seed: u64) -> [u8; 16] {
    let mut k = [0u8; 16];
    SeededRng::new(seed ^ 0x6b65_795f_6d65_6d00).fill_bytes(&mut k);
    k
}

fn load_dataset(dev: &mut Device, data: &Dataset, base: u32) -> Result<(), RunError> {
    for j in 0..data.pages() {
        dev.ftl.secure_write(base + j, data.page(j), 0)?;
    }
    Ok(())
}

fn dataset_for(job_cfg: &RunConfig, kind: WorkloadKind, attack: Option<Attack>, data: &Datasets) -> Arc<Dataset> {
    let pages = job_cfg.workloads.dataset_pages;
    let d = data.get(kind.data_kind(), pages, job_cfg.run.seed);
    if attack != Some(Attack::ZeroDivisor) {
        return d;
    }
    let mut planted = (*d).clone();
    let i = (ATTACK_REQUEST as u64 * job_cfg.tee_runtime.io_pages as u64 * 64 + 17).min(planted.rows() - 1);
    let mut r = Row::decode(planted.row_bytes(i));
    r.d = 0;
    planted.set_row(i, &r.encode());
    Arc::new(planted)
}

/// Energy, traffic and overhead lines shared by every report.
struct Tally {
    charge: Charge,
    ingest: OpCost,
    requests: u64,
    pages: u64,
    translations: u64,
    misses: u64,
    switches: u64,
}

fn finish_report(
    job: &Job,
    tenant: usize,
    total: Nanos,
    breakdown: Breakdown,
    answer: Option<Answer>,
    abort: Option<AbortRecord>,
    t: &Tally,
    dev: &Device,
    mut overheads: Vec<Overhead>,
) -> SimReport {
    let cfg = &job.config;
    let sm = &cfg.secure_memory;
    let mut mem = t.charge.mem;
    mem.add(t.ingest);
    let verifs = if sm.verify_ps > 0 { mem.verify_ps / sm.verify_ps } else { 0 };
    let enc_ps = mem.encrypt_ps.saturating_sub(verifs * sm.aes_ps);
    let enc_unit = sm.encrypt_ps as f64 * sm.parallel_update_discount;
    let encs = if enc_unit > 0.0 { (enc_ps as f64 / enc_unit).round() as u64 } else { 0 };
    let secure = job.mode == Mode::SecureIsc;
    if secure && enc_ps > 0 {
        overheads.push(Overhead {
            source: "memory_encryption".into(),
            unit_ns: enc_unit / 1000.0,
            count: encs,
            total_ns: enc_ps as f64 / 1000.0,
        });
    }
    if secure && verifs > 0 {
        overheads.push(Overhead {
            source: "memory_verification".into(),
            unit_ns: sm.verify_ps as f64 / 1000.0,
            count: verifs,
            total_ns: (verifs * sm.verify_ps) as f64 / 1000.0,
        });
        overheads.push(Overhead {
            source: "counter_pad_aes".into(),
            unit_ns: sm.aes_ps as f64 / 1000.0,
            count: verifs,
            total_ns: (verifs * sm.aes_ps) as f64 / 1000.0,
        });
    }
    if t.charge.stall_ns > 0 {
        overheads.push(Overhead {
            source: "dram_stall".into(),
            unit_ns: dev.dram_access_ns as f64,
            count: t.charge.stall_ns / dev.dram_access_ns.max(1),
            total_ns: t.charge.stall_ns as f64,
        });
    }
    let ms = dev.mem.stats();
    let cipher_pages = if secure && dev.cipher.config().enabled { t.pages } else { 0 };
    let accesses = t.charge.loads + t.charge.stores;
    let counters = Counters {
        requests: t.requests,
        pages_read: t.pages,
        translations: t.translations,
        mapping_misses: t.misses,
        mapping_miss_ratio: if t.translations == 0 { 0.0 } else { t.misses as f64 / t.translations as f64 },
        world_switches: t.switches,
        program_loads: t.charge.loads,
        program_stores: t.charge.stores,
        write_ratio: if accesses == 0 { 0.0 } else { t.charge.stores as f64 / accesses as f64 },
        l2_accesses: t.charge.l2_accesses,
        l2_misses: t.charge.l2_misses,
        l2_writebacks: t.charge.l2_writebacks,
        counter_misses: verifs,
        verifications: verifs,
        line_encryptions: encs,
        reencryptions: ms.reencryptions,
        minor_overflows: ms.overflows,
        encryption_traffic_pct: ms.encryption_traffic_pct(),
        verification_traffic_pct: ms.verification_traffic_pct(),
        cipher_pages,
        cipher_energy_nj: cipher_pages as f64 * dev.cipher.config().energy_nj_per_page,
    };
    debug_assert_eq!(breakdown.total(), total);
    SimReport {
        schema: SCHEMA_VERSION,
        label: job.label.clone(),
        workload: job.tenants[tenant],
        mode: job.mode,
        seed: cfg.run.seed,
        tenants: job.tenants.len() as u32,
        total_ns: total,
        breakdown,
        answer,
        abort,
        counters,
        overheads,
        config: cfg.clone(),
    }
}

// ---------------------------------------------------------------------------------------------
// in-storage execution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Free,
    Pending,
    Ready,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Create,
    Run,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Create,
    Issue,
    Compute,
    Finalize,
}

struct Tenant {
    kind: WorkloadKind,
    tid: u64,
    program: Box<dyn Program>,
    grant: Vec<u32>,
    /// LPAs in request order (differs from `grant` only under the cross-TEE attack).
    lpas: Vec<u32>,
    eid: u8,
    win: Option<Window>,
    guard: Option<AccessContext>,
    requests: usize,
    next_issue: usize,
    next_compute: usize,
    slots: Vec<Slot>,
    ingest: Vec<OpCost>,
    stage: Stage,
    answer: Option<Answer>,
    abort: Option<AbortRecord>,
    fault: Option<Fault>,
    last: Nanos,
    bd: Breakdown,
    tally: Tally,
    attack: Option<Attack>,
    snapshot: Option<Snapshot>,
    /// Write-backs of this TEE's dirty lines forced out by other TEEs, charged at its next
    /// compute step.
    debt: Charge,
}

struct Core {
    tenants: Vec<usize>,
    current: usize,
    slice_start: Nanos,
    next_wake: Option<Nanos>,
}

enum Ev {
    Wake(usize),
    Arrival { tenant: usize, req: usize, data: Vec<u8> },
}

struct Engine<'j> {
    job: &'j Job,
    dev: Device,
    rt: TeeRuntime,
    tenants: Vec<Tenant>,
    cores: Vec<Core>,
    io_pages: usize,
    ring: usize,
    ghz: f64,
    slice_ns: Nanos,
    secure: bool,
}

fn fault_reason(f: &Fault) -> AbortReason {
    match f {
        Fault::AccessViolation(_) => AbortReason::AccessViolation,
        Fault::MemoryCorruption(_) => AbortReason::MemoryCorruption,
        Fault::ProgramException(_) => AbortReason::ProgramException,
    }
}

impl<'j> Engine<'j> {
    fn new(job: &'j Job, data: &Datasets) -> Result<Self, RunError> {
        let cfg = &job.config;
        let secure = job.mode == Mode::SecureIsc;
        let mut dev = Device::new(&cfg.device_config(job.mode), secure, mem_key(cfg.run.seed))?;
        let pages = cfg.workloads.dataset_pages;
        let io_pages = cfg.tee_runtime.io_pages as usize;
        let ring = cfg.tee_runtime.ring_slots as usize;
        let mut tenants = Vec::new();
        for (i, &kind) in job.tenants.iter().enumerate() {
            let attack = if i == 0 { job.attack } else { None };
            let d = dataset_for(cfg, kind, attack, data);
            let base = i as u32 * pages;
            load_dataset(&mut dev, &d, base)?;
            let grant: Vec<u32> = (base..base + pages).collect();
            let requests = (pages as usize).div_ceil(io_pages);
            tenants.push(Tenant {
                kind,
                tid: i as u64 + 1,
                program: kind.program(&cfg.workloads.costs),
                lpas: grant.clone(),
                grant,
                eid: 0,
                win: None,
                guard: None,
                requests,
                next_issue: 0,
                next_compute: 0,
                slots: vec![Slot::Free; ring],
                ingest: vec![OpCost::default(); ring],
                stage: Stage::Create,
                answer: None,
                abort: None,
                fault: None,
                last: 0,
                bd: Breakdown::default(),
                tally: Tally { charge: Charge::default(), ingest: OpCost::default(), requests: 0, pages: 0, translations: 0, misses: 0, switches: 0 },
                attack,
                snapshot: None,
                debt: Charge::default(),
            });
        }
        if let Some(a) = job.attack {
            if !secure {
                return Err(RunError::Unsupported(format!("attack `{a}` needs mode secure_isc")));
            }
            if a == Attack::ZeroDivisor && job.tenants[0] != WorkloadKind::Arithmetic {
                return Err(RunError::Unsupported("zero_divisor targets the arithmetic workload".into()));
            }
            if tenants[0].requests <= ATTACK_REQUEST + ring {
                return Err(RunError::Unsupported("dataset too small to stage the attack".into()));
            }
            if a == Attack::CrossTee {
                // the victim's data sits just past every tenant's range
                let vbase = job.tenants.len() as u32 * pages;
                let d = data.get(DataKind::Lineitem, 1, cfg.run.seed ^ 0x7669_6374);
                for j in 0..io_pages as u32 {
                    dev.ftl.secure_write(vbase + j, d.page(0), 0)?;
                }
                tenants[0].lpas[ATTACK_REQUEST * io_pages] = vbase;
            }
        }
        dev.ftl.flush_cache();
        dev.ftl.reset_stats();
        dev.ftl.flash_mut().reset_timing();
        let n_cores = cfg.tee_runtime.cores.max(1);
        let mut cores: Vec<Core> =
            (0..n_cores).map(|_| Core { tenants: vec![], current: 0, slice_start: 0, next_wake: None }).collect();
        for i in 0..tenants.len() {
            cores[i % n_cores].tenants.push(i);
        }
        Ok(Engine {
            job,
            rt: TeeRuntime::new(cfg.runtime_config(job.mode)),
            dev,
            tenants,
            cores,
            io_pages,
            ring,
            ghz: cfg.tee_runtime.cpu_ghz,
            slice_ns: cfg.tee_runtime.slice_ns,
            secure,
        })
    }

    fn action(&self, ti: usize) -> Option<Act> {
        let t = &self.tenants[ti];
        match t.stage {
            Stage::Create => Some(Act::Create),
            Stage::Done => None,
            Stage::Run => {
                if t.abort.is_some() || t.fault.is_some() {
                    Some(Act::Finalize)
                } else if t.next_issue < t.requests && t.slots[t.next_issue % self.ring] == Slot::Free {
                    Some(Act::Issue)
                } else if t.next_compute < t.requests && t.slots[t.next_compute % self.ring] == Slot::Ready {
                    Some(Act::Compute)
                } else if t.next_compute == t.requests {
                    Some(Act::Finalize)
                } else {
                    None
                }
            }
        }
    }

    fn pick(&mut self, c: usize, now: Nanos) -> Option<(usize, Act)> {
        let n = self.cores[c].tenants.len();
        let core = &self.cores[c];
        let expired = now - core.slice_start >= self.slice_ns;
        let start = if expired { core.current + 1 } else { core.current };
        for k in 0..n {
            let i = (start + k) % n;
            let ti = self.cores[c].tenants[i];
            if let Some(a) = self.action(ti) {
                let core = &mut self.cores[c];
                if i != core.current || expired {
                    core.current = i;
                    core.slice_start = now;
                }
                return Some((ti, a));
            }
        }
        None
    }

    fn run(mut self) -> Result<Vec<SimReport>, RunError> {
        let mut sim: Simulator<Ev> = Simulator::new();
        for c in 0..self.cores.len() {
            if !self.cores[c].tenants.is_empty() {
                self.cores[c].next_wake = Some(0);
                sim.schedule_at(0, Ev::Wake(c));
            }
        }
        while let Some(ev) = sim.next_event()? {
            let now = ev.fire_at;
            match ev.kind {
                Ev::Wake(c) => {
                    if self.cores[c].next_wake != Some(now) {
                        continue;
                    }
                    self.cores[c].next_wake = None;
                    let Some((ti, act)) = self.pick(c, now) else { continue };
                    let parts = match act {
                        Act::Create => self.create(ti, now)?,
                        Act::Issue => self.issue(ti, now, &mut sim)?,
                        Act::Compute => self.compute(ti, now)?,
                        Act::Finalize => self.finalize(ti, now)?,
                    };
                    let t = &mut self.tenants[ti];
                    t.bd.load_ns += now - t.last;
                    t.bd.compute_ns += parts.compute;
                    t.bd.encryption_ns += parts.encryption;
                    t.bd.verification_ns += parts.verification;
                    t.bd.other_ns += parts.other;
                    t.last = now + parts.total();
                    self.cores[c].next_wake = Some(t.last);
                    sim.schedule_at(t.last, Ev::Wake(c));
                }
                Ev::Arrival { tenant, req, data } => {
                    self.arrive(tenant, req, &data, now);
                    let c = tenant % self.cores.len();
                    if self.cores[c].next_wake.is_none() {
                        self.cores[c].next_wake = Some(now);
                        sim.schedule_at(now, Ev::Wake(c));
                    }
                }
            }
        }
        if let Some(t) = self.tenants.iter().find(|t| t.stage != Stage::Done) {
            return Err(RunError::Unsupported(format!("{} stalled before finishing", t.kind)));
        }
        let mut out = Vec::new();
        for (i, t) in self.tenants.iter().enumerate() {
            let rt = self.rt.stats();
            let mut ov = Vec::new();
            let cfg = &self.job.config;
            if self.secure {
                ov.push(Overhead {
                    source: "tee_creation".into(),
                    unit_ns: cfg.tee_runtime.create_ns as f64,
                    count: 1,
                    total_ns: cfg.tee_runtime.create_ns as f64,
                });
                ov.push(Overhead {
                    source: "tee_deletion".into(),
                    unit_ns: cfg.tee_runtime.delete_ns as f64,
                    count: 1,
                    total_ns: cfg.tee_runtime.delete_ns as f64,
                });
                debug_assert!(rt.created >= 1);
            }
            let trips = t.tally.switches / 2;
            if trips > 0 {
                ov.push(Overhead {
                    source: "world_switch".into(),
                    unit_ns: cfg.ftl.switch_ns as f64,
                    count: trips,
                    total_ns: (trips * cfg.ftl.switch_ns) as f64,
                });
            }
            if self.secure && self.dev.cipher.config().enabled {
                let unit = self.dev.cipher.page_charge_ns();
                ov.push(Overhead {
                    source: "page_cipher".into(),
                    unit_ns: unit as f64,
                    count: t.tally.requests,
                    total_ns: (unit * t.tally.requests) as f64,
                });
            }
            out.push(finish_report(
                self.job,
                i,
                t.last,
                t.bd,
                t.answer.clone(),
                t.abort.clone(),
                &t.tally,
                &self.dev,
                ov,
            ));
        }
        Ok(out)
    }

    fn abort(&mut self, ti: usize, f: &Fault, at: Nanos) -> Result<(), RunError> {
        let t = &mut self.tenants[ti];
        if t.abort.is_none() {
            t.abort = Some(self.rt.throw_out_tee(t.eid, fault_reason(f), f.to_string(), at)?);
        }
        Ok(())
    }

    fn create(&mut self, ti: usize, now: Nanos) -> Result<Parts, RunError> {
        let cfg = &self.job.config;
        let t = &mut self.tenants[ti];
        let req = OffloadRequest {
            bin: ProgramImage { name: t.kind.name().into(), code_size: t.kind.code_bytes() },
            lpa: t.grant.clone(),
            args: Vec::new(),
            tid: t.tid,
        };
        let ring_bytes = (self.ring * self.io_pages) as u64 * PAGE_BYTES;
        let (eid, cost) = self.rt.offload_code(&mut self.dev, req, ring_bytes + t.kind.heap_bytes(), now)?;
        let region = self.rt.descriptor(eid).expect("just created").region.clone();
        let win = Window::new(&self.dev, region.clone(), t.kind, ring_bytes);
        self.dev.mem.assign(win.ring_pages.clone(), PagePermission::ReadOnly);
        t.eid = eid;
        if self.secure {
            t.guard = Some(AccessContext::tee(eid, region));
        }
        t.win = Some(win);
        t.stage = Stage::Run;
        if t.attack == Some(Attack::CrossTee) {
            let vbase = t.lpas[ATTACK_REQUEST * self.io_pages];
            let victim = TeeConfig {
                program: ProgramImage { name: "victim".into(), code_size: 4096 },
                grant: (vbase..vbase + self.io_pages as u32).collect(),
                memory_quota: 4096,
            };
            self.rt.create_tee(&mut self.dev, victim, now)?;
        }
        let _ = cfg;
        Ok(Parts { other: cost, ..Default::default() })
    }

    fn issue(&mut self, ti: usize, now: Nanos, sim: &mut Simulator<Ev>) -> Result<Parts, RunError> {
        let io = self.io_pages;
        let t = &mut self.tenants[ti];
        let r = t.next_issue;
        let lpas = &t.lpas[r * io..((r + 1) * io).min(t.lpas.len())];
        let b = match self.dev.ftl.translate_batch(t.eid, lpas, now) {
            Ok(b) => b,
            Err(e @ FtlError::PermissionDenied { .. }) => {
                t.abort = Some(self.rt.throw_out_tee(t.eid, AbortReason::AccessViolation, e.to_string(), now)?);
                return Ok(Parts::default());
            }
            Err(e) => return Err(e.into()),
        };
        t.tally.translations += lpas.len() as u64;
        t.tally.misses += b.misses;
        t.tally.switches += b.world_switches;
        let at = now + b.cost;
        let mut data = Vec::with_capacity(lpas.len() * PAGE_BYTES as usize);
        let mut done = at;
        let cipher = self.secure && self.dev.cipher.config().enabled;
        for ppa in &b.ppas {
            let rd = self.dev.ftl.flash_mut().read_page(*ppa, at)?;
            done = done.max(rd.completion);
            if cipher {
                // the page crosses the flash bus encrypted and is decrypted before DMA
                let e = self.dev.cipher.encrypt_page(ppa.0, &rd.data)?;
                data.extend(self.dev.cipher.decrypt_page(e.iv, &e.ciphertext)?);
            } else {
                data.extend(rd.data);
            }
        }
        if cipher {
            done += self.dev.cipher.page_charge_ns();
        }
        t.slots[r % self.ring] = Slot::Pending;
        t.next_issue += 1;
        t.tally.requests += 1;
        t.tally.pages += b.ppas.len() as u64;
        sim.schedule_at(done, Ev::Arrival { tenant: ti, req: r, data });
        Ok(Parts { other: b.cost, ..Default::default() })
    }

    fn arrive(&mut self, ti: usize, req: usize, data: &[u8], _now: Nanos) {
        let ring = self.ring;
        let io = self.io_pages as u64;
        let t = &mut self.tenants[ti];
        if t.stage != Stage::Run || t.abort.is_some() || t.fault.is_some() {
            return;
        }
        let slot = req % ring;
        let win = t.win.as_ref().expect("running tenant has a window");
        let off = win.ring_off + slot as u64 * io * PAGE_BYTES;
        self.dev.l2.invalidate_range(off, off + io * PAGE_BYTES);
        match self.dev.mem.ingest(off, data) {
            Ok(c) => t.ingest[slot] = c,
            Err(e) => t.fault = Some(mem_fault(e)),
        }
        t.slots[slot] = Slot::Ready;
        if let (Some(a), Some(sm)) = (t.attack, self.dev.mem.secure_mut()) {
            let page = off / PAGE_BYTES;
            let pages = page..page + data.len() as u64 / PAGE_BYTES;
            let (kind, block) = if sm.config().scheme == CounterScheme::Hybrid
                && sm.permission(page) == PagePermission::ReadOnly
            {
                (TreeKind::Major, (page / 8) as usize)
            } else {
                (TreeKind::Split, page as usize)
            };
            if req == ATTACK_REQUEST {
                match a {
                    Attack::FlipData => sm.flip_data_bit(off + 5 * 64, 3),
                    Attack::FlipMac => sm.flip_mac_bit(off + 5 * 64, 11),
                    Attack::SwapLines => sm.swap_lines(off, off + 64),
                    Attack::FlipCounter => {
                        sm.flip_counter_bit(kind, block, 9);
                        sm.flush_counter_cache();
                    }
                    Attack::FlipTree => {
                        let shape = sm.tree_shape(kind);
                        let hit = sm.flip_tree_bit(kind, 0, block / crate::secmem::ARITY, 5);
                        debug_assert!(hit || shape.is_empty());
                        sm.flush_counter_cache();
                    }
                    Attack::Replay => t.snapshot = Some(sm.snapshot(pages)),
                    _ => {}
                }
            } else if req == ATTACK_REQUEST + ring && a == Attack::Replay {
                if let Some(s) = t.snapshot.take() {
                    sm.restore(&s);
                    sm.flush_counter_cache();
                }
            }
        }
    }

    fn compute(&mut self, ti: usize, now: Nanos) -> Result<Parts, RunError> {
        let io = self.io_pages as u64;
        let t = &mut self.tenants[ti];
        let r = t.next_compute;
        let slot = r % self.ring;
        let win = t.win.as_ref().unwrap();
        let off = win.ring_off + slot as u64 * io * PAGE_BYTES;
        let pages = (t.lpas.len() as u64 - r as u64 * io).min(io);
        let ingest = std::mem::take(&mut t.ingest[slot]);
        let mut m = DevMachine {
            dev: &mut self.dev,
            guard: t.guard.as_ref(),
            heap_off: win.heap_off,
            heap_addr: win.heap_addr,
            heap_limit: t.kind.heap_bytes(),
            c: Charge::default(),
            foreign: Vec::new(),
        };
        let mut res = scan(&mut m, &mut *t.program, off, pages);
        if res.is_ok() && t.attack == Some(Attack::WindowEscape) && r == ATTACK_REQUEST {
            // the program reads just past the end of its window
            res = m.load(win.region.end - win.heap_addr);
        }
        let mut charge = m.c;
        let foreign = std::mem::take(&mut m.foreign);
        charge.add(&std::mem::take(&mut t.debt));
        t.tally.charge.add(&charge);
        t.tally.ingest.add(ingest);
        let mut all = charge;
        all.mem.add(ingest);
        self.settle(foreign);
        let t = &mut self.tenants[ti];
        let parts = Parts::of(&all, self.ghz);
        t.slots[slot] = Slot::Free;
        t.next_compute += 1;
        if let Err(f) = res {
            self.abort(ti, &f, now + parts.total())?;
        }
        Ok(parts)
    }

    /// Hands forced write-backs to the TEEs whose heaps own the lines.
    fn settle(&mut self, foreign: Vec<(u64, OpCost)>) {
        for (addr, cost) in foreign {
            let owner = self.tenants.iter_mut().find(|o| {
                o.win.as_ref().is_some_and(|w| (w.heap_off..w.heap_off + o.kind.heap_bytes()).contains(&addr))
            });
            if let Some(o) = owner {
                o.debt.l2_writebacks += 1;
                o.debt.mem.add(cost);
            }
        }
    }

    fn finalize(&mut self, ti: usize, now: Nanos) -> Result<Parts, RunError> {
        let t = &mut self.tenants[ti];
        let mut parts = Parts::default();
        if let Some(f) = t.fault.take() {
            self.abort(ti, &f, now)?;
        } else if t.abort.is_none() {
            let win = t.win.as_ref().unwrap();
            let mut m = DevMachine {
                dev: &mut self.dev,
                guard: t.guard.as_ref(),
                heap_off: win.heap_off,
                heap_addr: win.heap_addr,
                heap_limit: t.kind.heap_bytes(),
                c: Charge::default(),
                foreign: Vec::new(),
            };
            let res = t.program.finish(&mut m);
            let mut charge = m.c;
            let foreign = std::mem::take(&mut m.foreign);
            charge.add(&std::mem::take(&mut t.debt));
            self.settle(foreign);
            let t = &mut self.tenants[ti];
            t.tally.charge.add(&charge);
            parts = Parts::of(&charge, self.ghz);
            match res {
                Ok(a) => {
                    self.rt.complete(t.eid, a.to_bytes())?;
                    t.answer = Some(a);
                }
                Err(f) => self.abort(ti, &f, now + parts.total())?,
            }
        }
        let t = &mut self.tenants[ti];
        let (_, del) = self.rt.terminate_tee(&mut self.dev, t.eid, now + parts.total())?;
        parts.other += del;
        if t.abort.is_none() {
            let (bytes, cost) = self.rt.get_result(&self.dev, t.tid)?;
            debug_assert_eq!(Answer::from_bytes(&bytes).as_ref(), t.answer.as_ref());
            parts.other += cost;
        }
        t.stage = Stage::Done;
        Ok(parts)
    }
}

// ---------------------------------------------------------------------------------------------
// host execution

fn run_host(job: &Job, data: &Datasets) -> Result<SimReport, RunError> {
    let cfg = &job.config;
    if job.tenants.len() != 1 || job.attack.is_some() {
        return Err(RunError::Unsupported("host modes run exactly one workload and no attacks".into()));
    }
    let kind = job.tenants[0];
    let host = &cfg.workloads.host;
    let mult = if job.mode == Mode::HostSgx { host.sgx_multiplier } else { 1.0 };
    let mut dev = Device::new(&cfg.device_config(job.mode), false, mem_key(cfg.run.seed))?;
    let d = dataset_for(cfg, kind, None, data);
    load_dataset(&mut dev, &d, 0)?;
    dev.ftl.flush_cache();
    dev.ftl.reset_stats();
    dev.ftl.flash_mut().reset_timing();

    let io = host.request_pages as usize;
    let qd = host.queue_depth as usize;
    let ring = qd;
    let ring_bytes = (ring * io) as u64 * PAGE_BYTES;
    let win = Window::new(&dev, dev.layout.slot(0), kind, ring_bytes);
    let xfer = transfer_ns(PAGE_BYTES, dev.ftl.flash().timings().external_bw);
    let lpas: Vec<u32> = (0..d.pages()).collect();
    let requests = lpas.len().div_ceil(io);
    let mut program = kind.program(&cfg.workloads.costs);
    let host_ns = |c: &Charge| -> Nanos {
        let ns = c.cycles as f64 / BASE_CORE_GHZ + c.stall_ns as f64;
        (ns / host.compute_speedup * mult).round() as Nanos
    };

    let mut tally = Tally { charge: Charge::default(), ingest: OpCost::default(), requests: 0, pages: 0, translations: 0, misses: 0, switches: 0 };
    let mut link_end = vec![0; requests];
    let (mut link_free, mut cpu_free, mut compute) = (0, 0, 0);
    for k in 0..requests {
        let issue = if k >= qd { link_end[k - qd] } else { 0 };
        let batch = &lpas[k * io..((k + 1) * io).min(lpas.len())];
        let b = dev.ftl.translate_batch(UNOWNED, batch, issue)?;
        tally.translations += batch.len() as u64;
        tally.misses += b.misses;
        tally.switches += b.world_switches;
        let mut buf = Vec::with_capacity(batch.len() * PAGE_BYTES as usize);
        for ppa in &b.ppas {
            let rd = dev.ftl.flash_mut().read_page(*ppa, issue + b.cost)?;
            link_free = link_free.max(rd.completion) + xfer;
            buf.extend(rd.data);
        }
        link_end[k] = link_free;
        tally.requests += 1;
        tally.pages += batch.len() as u64;
        let off = win.ring_off + (k % ring) as u64 * io as u64 * PAGE_BYTES;
        dev.l2.invalidate_range(off, off + io as u64 * PAGE_BYTES);
        dev.mem.ingest(off, &buf)?;
        let mut m = DevMachine {
            dev: &mut dev,
            guard: None,
            heap_off: win.heap_off,
            heap_addr: win.heap_addr,
            heap_limit: kind.heap_bytes(),
            c: Charge::default(),
            foreign: Vec::new(),
        };
        scan(&mut m, &mut *program, off, batch.len() as u64).map_err(|f| RunError::Unsupported(format!("host run faulted: {f}")))?;
        let c = host_ns(&m.c);
        tally.charge.add(&m.c);
        cpu_free = cpu_free.max(link_end[k]) + host.io_overhead_ns + c;
        compute += c;
    }
    let mut m = DevMachine {
        dev: &mut dev,
        guard: None,
        heap_off: win.heap_off,
        heap_addr: win.heap_addr,
        heap_limit: kind.heap_bytes(),
        c: Charge::default(),
        foreign: Vec::new(),
    };
    let answer = program.finish(&mut m).map_err(|f| RunError::Unsupported(format!("host run faulted: {f}")))?;
    let c = host_ns(&m.c);
    tally.charge.add(&m.c);
    compute += c;
    let total = cpu_free + c;
    let bd = Breakdown { load_ns: total - compute, compute_ns: compute, ..Default::default() };
    let ov = vec![Overhead {
        source: "host_io_stack".into(),
        unit_ns: host.io_overhead_ns as f64,
        count: requests as u64,
        total_ns: (host.io_overhead_ns * requests as u64) as f64,
    }];
    Ok(finish_report(job, 0, total, bd, Some(answer), None, &tally, &dev, ov))
}

// ---------------------------------------------------------------------------------------------
// jobs and scenarios

/// Runs one job; returns one report per tenant.
pub fn execute(job: &Job, data: &Datasets) -> Result<Vec<SimReport>, RunError> {
    job.config.validate()?;
    if job.tenants.is_empty() {
        return Err(RunError::Unsupported("a job needs at least one workload".into()));
    }
    // room for the victim range a cross-TEE attack plants past the tenants
    if job.tenants.len() as u64 * job.config.workloads.dataset_pages as u64 + job.config.tee_runtime.io_pages as u64 > job.config.ftl.logical_pages as u64 {
        return Err(RunError::Unsupported("the tenants' datasets do not fit the logical space".into()));
    }
    if job.mode.in_storage() {
        Engine::new(job, data)?.run()
    } else {
        Ok(vec![run_host(job, data)?])
    }
}

/// Runs jobs on up to `parallel` threads. Results come back in job order.
pub fn run_jobs(jobs: &[Job], parallel: usize, data: &Datasets) -> Vec<Result<Vec<SimReport>, RunError>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Vec<SimReport>, RunError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(execute(&jobs[i], data));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every job ran")).collect()
}

/// The configured workload × mode matrix.
pub fn matrix_jobs(cfg: &RunConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for &w in &cfg.run.workloads {
        for &m in &cfg.run.modes {
            out.push(Job::single("default", cfg, w, m));
        }
    }
    out
}

/// One-at-a-time sweep over every non-empty axis, axes in lexicographic order.
pub fn sweep_jobs(cfg: &RunConfig) -> Vec<Job> {
    let mut points: Vec<(String, RunConfig)> = Vec::new();
    for &c in &cfg.sweep.channels {
        let mut p = cfg.clone();
        p.flash.geometry.channels = c;
        points.push((format!("channels={c}"), p));
    }
    for &g in &cfg.sweep.cpu_ghz {
        let mut p = cfg.clone();
        p.tee_runtime.cpu_ghz = g;
        points.push((format!("cpu_ghz={g}"), p));
    }
    for &gb in &cfg.sweep.dram_gb {
        let mut p = cfg.clone();
        p.mem_protect.dram_bytes = gb << 30;
        points.push((format!("dram_gb={gb}"), p));
    }
    for &t in &cfg.sweep.t_rd_us {
        let mut p = cfg.clone();
        p.flash.timings.t_rd_ns = t * 1000;
        points.push((format!("t_rd_us={t}"), p));
    }
    let mut out = Vec::new();
    for (label, p) in points {
        for &w in &cfg.run.workloads {
            for &m in &cfg.run.modes {
                out.push(Job::single(label.clone(), &p, w, m));
            }
        }
    }
    out
}

/// Protected mode under both mapping-table placements.
pub fn placement_jobs(cfg: &RunConfig) -> Vec<Job> {
    use crate::ftl::MappingPlacement;
    let mut out = Vec::new();
    for (name, pl) in [("secure_world", MappingPlacement::SecureWorld), ("protected_region", MappingPlacement::ProtectedRegion)] {
        let mut p = cfg.clone();
        p.ftl.placement = pl;
        for &w in &cfg.run.workloads {
            out.push(Job::single(format!("placement={name}"), &p, w, Mode::SecureIsc));
        }
    }
    out
}

/// Protected mode under the hybrid and split-only counter schemes.
pub fn counter_jobs(cfg: &RunConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for (name, s) in [("hybrid", CounterScheme::Hybrid), ("split_only", CounterScheme::SplitOnly)] {
        let mut p = cfg.clone();
        p.secure_memory.scheme = s;
        for &w in &cfg.run.workloads {
            out.push(Job::single(format!("counters={name}"), &p, w, Mode::SecureIsc));
        }
    }
    out
}

/// Co-runners for `w`: the first three of a fixed mix of heavier kernels, skipping `w`.
pub fn companions(w: WorkloadKind) -> Vec<WorkloadKind> {
    use WorkloadKind::*;
    [TpcC, TpcB, Wordcount, TpchQ19].into_iter().filter(|&k| k != w).take(3).collect()
}

/// Each workload alone and next to three co-runners, one TEE per core.
pub fn colocation_jobs(cfg: &RunConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for &w in &cfg.run.workloads {
        out.push(Job::single("solo", cfg, w, Mode::SecureIsc));
        let mut tenants = vec![w];
        tenants.extend(companions(w));
        out.push(Job { label: "colocated".into(), config: cfg.clone(), mode: Mode::SecureIsc, tenants, attack: None });
    }
    out
}

pub fn attack_job(cfg: &RunConfig, kind: WorkloadKind, attack: Attack) -> Job {
    Job {
        label: format!("attack={attack}"),
        config: cfg.clone(),
        mode: Mode::SecureIsc,
        tenants: vec![kind],
        attack: Some(attack),
    }
}
