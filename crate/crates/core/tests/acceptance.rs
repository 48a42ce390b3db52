//! Acceptance suite: one PASS/FAIL line per criterion, then a non-zero exit if any failed.
//!
//! Functional criteria are checked against independent models (bit-serial cipher, key-value
//! shadows). Trend criteria run the full-size default configuration (64MB per workload).

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use ssdtee::cipher::{keystream, CipherConfig, CipherEngine};
use ssdtee::config::{Mode, RunConfig};
use ssdtee::device::{Device, DeviceConfig, DramConfig};
use ssdtee::experiment::{colocation_jobs, counter_jobs, execute, matrix_jobs, placement_jobs, sweep_jobs, Datasets, Job};
use ssdtee::flash::{FlashArray, FlashGeometry, FlashTimings};
use ssdtee::ftl::{Ftl, FtlConfig, FtlError};
use ssdtee::report::{geomean, SimReport};
use ssdtee::secmem::{PagePermission, SecMemConfig, SecureMemory, TreeKind, PAGE_BYTES};
use ssdtee::sim::SeededRng;
use ssdtee::tee::{AbortReason, OffloadRequest, ProgramImage, TeeError, TeeRuntime};
use ssdtee::workloads::WorkloadKind;

mod common;
use common::Serial;

// pinned thresholds
const TRIVIUM_PAIRS: usize = 12;
const TRIVIUM_BITS: usize = 4096;
const ROUNDTRIP_OPS: usize = 10_000;
const TAMPER_TRIALS: usize = 200;
const FTL_WRITES: usize = 100_000;
const MAX_OVERHEAD: f64 = 0.15;
const MIN_GEOMEAN_SPEEDUP: f64 = 1.5;
const MAX_COLOCATED_SLOWDOWN: f64 = 0.35;
const MAX_MISS_INCREASE_PTS: f64 = 10.0;
const MIN_SWITCH_DROP: f64 = 0.90;
const CHANNELS: [u32; 4] = [4, 8, 16, 32];
const T_RD_US: [u64; 6] = [10, 30, 50, 70, 90, 110];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------------------------
// functional criteria

fn c1_trivium() -> Outcome {
    let mut rng = SeededRng::new(0x7121);
    let mut mismatched_bits = 0u32;
    for _ in 0..TRIVIUM_PAIRS {
        let (mut key, mut iv) = ([0u8; 10], [0u8; 10]);
        rng.fill_bytes(&mut key);
        rng.fill_bytes(&mut iv);
        let fast = keystream(&key, &iv, TRIVIUM_BITS);
        let slow = Serial::new(&key, &iv).bytes(TRIVIUM_BITS / 8);
        mismatched_bits += fast.iter().zip(&slow).map(|(a, b)| (a ^ b).count_ones()).sum::<u32>();
        mismatched_bits += (fast.len() as i64 - slow.len() as i64).unsigned_abs() as u32 * 8;
    }
    outcome(mismatched_bits == 0, format!("{TRIVIUM_PAIRS} pairs x {TRIVIUM_BITS} bits, {mismatched_bits} mismatched bits"))
}

fn c2_roundtrip() -> Outcome {
    let mut rng = SeededRng::new(0xC2);
    let mut engine = CipherEngine::new(CipherConfig::default(), PAGE_BYTES as usize);
    let mut page_bad = 0;
    let mut page = vec![0u8; PAGE_BYTES as usize];
    for _ in 0..ROUNDTRIP_OPS {
        rng.fill_bytes(&mut page);
        let ppa = rng.next_u32();
        let enc = engine.encrypt_page(ppa, &page).unwrap();
        if enc.ciphertext == page || engine.decrypt_page(enc.iv, &enc.ciphertext).unwrap() != page {
            page_bad += 1;
        }
    }

    let pages = 64;
    let mut mem = SecureMemory::new(SecMemConfig { counter_cache_bytes: 4096, ..Default::default() }, pages * PAGE_BYTES, [3; 16]);
    let mut shadow: HashMap<u64, [u8; 64]> = HashMap::new();
    let mut mem_bad = 0;
    for _ in 0..ROUNDTRIP_OPS {
        let addr = rng.below(pages * 64) * 64;
        if rng.chance(1, 2) {
            let mut line = [0u8; 64];
            rng.fill_bytes(&mut line);
            mem.mem_write(addr, &line).unwrap();
            shadow.insert(addr, line);
        } else {
            let want = shadow.get(&addr).copied().unwrap_or([0; 64]);
            if mem.mem_read(addr).map(|r| r.0) != Ok(want) {
                mem_bad += 1;
            }
        }
    }
    for (&addr, want) in &shadow {
        if mem.mem_read(addr).map(|r| r.0).as_ref() != Ok(want) {
            mem_bad += 1;
        }
    }
    outcome(
        page_bad == 0 && mem_bad == 0,
        format!("{ROUNDTRIP_OPS} page ops: {page_bad} failures; {ROUNDTRIP_OPS} line ops: {mem_bad} failures"),
    )
}

/// A 4-page store: pages 0-1 writable and written line by line, pages 2-3 read-only and filled by
/// DMA. Returns the store and the plaintext it should hold.
fn seeded_store(rng: &mut SeededRng) -> (SecureMemory, HashMap<u64, [u8; 64]>) {
    let mut s = SecureMemory::new(SecMemConfig::default(), 4 * PAGE_BYTES, [9; 16]);
    let mut shadow = HashMap::new();
    s.assign(2..4, PagePermission::ReadOnly);
    let mut dma = vec![0u8; 2 * PAGE_BYTES as usize];
    rng.fill_bytes(&mut dma);
    s.ingest_pages(2, &dma).unwrap();
    for (i, chunk) in dma.chunks(64).enumerate() {
        shadow.insert(2 * PAGE_BYTES + i as u64 * 64, chunk.try_into().unwrap());
    }
    for _ in 0..160 + rng.below(64) {
        let addr = rng.below(2 * 64) * 64;
        let mut line = [0u8; 64];
        rng.fill_bytes(&mut line);
        s.mem_write(addr, &line).unwrap();
        shadow.insert(addr, line);
    }
    (s, shadow)
}

fn pick<T: Copy>(rng: &mut SeededRng, xs: &[T]) -> T {
    xs[rng.below(xs.len() as u64) as usize]
}

fn c3_tamper() -> Outcome {
    let mut rng = SeededRng::new(0xC3);
    let kinds = ["data_bit", "mac_bit", "counter_bit", "tree_bit", "line_swap", "counter_block_swap", "replay"];
    let mut missed: Vec<String> = Vec::new();
    let mut attempted = 0;
    for kind in kinds {
        let mut detected = 0;
        for _ in 0..TAMPER_TRIALS {
            let (mut s, shadow) = seeded_store(&mut rng);
            let mut addrs: Vec<u64> = shadow.keys().copied().collect();
            addrs.sort_unstable();
            let target = pick(&mut rng, &addrs);
            let mut probe = None;
            match kind {
                "data_bit" => {
                    s.flip_data_bit(target, rng.below(512) as u32);
                    probe = Some(target);
                }
                "mac_bit" => {
                    s.flip_mac_bit(target, rng.below(64) as u32);
                    probe = Some(target);
                }
                "counter_bit" => {
                    let tk = if rng.chance(1, 2) { TreeKind::Split } else { TreeKind::Major };
                    let block = rng.below(s.counter_blocks(tk) as u64) as usize;
                    s.flip_counter_bit(tk, block, rng.below(512) as u32);
                }
                "tree_bit" => {
                    let tk = if rng.chance(1, 2) { TreeKind::Split } else { TreeKind::Major };
                    let tk = if s.tree_shape(tk).is_empty() { other(tk) } else { tk };
                    let shape = s.tree_shape(tk);
                    assert!(!shape.is_empty(), "a 4-page store keeps tree nodes in DRAM");
                    let level = rng.below(shape.len() as u64) as usize;
                    let index = rng.below(shape[level] as u64) as usize;
                    assert!(s.flip_tree_bit(tk, level, index, rng.below(64) as u32));
                }
                "line_swap" => {
                    let mut other_addr = pick(&mut rng, &addrs);
                    while other_addr == target {
                        other_addr = pick(&mut rng, &addrs);
                    }
                    s.swap_lines(target, other_addr);
                    probe = Some(target);
                }
                "counter_block_swap" => {
                    // swapping identical blocks would leave DRAM unchanged; block 0 is written and
                    // blocks 2-3 never are, so fall back to one of those
                    let b = 1 + rng.below(3) as u64;
                    let b = if s.split_counter(0) == s.split_counter(b) { 2 } else { b };
                    s.swap_counter_blocks(TreeKind::Split, 0, b as usize);
                }
                "replay" => {
                    let snap = s.snapshot(0..4);
                    let addr = rng.below(2 * 64) * 64;
                    let mut line = [0u8; 64];
                    rng.fill_bytes(&mut line);
                    s.mem_write(addr, &line).unwrap();
                    s.restore(&snap);
                }
                _ => unreachable!(),
            }
            attempted += 1;
            let caught_on_read = probe.is_some_and(|a| s.mem_read(a).is_err_and(|e| e.is_integrity()));
            let caught_on_audit = s.audit_all().is_err_and(|e| e.is_integrity());
            if caught_on_read || caught_on_audit {
                detected += 1;
            }
        }
        if detected != TAMPER_TRIALS {
            missed.push(format!("{kind} {detected}/{TAMPER_TRIALS}"));
        }
    }

    let mut false_positives = 0;
    for _ in 0..TAMPER_TRIALS {
        let (mut s, mut shadow) = seeded_store(&mut rng);
        for _ in 0..64 {
            let addr = rng.below(2 * 64) * 64;
            if rng.chance(1, 3) {
                s.flush_counter_cache();
            }
            if rng.chance(1, 2) {
                let mut line = [0u8; 64];
                rng.fill_bytes(&mut line);
                s.mem_write(addr, &line).unwrap();
                shadow.insert(addr, line);
            } else if s.mem_read(addr).map(|r| r.0) != Ok(shadow.get(&addr).copied().unwrap_or([0; 64])) {
                false_positives += 1;
            }
        }
        match s.audit_all() {
            Ok(seen) if shadow.iter().all(|(a, l)| seen.get(a) == Some(l)) => {}
            _ => false_positives += 1,
        }
    }
    outcome(
        missed.is_empty() && false_positives == 0,
        format!(
            "{attempted} attacks over {} kinds, missed: [{}]; {TAMPER_TRIALS} clean runs, {false_positives} false positives",
            kinds.len(),
            missed.join(", ")
        ),
    )
}

fn other(k: TreeKind) -> TreeKind {
    match k {
        TreeKind::Split => TreeKind::Major,
        TreeKind::Major => TreeKind::Split,
    }
}

fn probe_device() -> Device {
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

fn offload(rt: &mut TeeRuntime, dev: &mut Device, tid: u64, lpas: std::ops::Range<u32>) -> u8 {
    let req = OffloadRequest {
        bin: ProgramImage { name: "filter".into(), code_size: 28 << 10 },
        lpa: lpas.collect(),
        args: vec![],
        tid,
    };
    rt.offload_code(dev, req, 0, 0).unwrap().0
}

fn c4_access_control() -> Outcome {
    let mut dev = probe_device();
    let logical = dev.ftl.config().logical_pages;
    for l in 0..logical {
        dev.ftl.secure_write(l, &vec![l as u8; 4096], 0).unwrap();
    }
    let mut rt = TeeRuntime::default();
    let a = offload(&mut rt, &mut dev, 1, 0..64);
    let b = offload(&mut rt, &mut dev, 2, 64..128);
    let owner = |lpa: u32| match lpa {
        0..=63 => Some(a),
        64..=127 => Some(b),
        _ => None,
    };

    // the attacker owns nothing and sweeps the whole logical space through the FTL check
    let m = offload(&mut rt, &mut dev, 3, 0..0);
    let (mut foreign, mut denied, mut leaked) = (0, 0, 0);
    for lpa in 0..logical {
        let r = dev.ftl.translate(m, lpa, 0);
        if owner(lpa).is_some() {
            foreign += 1;
            if matches!(r, Err(FtlError::PermissionDenied { .. })) {
                denied += 1;
            }
        } else if r.is_ok() {
            leaked += 1;
        }
    }
    let _ = rt.terminate_tee(&mut dev, m, 0).unwrap();

    // every foreign entry, requested through the runtime by a fresh attacker, aborts it
    let mut aborted = 0;
    for (i, lpa) in (0..logical).filter(|&l| owner(l).is_some()).enumerate() {
        let m = offload(&mut rt, &mut dev, 100 + i as u64, 0..0);
        if let Err(TeeError::Aborted(rec)) = rt.read_mapping_entry(&mut dev, m, lpa, 0) {
            if rec.reason == AbortReason::AccessViolation && rec.eid == m {
                aborted += 1;
            }
        }
        let _ = rt.terminate_tee(&mut dev, m, 0).unwrap();
    }

    let mut owner_ok = 0;
    for lpa in 0..128 {
        if rt.read_mapping_entry(&mut dev, owner(lpa).unwrap(), lpa, 0).is_ok() {
            owner_ok += 1;
        }
    }
    outcome(
        denied == foreign && aborted == foreign && leaked == 0 && owner_ok == 128,
        format!(
            "{denied}/{foreign} foreign entries denied, {aborted}/{foreign} probes aborted with ACCESS_VIOLATION, \
             {leaked} unowned entries leaked, {owner_ok}/128 owner lookups ok"
        ),
    )
}

fn c5_ftl_shadow() -> Outcome {
    let geometry = FlashGeometry {
        channels: 2,
        chips_per_channel: 1,
        dies_per_chip: 2,
        planes_per_die: 1,
        blocks_per_plane: 16,
        pages_per_block: 8,
        page_size: 512,
    };
    let flash = FlashArray::new(geometry, FlashTimings::default()).unwrap();
    let logical = 300u32;
    let mut ftl = Ftl::new(flash, FtlConfig { logical_pages: logical, wear_level_threshold: 4, ..Default::default() }).unwrap();
    let mut rng = SeededRng::new(0xC5);
    let mut oracle: HashMap<u32, Vec<u8>> = HashMap::new();
    let mut now = 0;
    let (mut gc_runs, mut migrations) = (0u64, 0u64);
    for i in 0..FTL_WRITES {
        // 80% of writes go to a hot tenth of the space so erase counts drift apart
        let lpa = if rng.chance(4, 5) { rng.below(logical as u64 / 10) } else { rng.below(logical as u64) } as u32;
        let mut page = vec![0u8; 512];
        rng.fill_bytes(&mut page);
        now = ftl.secure_write(lpa, &page, now).unwrap();
        oracle.insert(lpa, page);
        if i % 1000 == 999 {
            gc_runs += (ftl.garbage_collect(now).unwrap().erased_blocks > 0) as u64;
            migrations += ftl.wear_level(now).unwrap();
        }
    }
    let stats = ftl.stats();
    let mut wrong = 0;
    for lpa in 0..logical {
        let ok = match oracle.get(&lpa) {
            Some(want) => ftl.peek(lpa).ok().as_ref() == Some(want) && ftl.valid_copies(lpa) == 1,
            None => matches!(ftl.peek(lpa), Err(FtlError::UnmappedLpa(_))),
        };
        wrong += !ok as u32;
    }
    outcome(
        wrong == 0 && stats.gc_runs > 0 && stats.wl_migrations > 0,
        format!(
            "{FTL_WRITES} writes, {wrong} mismatched LPAs; gc runs {} ({gc_runs} forced), wear-level migrations {} ({migrations} forced)",
            stats.gc_runs, stats.wl_migrations
        ),
    )
}

fn c6_overflow() -> Outcome {
    let mut s = SecureMemory::new(SecMemConfig::default(), 2 * PAGE_BYTES, [5; 16]);
    // the other lines of the page hold data that must survive re-encryption
    for l in 1..64u64 {
        s.mem_write(l * 64, &[l as u8; 64]).unwrap();
    }
    let before = s.stats();
    let major = s.split_counter(0).major;
    for i in 0..128u32 {
        s.mem_write(0, &[i as u8; 64]).unwrap();
    }
    let after = s.stats();
    let majors = after.major_increments - before.major_increments;
    let reenc = after.reencryptions - before.reencryptions;
    let block = s.split_counter(0);
    let minors_reset = block.minors.iter().all(|&m| m == 0);
    let intact = (1..64u64).all(|l| s.mem_read(l * 64).map(|r| r.0) == Ok([l as u8; 64]))
        && s.mem_read(0).map(|r| r.0) == Ok([127; 64]);
    outcome(
        majors == 1 && block.major == major + 1 && minors_reset && reenc == 64 && intact,
        format!("major increments {majors}, minors reset {minors_reset}, re-encrypted lines {reenc}, data intact {intact}"),
    )
}

fn c7_determinism() -> Outcome {
    let cfg = RunConfig::default();
    let jobs = [
        Job::single("default", &cfg, WorkloadKind::Filter, Mode::SecureIsc),
        Job::single("default", &cfg, WorkloadKind::TpcB, Mode::SecureIsc),
        Job::single("default", &cfg, WorkloadKind::TpchQ3, Mode::Host),
    ];
    let run = || -> Vec<u8> {
        let data = Datasets::new();
        let mut out = Vec::new();
        for j in &jobs {
            for r in execute(j, &data).unwrap() {
                out.extend(r.to_line().into_bytes());
                out.push(b'\n');
            }
        }
        out
    };
    let (a, b) = (run(), run());
    outcome(a == b, format!("{} jobs, {} report bytes, identical: {}", jobs.len(), a.len(), a == b))
}

// ---------------------------------------------------------------------------------------------
// trend criteria

/// Runs jobs once per distinct (config, mode, tenants); later jobs with a new label reuse the result.
struct Runner {
    data: Datasets,
    memo: HashMap<String, Vec<SimReport>>,
    runs: usize,
}

impl Runner {
    fn run(&mut self, jobs: &[Job]) -> Vec<Vec<SimReport>> {
        jobs.iter()
            .map(|j| {
                let key = serde_json::to_string(&(&j.config, j.mode, &j.tenants, j.attack)).unwrap();
                let reps = match self.memo.get(&key) {
                    Some(r) => r.clone(),
                    None => {
                        let r = execute(j, &self.data).unwrap_or_else(|e| panic!("{} {:?}: {e}", j.label, j.tenants));
                        self.runs += 1;
                        self.memo.insert(key, r.clone());
                        r
                    }
                };
                reps.into_iter().map(|mut r| {
                    r.label = j.label.clone();
                    r
                }).collect()
            })
            .collect()
    }

    /// First-tenant reports keyed by (label, workload, mode).
    fn table(&mut self, jobs: &[Job]) -> HashMap<(String, WorkloadKind, Mode), SimReport> {
        self.run(jobs).into_iter().map(|mut r| r.remove(0)).map(|r| ((r.label.clone(), r.workload, r.mode), r)).collect()
    }
}

fn get<'a>(t: &'a HashMap<(String, WorkloadKind, Mode), SimReport>, label: &str, w: WorkloadKind, m: Mode) -> &'a SimReport {
    &t[&(label.to_string(), w, m)]
}

fn secs(r: &SimReport) -> f64 {
    r.total_ns as f64
}

fn c8_to_c15(runner: &mut Runner, results: &mut Vec<(usize, &'static str, Outcome)>) {
    let cfg = RunConfig::default();
    let scans = WorkloadKind::READ_INTENSIVE;

    let m = runner.table(&matrix_jobs(&cfg));
    let d = "default";

    // 8
    let per: Vec<(WorkloadKind, f64)> =
        scans.iter().map(|&w| (w, secs(get(&m, d, w, Mode::SecureIsc)) / secs(get(&m, d, w, Mode::Isc)) - 1.0)).collect();
    let avg = per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64;
    let list: Vec<String> = per.iter().map(|(w, o)| format!("{w} {:.1}%", o * 100.0)).collect();
    results.push((8, "protected vs unprotected in-storage overhead", outcome(
        avg <= MAX_OVERHEAD,
        format!("average {:.2}% (limit {:.0}%): {}", avg * 100.0, MAX_OVERHEAD * 100.0, list.join(", ")),
    )));

    // 9
    let speedups: Vec<f64> = scans.iter().map(|&w| secs(get(&m, d, w, Mode::Host)) / secs(get(&m, d, w, Mode::SecureIsc))).collect();
    let g = geomean(speedups.iter().copied());
    let sgx_slower: Vec<WorkloadKind> = WorkloadKind::ALL
        .into_iter()
        .filter(|&w| get(&m, d, w, Mode::HostSgx).total_ns < get(&m, d, w, Mode::Host).total_ns)
        .collect();
    results.push((9, "speedup over host at 8 channels", outcome(
        g >= MIN_GEOMEAN_SPEEDUP && sgx_slower.is_empty(),
        format!(
            "scan geomean {g:.2}x (min {MIN_GEOMEAN_SPEEDUP}x, range {:.2}-{:.2}x); workloads where host_sgx beats host: {sgx_slower:?}",
            speedups.iter().cloned().fold(f64::MAX, f64::min),
            speedups.iter().cloned().fold(0.0, f64::max)
        ),
    )));

    // 10
    let mut sweep_cfg = cfg.clone();
    sweep_cfg.run.modes = vec![Mode::Host, Mode::SecureIsc];
    sweep_cfg.sweep = Default::default();
    sweep_cfg.sweep.channels = CHANNELS.to_vec();
    let ch = runner.table(&sweep_jobs(&sweep_cfg));
    let mut bad = Vec::new();
    let mut range = (f64::MAX, 0.0f64);
    for w in WorkloadKind::ALL {
        let s: Vec<f64> = CHANNELS
            .iter()
            .map(|c| {
                let l = format!("channels={c}");
                secs(get(&ch, &l, w, Mode::Host)) / secs(get(&ch, &l, w, Mode::SecureIsc))
            })
            .collect();
        range = (range.0.min(s[0]), range.1.max(s[s.len() - 1]));
        if s.windows(2).any(|p| p[1] < p[0]) {
            bad.push(format!("{w} {s:.3?}"));
        }
    }
    results.push((10, "channel sweep 4-32 monotone speedup", outcome(
        bad.is_empty(),
        format!("{} workloads x {CHANNELS:?}, speedups span {:.2}-{:.2}x; non-monotone: [{}]", WorkloadKind::ALL.len(), range.0, range.1, bad.join("; ")),
    )));

    // 11
    let pl = runner.table(&placement_jobs(&cfg));
    let mut slower = Vec::new();
    let (mut sw_sec, mut sw_prot, mut gain) = (0u64, 0u64, Vec::new());
    for w in WorkloadKind::ALL {
        let s = get(&pl, "placement=secure_world", w, Mode::SecureIsc);
        let p = get(&pl, "placement=protected_region", w, Mode::SecureIsc);
        sw_sec += s.counters.world_switches;
        sw_prot += p.counters.world_switches;
        gain.push(secs(s) / secs(p) - 1.0);
        if p.total_ns >= s.total_ns {
            slower.push(w);
        }
    }
    let drop = 1.0 - sw_prot as f64 / sw_sec.max(1) as f64;
    results.push((11, "protected-region mapping placement", outcome(
        slower.is_empty() && drop > MIN_SWITCH_DROP,
        format!(
            "average gain {:.1}%, not faster on {slower:?}; world switches {sw_sec} -> {sw_prot} ({:.2}% drop, min {:.0}%)",
            gain.iter().sum::<f64>() / gain.len() as f64 * 100.0,
            drop * 100.0,
            MIN_SWITCH_DROP * 100.0
        ),
    )));

    // 12
    let mut ctr_cfg = cfg.clone();
    ctr_cfg.run.workloads = scans.to_vec();
    let ct = runner.table(&counter_jobs(&ctr_cfg));
    let mut worse = Vec::new();
    let mut deltas = Vec::new();
    for w in scans {
        let h = get(&ct, "counters=hybrid", w, Mode::SecureIsc);
        let s = get(&ct, "counters=split_only", w, Mode::SecureIsc);
        deltas.push(format!("{w} {:.2}%", (secs(s) / secs(h) - 1.0) * 100.0));
        if h.total_ns > s.total_ns {
            worse.push(w);
        }
    }
    results.push((12, "hybrid counters vs split-only", outcome(
        worse.is_empty(),
        format!("split-only slower by: {}; hybrid worse on {worse:?}", deltas.join(", ")),
    )));

    // 13
    let mut lat_cfg = cfg.clone();
    lat_cfg.run.workloads = scans.to_vec();
    lat_cfg.run.modes = vec![Mode::Host, Mode::SecureIsc];
    lat_cfg.sweep = Default::default();
    lat_cfg.sweep.channels = vec![];
    lat_cfg.sweep.t_rd_us = T_RD_US.to_vec();
    let lt = runner.table(&sweep_jobs(&lat_cfg));
    let mut losing = Vec::new();
    let mut span = (f64::MAX, 0.0f64);
    for t in T_RD_US {
        let l = format!("t_rd_us={t}");
        for w in scans {
            let s = secs(get(&lt, &l, w, Mode::Host)) / secs(get(&lt, &l, w, Mode::SecureIsc));
            span = (span.0.min(s), span.1.max(s));
            if s <= 1.0 {
                losing.push(format!("{w}@{t}us"));
            }
        }
    }
    results.push((13, "read-latency sweep 10-110us", outcome(
        losing.is_empty(),
        format!("scan speedups span {:.2}-{:.2}x over {T_RD_US:?}us; not faster at: [{}]", span.0, span.1, losing.join(", ")),
    )));

    // 14
    let co = runner.run(&colocation_jobs(&cfg));
    let mut over = Vec::new();
    let mut slowdowns = Vec::new();
    let mut worst_miss = 0.0f64;
    for pair in co.chunks(2) {
        let (solo, coloc) = (&pair[0][0], &pair[1][0]);
        let slow = secs(coloc) / secs(solo) - 1.0;
        let miss = (coloc.counters.mapping_miss_ratio - solo.counters.mapping_miss_ratio) * 100.0;
        worst_miss = worst_miss.max(miss);
        slowdowns.push(slow);
        if slow > MAX_COLOCATED_SLOWDOWN || miss > MAX_MISS_INCREASE_PTS {
            over.push(format!("{} {:.1}% / +{miss:.2}pts", solo.workload, slow * 100.0));
        }
    }
    let max_slow = slowdowns.iter().cloned().fold(0.0, f64::max);
    results.push((14, "four concurrent TEEs", outcome(
        over.is_empty(),
        format!(
            "slowdown average {:.1}% max {:.1}% (limit {:.0}%), worst miss-ratio increase {worst_miss:.2}pts (limit {MAX_MISS_INCREASE_PTS}); over: [{}]",
            slowdowns.iter().sum::<f64>() / slowdowns.len() as f64 * 100.0,
            max_slow * 100.0,
            MAX_COLOCATED_SLOWDOWN * 100.0,
            over.join(", ")
        ),
    )));

    // 15
    let want = [
        ("tee_creation", 95_000.0, "\"unit_ns\":95000.0"),
        ("tee_deletion", 58_000.0, "\"unit_ns\":58000.0"),
        ("world_switch", 3_800.0, "\"unit_ns\":3800.0"),
        ("memory_encryption", 102.6, "\"unit_ns\":102.6"),
        ("memory_verification", 151.2, "\"unit_ns\":151.2"),
    ];
    let mut problems = Vec::new();
    let mut checked = 0;
    for w in WorkloadKind::ALL {
        let r = get(&m, d, w, Mode::SecureIsc);
        let line = r.to_line();
        for (src, unit, text) in want {
            checked += 1;
            match r.overhead(src) {
                Some(o) if o.unit_ns == unit && o.count > 0 && (o.total_ns - unit * o.count as f64).abs() < 1e-6 * o.total_ns.max(1.0)
                    && line.contains(&format!("\"source\":\"{src}\",{text}")) => {}
                other => problems.push(format!("{w}/{src}: {other:?}")),
            }
        }
        for mode in [Mode::Host, Mode::HostSgx, Mode::Isc] {
            let r = get(&m, d, w, mode);
            for (src, _, _) in want {
                if src != "world_switch" && r.overhead(src).is_some() {
                    problems.push(format!("{w}/{mode}: {src} charged outside protected mode"));
                }
            }
        }
    }
    results.push((15, "overhead constants in reports", outcome(
        problems.is_empty(),
        format!("{checked} (workload, source) lines checked; problems: [{}]", problems.join("; ")),
    )));
}

fn main() {
    let names = [
        "cipher matches bit-serial reference",
        "crypto roundtrips",
        "tamper and replay detection",
        "cross-TEE access control",
        "FTL matches shadow map",
        "counter overflow semantics",
        "deterministic reports",
    ];
    let functional: [fn() -> Outcome; 7] = [c1_trivium, c2_roundtrip, c3_tamper, c4_access_control, c5_ftl_shadow, c6_overflow, c7_determinism];
    let start = Instant::now();
    let mut results: Vec<(usize, &'static str, Outcome)> = Vec::new();
    for (i, (f, name)) in functional.iter().zip(names).enumerate() {
        let o = f();
        print_line(i + 1, name, &o);
        results.push((i + 1, name, o));
    }
    let mut runner = Runner { data: Datasets::new(), memo: HashMap::new(), runs: 0 };
    let mut trend = Vec::new();
    c8_to_c15(&mut runner, &mut trend);
    for (n, name, o) in &trend {
        print_line(*n, name, o);
    }
    results.extend(trend);
    let failed: HashSet<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed ({} simulations, {:.0}s)",
        results.len() - failed.len(),
        results.len(),
        runner.runs,
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        let mut f: Vec<_> = failed.into_iter().collect();
        f.sort_unstable();
        println!("failed criteria: {f:?}");
        std::process::exit(1);
    }
}

fn print_line(n: usize, name: &str, o: &Outcome) {
    println!("criterion {n:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}
