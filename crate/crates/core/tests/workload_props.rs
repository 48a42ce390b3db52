use proptest::prelude::*;
use ssdtee::config::{Mode, RunConfig};
use ssdtee::experiment::{execute, Datasets, Job};
use ssdtee::report::SimReport;
use ssdtee::workloads::{Answer, DataKind, Dataset, Row, WorkloadKind, FILTER_THRESHOLD};

fn small(pages: u32, seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.workloads.dataset_pages = pages;
    c.run.seed = seed;
    c
}

fn one(cfg: &RunConfig, w: WorkloadKind, m: Mode, data: &Datasets) -> SimReport {
    execute(&Job::single("t", cfg, w, m), data).unwrap().remove(0)
}

#[test]
fn answers_agree_across_modes_for_every_workload() {
    for seed in [1, 99] {
        let cfg = small(384, seed);
        let data = Datasets::new();
        for w in WorkloadKind::ALL {
            let reps: Vec<SimReport> = Mode::ALL.iter().map(|&m| one(&cfg, w, m, &data)).collect();
            assert!(reps[0].answer.is_some(), "{w}");
            for r in &reps {
                assert_eq!(r.answer, reps[0].answer, "{w} seed {seed} {}", r.mode);
                assert_eq!(r.breakdown.total(), r.total_ns, "{w} {}", r.mode);
            }
        }
    }
}

#[test]
fn write_ratios_follow_read_intensity() {
    let cfg = small(512, 3);
    let data = Datasets::new();
    let wr = |w| one(&cfg, w, Mode::Isc, &data).counters.write_ratio;
    let tpch = WorkloadKind::TPCH.map(wr);
    let (b, c) = (wr(WorkloadKind::TpcB), wr(WorkloadKind::TpcC));
    let words = wr(WorkloadKind::Wordcount);
    let max_tpch = tpch.iter().cloned().fold(0.0, f64::max);
    assert!(max_tpch < b.min(c), "{tpch:?} vs {b} {c}");
    assert!(b.max(c) < words, "{b} {c} vs {words}");
}

#[test]
fn slower_core_never_computes_faster() {
    let data = Datasets::new();
    for w in [WorkloadKind::Filter, WorkloadKind::TpchQ3, WorkloadKind::TpcB] {
        let mut last = 0;
        for ghz in [2.4, 1.6, 1.2, 0.8] {
            let mut cfg = small(256, 5);
            cfg.tee_runtime.cpu_ghz = ghz;
            let r = one(&cfg, w, Mode::SecureIsc, &data);
            assert!(r.breakdown.compute_ns >= last, "{w} at {ghz}GHz");
            last = r.breakdown.compute_ns;
        }
    }
}

#[test]
fn filter_matches_direct_scan() {
    let cfg = small(300, 17);
    let r = one(&cfg, WorkloadKind::Filter, Mode::SecureIsc, &Datasets::new());
    let d = Dataset::generate(DataKind::Lineitem, 300, 17);
    let (mut count, mut digest, mut first) = (0u64, 0xcbf2_9ce4_8422_2325u64, Vec::new());
    for i in 0..d.rows() {
        let row = Row::decode(d.row_bytes(i));
        if row.a < FILTER_THRESHOLD {
            count += 1;
            for b in row.rowid.to_le_bytes() {
                digest = (digest ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            if first.len() < 64 {
                first.push(row.rowid);
            }
        }
    }
    assert!(count > 0);
    assert_eq!(r.answer, Some(Answer::RowIds { count, digest, first }));
}

#[test]
fn config_echo_reruns_identically() {
    let cfg = small(256, 23);
    let data = Datasets::new();
    let a = one(&cfg, WorkloadKind::TpchQ12, Mode::SecureIsc, &data);
    let b = one(&a.config, a.workload, a.mode, &Datasets::new());
    assert_eq!(a.to_line(), b.to_line());
}

#[test]
fn colocated_reports_account_all_time() {
    let cfg = small(384, 8);
    let job = Job {
        label: "colocated".into(),
        config: cfg,
        mode: Mode::SecureIsc,
        tenants: vec![WorkloadKind::Filter, WorkloadKind::TpcB, WorkloadKind::Aggregate, WorkloadKind::TpchQ1, WorkloadKind::Wordcount],
        attack: None,
    };
    let reps = execute(&job, &Datasets::new()).unwrap();
    assert_eq!(reps.len(), 5);
    for r in reps {
        assert_eq!(r.breakdown.total(), r.total_ns, "{}", r.workload);
        assert!(r.answer.is_some() && r.abort.is_none());
        assert_eq!(r.tenants, 5);
    }
}

#[test]
fn read_heavy_traffic_overhead_is_single_digit_percent() {
    let cfg = small(512, 4);
    let r = one(&cfg, WorkloadKind::Arithmetic, Mode::SecureIsc, &Datasets::new());
    assert!(r.counters.encryption_traffic_pct > 0.0 && r.counters.encryption_traffic_pct < 10.0, "{:?}", r.counters);
    assert!(r.counters.verification_traffic_pct < 10.0, "{:?}", r.counters);
}

#[test]
fn wordcount_has_the_most_extra_traffic() {
    let cfg = small(512, 6);
    let data = Datasets::new();
    let pct = |w| one(&cfg, w, Mode::SecureIsc, &data).counters.encryption_traffic_pct;
    let words = pct(WorkloadKind::Wordcount);
    for w in WorkloadKind::ALL.into_iter().filter(|&w| w != WorkloadKind::Wordcount) {
        let p = pct(w);
        assert!(p < words, "{w} {p} vs wordcount {words}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_file_roundtrip(pages in 1u32..24, seed in any::<u64>(), text in any::<bool>()) {
        let kind = if text { DataKind::Text } else { DataKind::Lineitem };
        let d = Dataset::generate(kind, pages, seed);
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&buf[..]).unwrap();
        prop_assert_eq!(back.checksum(), d.checksum());
        prop_assert_eq!(back.payload(), d.payload());
    }

    #[test]
    fn same_seed_same_dataset(pages in 1u32..16, seed in any::<u64>()) {
        let a = Dataset::generate(DataKind::Lineitem, pages, seed);
        let b = Dataset::generate(DataKind::Lineitem, pages, seed);
        prop_assert_eq!(a.payload(), b.payload());
    }
}
