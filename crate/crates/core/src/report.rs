//! Run reports: one JSON object per line, schema-versioned, each carrying the full config echo.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Mode, RunConfig};
use crate::sim::Nanos;
use crate::tee::AbortRecord;
use crate::workloads::{Answer, WorkloadKind};

pub const SCHEMA_VERSION: u32 = 1;

/// Where a TEE's wall-clock time went. The five parts sum exactly to the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    /// Waiting for flash data (or, for the host, the I/O stack).
    pub load_ns: Nanos,
    pub compute_ns: Nanos,
    pub encryption_ns: Nanos,
    pub verification_ns: Nanos,
    /// Translation, world switches, TEE creation/deletion, result return.
    pub other_ns: Nanos,
}

impl Breakdown {
    pub fn total(&self) -> Nanos {
        self.load_ns + self.compute_ns + self.encryption_ns + self.verification_ns + self.other_ns
    }
}

/// One charged overhead source: its unit cost, how often it was charged and the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub source: String,
    pub unit_ns: f64,
    pub count: u64,
    pub total_ns: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub requests: u64,
    pub pages_read: u64,
    pub translations: u64,
    pub mapping_misses: u64,
    pub mapping_miss_ratio: f64,
    /// World switches taken for address translation.
    pub world_switches: u64,
    pub program_loads: u64,
    pub program_stores: u64,
    /// Stores over all line accesses made by the program (input lines included).
    pub write_ratio: f64,
    pub l2_accesses: u64,
    pub l2_misses: u64,
    pub l2_writebacks: u64,
    pub counter_misses: u64,
    pub verifications: u64,
    pub line_encryptions: u64,
    pub reencryptions: u64,
    pub minor_overflows: u64,
    /// Counter traffic over data traffic, percent.
    pub encryption_traffic_pct: f64,
    /// Tree traffic over data traffic, percent.
    pub verification_traffic_pct: f64,
    pub cipher_pages: u64,
    pub cipher_energy_nj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema: u32,
    /// Scenario tag, e.g. `default` or `channels=16`.
    pub label: String,
    pub workload: WorkloadKind,
    pub mode: Mode,
    pub seed: u64,
    /// Number of TEEs sharing the device in this run.
    pub tenants: u32,
    pub total_ns: Nanos,
    pub breakdown: Breakdown,
    pub answer: Option<Answer>,
    pub abort: Option<AbortRecord>,
    pub counters: Counters,
    pub overheads: Vec<Overhead>,
    pub config: RunConfig,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl SimReport {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("reports always serialize")
    }

    pub fn overhead(&self, source: &str) -> Option<&Overhead> {
        self.overheads.iter().find(|o| o.source == source)
    }
}

pub fn write_reports<W: Write>(mut w: W, reports: &[SimReport]) -> io::Result<()> {
    for r in reports {
        writeln!(w, "{}", r.to_line())?;
    }
    Ok(())
}

pub fn read_reports<R: BufRead>(r: R) -> Result<Vec<SimReport>, ReportError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| ReportError::Parse { line: i + 1, message: e.to_string() })?;
        let schema = v.get("schema").and_then(|s| s.as_u64());
        if schema != Some(SCHEMA_VERSION as u64) {
            return Err(ReportError::SchemaMismatch(format!(
                "line {} has schema {schema:?}, expected {SCHEMA_VERSION}",
                i + 1
            )));
        }
        out.push(serde_json::from_value(v).map_err(|e| ReportError::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// One row of the summary: a run normalised to the baseline run of the same scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub workload: WorkloadKind,
    pub mode: Mode,
    pub total_ns: Nanos,
    pub speedup: f64,
    /// Breakdown parts as fractions of the baseline's total.
    pub load: f64,
    pub compute: f64,
    pub encryption: f64,
    pub verification: f64,
    pub other: f64,
}

/// Normalises every report against the `baseline` report with the same label and workload.
pub fn summarize(reports: &[SimReport], baseline: Mode) -> Result<Vec<SummaryRow>, ReportError> {
    let mut base: BTreeMap<(&str, WorkloadKind), &SimReport> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.mode == baseline && r.abort.is_none()) {
        base.insert((r.label.as_str(), r.workload), r);
    }
    let mut rows = Vec::new();
    for r in reports {
        let Some(b) = base.get(&(r.label.as_str(), r.workload)) else { continue };
        let d = b.total_ns.max(1) as f64;
        let bd = r.breakdown;
        rows.push(SummaryRow {
            label: r.label.clone(),
            workload: r.workload,
            mode: r.mode,
            total_ns: r.total_ns,
            speedup: b.total_ns as f64 / r.total_ns.max(1) as f64,
            load: bd.load_ns as f64 / d,
            compute: bd.compute_ns as f64 / d,
            encryption: bd.encryption_ns as f64 / d,
            verification: bd.verification_ns as f64 / d,
            other: bd.other_ns as f64 / d,
        });
    }
    if rows.is_empty() {
        return Err(ReportError::SchemaMismatch(format!(
            "no (label, workload) pair has a `{baseline}` baseline among the given reports"
        )));
    }
    Ok(rows)
}

/// Whitespace-separated columns, one row per run; loads directly into most plotting tools.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut s = String::from("label workload mode total_ms speedup load compute encryption verification other\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{} {} {} {:.3} {:.3} {:.4} {:.4} {:.4} {:.4} {:.4}",
            r.label,
            r.workload,
            r.mode,
            r.total_ns as f64 / 1e6,
            r.speedup,
            r.load,
            r.compute,
            r.encryption,
            r.verification,
            r.other
        );
    }
    s
}

pub fn geomean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x.ln(), n + 1));
    if n == 0 {
        f64::NAN
    } else {
        (sum / n as f64).exp()
    }
}
