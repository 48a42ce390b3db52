use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ssdtee::config::{ConfigError, Mode, RunConfig};
use ssdtee::experiment::{
    attack_job, colocation_jobs, counter_jobs, matrix_jobs, placement_jobs, run_jobs, sweep_jobs, Attack, Datasets, Job,
};
use ssdtee::report::{read_reports, render_table, summarize, write_reports, ReportError, SimReport};
use ssdtee::workloads::WorkloadKind;

const EXIT_CONFIG: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser)]
#[command(name = "ssdtee", version, about = "Simulate in-storage computing with trusted execution on a computational SSD")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario (by default the workload x mode matrix) and write one report per line.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Scenario::Matrix)]
        scenario: Scenario,
    },
    /// One-at-a-time sweep over the axes in the config's [sweep] section.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Summarise report files as a normalised table.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Mode every run is normalised against.
        #[arg(long, default_value = "host")]
        baseline: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inject an attack into one protected run.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        attack: Attack,
        #[arg(long, default_value = "filter")]
        workload: WorkloadKind,
        /// Exit 0 when the expected abort is recorded (and 1 when the attack goes unnoticed).
        #[arg(long)]
        expect_violation: bool,
    },
    /// Check a config file and print it with all defaults filled in.
    ValidateConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report file (JSON lines); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Baseline for the summary printed to stderr (defaults to the config's).
    #[arg(long)]
    baseline: Option<Mode>,
    /// Worker threads; each simulation is independent.
    #[arg(long, default_value_t = default_parallel())]
    parallel: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Matrix,
    Placement,
    Counters,
    Colocation,
}

fn default_parallel() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

impl Common {
    fn config(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(b) = self.baseline {
            cfg.run.baseline = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(reports: &[SimReport], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            let mut w = BufWriter::new(f);
            write_reports(&mut w, reports)?;
            w.flush()?;
        }
        None => write_reports(io::stdout().lock(), reports)?,
    }
    Ok(())
}

fn execute_all(jobs: &[Job], parallel: usize) -> Result<Vec<SimReport>> {
    let data = Datasets::new();
    let mut out = Vec::new();
    for (job, res) in jobs.iter().zip(run_jobs(jobs, parallel, &data)) {
        out.extend(res.with_context(|| format!("{} {:?} {}", job.label, job.tenants, job.mode))?);
    }
    Ok(out)
}

/// Runs, writes reports and prints a summary; exit 3 if any TEE was aborted.
fn run_and_emit(jobs: Vec<Job>, common: &Common, cfg: &RunConfig) -> Result<ExitCode> {
    let reports = execute_all(&jobs, common.parallel)?;
    emit(&reports, common.out.as_deref())?;
    if let Ok(rows) = summarize(&reports, cfg.run.baseline) {
        eprint!("{}", render_table(&rows));
    }
    let aborted: Vec<&SimReport> = reports.iter().filter(|r| r.abort.is_some()).collect();
    for r in &aborted {
        let a = r.abort.as_ref().unwrap();
        eprintln!("{} {} {}: aborted ({:?}) {}", r.label, r.workload, r.mode, a.reason, a.message);
    }
    Ok(if aborted.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_VIOLATION) })
}

fn real_main(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { common, scenario } => {
            let cfg = common.config()?;
            let jobs = match scenario {
                Scenario::Matrix => matrix_jobs(&cfg),
                Scenario::Placement => placement_jobs(&cfg),
                Scenario::Counters => counter_jobs(&cfg),
                Scenario::Colocation => colocation_jobs(&cfg),
            };
            run_and_emit(jobs, &common, &cfg)
        }
        Cmd::Sweep { common } => {
            let cfg = common.config()?;
            let jobs = sweep_jobs(&cfg);
            if jobs.is_empty() {
                return Err(ConfigError::Invalid { field: "sweep".into(), message: "every axis is empty".into() }.into());
            }
            run_and_emit(jobs, &common, &cfg)
        }
        Cmd::Report { files, baseline, out } => {
            let mut reports = Vec::new();
            for f in &files {
                let r = File::open(f).with_context(|| format!("opening {}", f.display()))?;
                reports.extend(read_reports(BufReader::new(r)).with_context(|| f.display().to_string())?);
            }
            if reports.is_empty() {
                bail!("no reports in {files:?}");
            }
            let table = render_table(&summarize(&reports, baseline)?);
            match out {
                Some(p) => std::fs::write(&p, table).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{table}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Attack { common, attack, workload, expect_violation } => {
            let cfg = common.config()?;
            let reports = execute_all(&[attack_job(&cfg, workload, attack)], 1)?;
            emit(&reports, common.out.as_deref())?;
            let r = &reports[0];
            match &r.abort {
                Some(a) => {
                    eprintln!("{attack} on {workload}: aborted ({:?}) {}", a.reason, a.message);
                    if !expect_violation {
                        Ok(ExitCode::from(EXIT_VIOLATION))
                    } else if a.reason == attack.expected() {
                        Ok(ExitCode::SUCCESS)
                    } else {
                        bail!("expected {:?}, got {:?}", attack.expected(), a.reason)
                    }
                }
                None if expect_violation => bail!("{attack} on {workload} went undetected"),
                None => Ok(ExitCode::SUCCESS),
            }
        }
        Cmd::ValidateConfig { config } => {
            let cfg = load_config(config.as_deref())?;
            print!("{}", cfg.to_toml());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let input_error = e.chain().any(|c| {
                c.is::<ConfigError>() || matches!(c.downcast_ref::<ReportError>(), Some(ReportError::SchemaMismatch(_)))
            });
            ExitCode::from(if input_error { EXIT_CONFIG } else { 1 })
        }
    }
}

