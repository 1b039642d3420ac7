//! Run experiment matrices in parallel and write raw and summary CSV files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::Config;
use crate::error::Result;
use crate::stats::LatencySummary;
use crate::workloads::{run_experiment, ExperimentResult, ExperimentSpec};

pub const RAW_HEADER: [&str; 5] = ["experiment", "transport", "size", "iter", "latency_ns"];
pub const SUMMARY_HEADER: [&str; 9] = [
    "experiment",
    "transport",
    "size",
    "n",
    "p50_ns",
    "p95_ns",
    "p99_ns",
    "p100_ns",
    "throughput_bytes_per_s",
];

/// Results come back in input order regardless of completion order.
pub fn run_matrix(cfg: &Config, specs: &[ExperimentSpec]) -> Result<Vec<ExperimentResult>> {
    specs.par_iter().map(|s| run_experiment(cfg, s)).collect()
}

/// One labelled latency sample, the unit of a CSV row group.
#[derive(Debug, Clone, Copy)]
pub struct Series<'a> {
    pub experiment: &'a str,
    pub transport: &'a str,
    pub size: usize,
    pub latencies: &'a [u64],
    pub summary: LatencySummary,
    pub throughput_bytes_per_s: f64,
}

impl<'a> From<&'a ExperimentResult> for Series<'a> {
    fn from(r: &'a ExperimentResult) -> Self {
        Series {
            experiment: r.spec.workload.name(),
            transport: r.spec.transport.name(),
            size: r.spec.size,
            latencies: &r.latencies,
            summary: r.summary,
            throughput_bytes_per_s: r.throughput_bytes_per_s,
        }
    }
}

pub fn series(results: &[ExperimentResult]) -> Vec<Series<'_>> {
    results.iter().map(Series::from).collect()
}

pub fn write_raw<W: Write>(out: W, rows: &[Series<'_>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RAW_HEADER)?;
    for r in rows {
        let size = r.size.to_string();
        for (i, ns) in r.latencies.iter().enumerate() {
            w.write_record([
                r.experiment,
                r.transport,
                &size,
                &i.to_string(),
                &ns.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(out: W, rows: &[Series<'_>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.experiment,
            r.transport,
            &r.size.to_string(),
            &s.n.to_string(),
            &s.p50.to_string(),
            &s.p95.to_string(),
            &s.p99.to_string(),
            &s.p100.to_string(),
            &format!("{:.3}", r.throughput_bytes_per_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write `{name}_raw.csv` and `{name}_summary.csv` under `dir`.
pub fn write_csv(dir: &Path, name: &str, rows: &[Series<'_>]) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let raw = dir.join(format!("{name}_raw.csv"));
    let summary = dir.join(format!("{name}_summary.csv"));
    write_raw(BufWriter::new(fs::File::create(&raw)?), rows)?;
    write_summary(fs::File::create(&summary)?, rows)?;
    Ok((raw, summary))
}
