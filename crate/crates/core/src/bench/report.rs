//! CSV, summary and gnuplot output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{BenchKind, Sample, FS_PER_SEC};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 6] = ["bench", "workload", "shm", "rate_or_size", "op", "service_ns"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Summary,
    Gnuplot,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "summary" => Ok(ReportFormat::Summary),
            "gnuplot" => Ok(ReportFormat::Gnuplot),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

pub fn write_csv<W: Write>(samples: &[Sample], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for s in samples {
        w.write_record([
            s.bench.to_string(),
            s.workload.clone(),
            s.shm.clone(),
            s.rate_or_size.to_string(),
            s.op.clone(),
            s.service_ns.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads samples back. Columns absent from the CSV (issue time, return
/// code, chunk ops) are left at their defaults.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Config(format!("unexpected CSV header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<u64> {
            rec[i].parse().map_err(|_| Error::Config(format!("bad number {:?} in column {}", &rec[i], CSV_HEADER[i])))
        };
        out.push(Sample {
            bench: rec[0].parse()?,
            workload: rec[1].to_owned(),
            shm: rec[2].to_owned(),
            rate_or_size: num(3)?,
            op: rec[4].to_owned(),
            service_ns: num(5)?,
            issue_fs: 0,
            code: 0,
            chunk_ops: None,
        });
    }
    Ok(out)
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    assert!(!sorted.is_empty());
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Median of unsorted data (mean of the middle pair for even lengths).
pub fn median(values: &[u64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

/// Ops issued every `1/rate` seconds into a single FIFO server with the
/// given service times. Returns (completion time of the last op, mean
/// response time), both in nanoseconds.
pub fn queue_replay(rate: u64, service_ns: &[u64]) -> (f64, f64) {
    let period_ns = FS_PER_SEC as f64 / 1e6 / rate as f64;
    let mut done = 0.0f64;
    let mut response = 0.0f64;
    for (i, &s) in service_ns.iter().enumerate() {
        let issue = i as f64 * period_ns;
        done = done.max(issue) + s as f64;
        response += done - issue;
    }
    (done, response / service_ns.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub bench: BenchKind,
    pub workload: String,
    pub shm: String,
    pub rate_or_size: u64,
    pub count: usize,
    pub median_ns: f64,
    pub p95_ns: u64,
    pub p99_ns: u64,
    pub mean_ns: f64,
    /// Completed ops per second: against the issue schedule for kv cells,
    /// back-to-back for storage cells.
    pub throughput_ops: f64,
    /// ops / Σ service time.
    pub capacity_ops: f64,
    /// Mean queueing plus service time (kv), or mean service time (storage).
    pub mean_response_ns: f64,
    /// Object bytes per second (storage only).
    pub throughput_bytes: Option<f64>,
}

type CellKey = (BenchKind, String, String, u64);

fn cells(samples: &[Sample]) -> BTreeMap<CellKey, Vec<u64>> {
    let mut map: BTreeMap<CellKey, Vec<u64>> = BTreeMap::new();
    for s in samples {
        map.entry((s.bench, s.workload.clone(), s.shm.clone(), s.rate_or_size)).or_default().push(s.service_ns);
    }
    map
}

/// One row per (bench, workload, shm, rate/size) cell, in sample order
/// within the cell.
pub fn summarize(samples: &[Sample]) -> Vec<CellSummary> {
    cells(samples)
        .into_iter()
        .map(|((bench, workload, shm, rate_or_size), times)| {
            let mut sorted = times.clone();
            sorted.sort_unstable();
            let n = times.len();
            let total: f64 = times.iter().map(|&t| t as f64).sum();
            let mean_ns = total / n as f64;
            let capacity_ops = n as f64 * 1e9 / total;
            let (throughput_ops, mean_response_ns, throughput_bytes) = match bench {
                BenchKind::Kv => {
                    let (done, resp) = queue_replay(rate_or_size, &times);
                    (n as f64 * 1e9 / done, resp, None)
                }
                BenchKind::Storage => (capacity_ops, mean_ns, Some(capacity_ops * rate_or_size as f64)),
            };
            CellSummary {
                bench,
                workload,
                shm,
                rate_or_size,
                count: n,
                median_ns: median(&times),
                p95_ns: percentile(&sorted, 0.95),
                p99_ns: percentile(&sorted, 0.99),
                mean_ns,
                throughput_ops,
                capacity_ops,
                mean_response_ns,
                throughput_bytes,
            }
        })
        .collect()
}

/// Median service time per (bench, workload, shm) over all rates/sizes.
pub fn workload_medians(samples: &[Sample]) -> BTreeMap<(BenchKind, String, String), f64> {
    let mut groups: BTreeMap<(BenchKind, String, String), Vec<u64>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.bench, s.workload.clone(), s.shm.clone())).or_default().push(s.service_ns);
    }
    groups.into_iter().map(|(k, v)| (k, median(&v))).collect()
}

fn write_summary(samples: &[Sample], dir: &Path) -> Result<Vec<PathBuf>> {
    let cells_path = dir.join("summary.csv");
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&cells_path)?;
    w.write_record([
        "bench",
        "workload",
        "shm",
        "rate_or_size",
        "count",
        "median_ns",
        "p95_ns",
        "p99_ns",
        "mean_ns",
        "throughput_ops",
        "capacity_ops",
        "mean_response_ns",
        "throughput_bytes",
    ])?;
    for c in summarize(samples) {
        w.write_record([
            c.bench.to_string(),
            c.workload,
            c.shm,
            c.rate_or_size.to_string(),
            c.count.to_string(),
            format!("{:.1}", c.median_ns),
            c.p95_ns.to_string(),
            c.p99_ns.to_string(),
            format!("{:.1}", c.mean_ns),
            format!("{:.3}", c.throughput_ops),
            format!("{:.3}", c.capacity_ops),
            format!("{:.1}", c.mean_response_ns),
            c.throughput_bytes.map(|b| format!("{b:.1}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let wl_path = dir.join("summary_workloads.csv");
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&wl_path)?;
    w.write_record(["bench", "workload", "shm", "median_ns"])?;
    for ((bench, workload, shm), m) in workload_medians(samples) {
        w.write_record([bench.to_string(), workload, shm, format!("{m:.1}")])?;
    }
    w.flush()?;
    Ok(vec![cells_path, wl_path])
}

fn write_gnuplot(samples: &[Sample], dir: &Path) -> Result<Vec<PathBuf>> {
    let summary = summarize(samples);
    let mut files = Vec::new();

    // kv: one data file per shm mode, one gnuplot index block per workload
    let mut kv: BTreeMap<&str, BTreeMap<&str, Vec<&CellSummary>>> = BTreeMap::new();
    for c in summary.iter().filter(|c| c.bench == BenchKind::Kv) {
        kv.entry(&c.shm).or_default().entry(&c.workload).or_default().push(c);
    }
    if !kv.is_empty() {
        let mut script = String::from(
            "set terminal pngcairo size 1200,900\nset output 'kv.png'\n\
             set multiplot layout 2,2\nset logscale xy\n\
             set xlabel 'throughput (ops/s)'\nset ylabel 'latency (ns)'\n",
        );
        for (shm, workloads) in &kv {
            let name = format!("kv_{shm}.dat");
            let mut dat = String::new();
            let mut plots = Vec::new();
            for (i, (workload, rows)) in workloads.iter().enumerate() {
                let _ = writeln!(dat, "# workload {workload}\n# rate throughput_ops mean_response_ns median_ns p95_ns");
                for c in rows {
                    let _ = writeln!(
                        dat,
                        "{} {:.3} {:.1} {:.1} {}",
                        c.rate_or_size, c.throughput_ops, c.mean_response_ns, c.median_ns, c.p95_ns
                    );
                }
                dat.push_str("\n\n");
                plots.push(format!("'{name}' index {i} using 2:3 with linespoints title '{workload}'"));
            }
            fs::write(dir.join(&name), dat)?;
            files.push(dir.join(&name));
            let _ = writeln!(script, "set title '{shm}'\nplot {}", plots.join(", \\\n     "));
        }
        script.push_str("unset multiplot\n");
        fs::write(dir.join("kv.gp"), script)?;
        files.push(dir.join("kv.gp"));
    }

    let mut st: BTreeMap<&str, Vec<&CellSummary>> = BTreeMap::new();
    for c in summary.iter().filter(|c| c.bench == BenchKind::Storage) {
        st.entry(&c.workload).or_default().push(c);
    }
    if !st.is_empty() {
        let mut dat = String::new();
        let mut time_plots = Vec::new();
        let mut tput_plots = Vec::new();
        for (i, (cmd, rows)) in st.iter().enumerate() {
            let _ = writeln!(dat, "# command {cmd}\n# size_bytes mean_ns throughput_bytes");
            for c in rows {
                let _ = writeln!(dat, "{} {:.1} {:.1}", c.rate_or_size, c.mean_ns, c.throughput_bytes.unwrap_or(0.0));
            }
            dat.push_str("\n\n");
            time_plots.push(format!("'storage.dat' index {i} using 1:2 with linespoints title '{cmd}'"));
            tput_plots.push(format!("'storage.dat' index {i} using 1:3 with linespoints title '{cmd}'"));
        }
        fs::write(dir.join("storage.dat"), dat)?;
        let script = format!(
            "set terminal pngcairo size 1200,450\nset output 'storage.png'\n\
             set multiplot layout 1,2\nset logscale x 2\nset xlabel 'object size (bytes)'\n\
             set logscale y\nset ylabel 'time (ns)'\nplot {}\n\
             set ylabel 'throughput (bytes/s)'\nplot {}\nunset multiplot\n",
            time_plots.join(", \\\n     "),
            tput_plots.join(", \\\n     ")
        );
        fs::write(dir.join("storage.gp"), script)?;
        files.push(dir.join("storage.dat"));
        files.push(dir.join("storage.gp"));
    }
    Ok(files)
}

/// Writes the report into `dir` and returns the files written.
pub fn emit_report(samples: &[Sample], format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to report".into()));
    }
    fs::create_dir_all(dir)?;
    match format {
        ReportFormat::Csv => {
            let path = dir.join("samples.csv");
            write_csv(samples, fs::File::create(&path)?)?;
            Ok(vec![path])
        }
        ReportFormat::Summary => write_summary(samples, dir),
        ReportFormat::Gnuplot => write_gnuplot(samples, dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv_sample(rate: u64, op: &str, ns: u64) -> Sample {
        Sample {
            bench: BenchKind::Kv,
            workload: "PUT".into(),
            shm: "whole".into(),
            rate_or_size: rate,
            op: op.into(),
            service_ns: ns,
            issue_fs: 0,
            code: 0,
            chunk_ops: None,
        }
    }

    #[test]
    fn csv_round_trip() {
        let samples: Vec<_> = (1..=256).map(|i| kv_sample(32768, "PUT", i)).collect();
        let mut buf = Vec::new();
        write_csv(&samples, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("bench,workload,shm,rate_or_size,op,service_ns\n"));
        assert_eq!(text.lines().count(), 257);
        assert!(!text.contains('\r'));
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn percentiles() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 0.95), 95);
        assert_eq!(percentile(&v, 0.99), 99);
        assert_eq!(percentile(&[5], 0.99), 5);
        assert_eq!(median(&[3, 1, 2]), 2.0);
        assert_eq!(median(&[4, 1, 2, 3]), 2.5);
    }

    #[test]
    fn queue_replay_regimes() {
        // idle server: every op finishes before the next arrives
        let (done, resp) = queue_replay(1, &[10; 4]);
        assert_eq!(done, 3e9 + 10.0);
        assert_eq!(resp, 10.0);
        // saturated: completion is the sum of service times
        let (done, _) = queue_replay(1_000_000, &[5_000; 8]);
        assert_eq!(done, 40_000.0);
    }

    #[test]
    fn empty_report_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&[], ReportFormat::Csv, dir.path()).is_err());
    }

    #[test]
    fn reject_foreign_header() {
        assert!(read_csv(&b"a,b\n1,2\n"[..]).is_err());
    }
}
