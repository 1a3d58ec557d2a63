use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use teekv::bench::report::{self, read_csv, summarize, write_csv};
use teekv::bench::{
    emit_report, parse_sweep, run_kv_sweep, run_storage_bench, KvBenchConfig, ReportFormat, ShmMode, StorageBenchConfig,
    StorageCommand, Workload,
};
use teekv::storage::keys::Huk;
use teekv::{Client, Result, Tee, TeeConfig, DEFAULT_DEVICE};

/// Emulated TrustZone-style TEE with a key-value TA and secure storage.
#[derive(Parser)]
#[command(name = "teekv", version)]
struct Cli {
    /// Directory for persisted secure-storage objects (default: a temporary directory).
    #[arg(long, global = true, env = "TEEKV_STORE_ROOT")]
    store_root: Option<PathBuf>,
    /// Hardware unique key: 64 hex digits, or `static` for the fallback key.
    #[arg(long, global = true, env = "TEEKV_HUK")]
    huk: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark.
    #[command(subcommand)]
    Bench(Bench),
    /// Build reports from benchmark CSV files.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum Bench {
    /// Key-value shared-memory benchmark.
    Kv(KvArgs),
    /// Secure-storage benchmark.
    Storage(StorageArgs),
}

#[derive(Args)]
struct KvArgs {
    /// put, get, del, mix20, mix50; comma-separated or `all`.
    #[arg(long, default_value = "all")]
    workload: String,
    /// whole, partial, temporary, ree; comma-separated or `all`.
    #[arg(long, default_value = "all")]
    shm: String,
    /// Issue rates in ops/s: `lo..hi` for powers of two, or a list.
    #[arg(long, default_value = "1..32768")]
    rates: String,
    #[arg(long, default_value_t = 256)]
    ops: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Offset alignment in bytes.
    #[arg(long, default_value_t = 1024)]
    align: usize,
    /// Pace ops on the wall clock instead of the virtual clock.
    #[arg(long)]
    real_time: bool,
    /// Extra busy-wait per world switch, in nanoseconds.
    #[arg(long, default_value_t = 0)]
    latency_ns: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StorageArgs {
    /// Object sizes in bytes: `lo..hi` for powers of two, or a list.
    #[arg(long, default_value = "256..1048576")]
    sizes: String,
    #[arg(long, default_value_t = 1024)]
    chunk: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// write, read, rewrite; comma-separated or `all`.
    #[arg(long, default_value = "all")]
    commands: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check that READ and REWRITE see the bytes WRITE produced.
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value_t = 0)]
    latency_ns: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// csv, summary or gnuplot.
    #[arg(long)]
    format: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn list<T: std::str::FromStr<Err = teekv::Error> + Copy>(s: &str, all: &[T]) -> Result<Vec<T>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(all.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

fn tee(cli: &Cli, seed: Option<u64>, latency_ns: u64) -> Result<std::sync::Arc<Tee>> {
    let mut cfg = TeeConfig {
        store_root: cli.store_root.clone(),
        seed,
        injected_latency: Duration::from_nanos(latency_ns),
        ..TeeConfig::default()
    };
    if let Some(h) = &cli.huk {
        cfg.huk = h.parse::<Huk>()?;
    }
    if let Some(root) = &cfg.store_root {
        fs::create_dir_all(root)?;
    }
    Tee::new(cfg)
}

fn print_summary(samples: &[teekv::bench::Sample]) {
    println!("{:<8} {:<8} {:<10} {:>8} {:>7} {:>12} {:>10} {:>14}", "bench", "workload", "shm", "rate/sz", "n", "median_ns", "p99_ns", "throughput");
    for c in summarize(samples) {
        println!(
            "{:<8} {:<8} {:<10} {:>8} {:>7} {:>12.0} {:>10} {:>14.1}",
            c.bench.to_string(),
            c.workload,
            c.shm,
            c.rate_or_size,
            c.count,
            c.median_ns,
            c.p99_ns,
            c.throughput_bytes.unwrap_or(c.throughput_ops)
        );
    }
}

fn write_samples(samples: &[teekv::bench::Sample], out: &std::path::Path, name: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    let path = out.join(name);
    write_csv(samples, fs::File::create(&path)?)?;
    eprintln!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Bench(Bench::Kv(a)) => {
            let workloads = list(&a.workload, &Workload::ALL)?;
            let modes = list(&a.shm, &ShmMode::ALL)?;
            let base = KvBenchConfig {
                rates: parse_sweep(&a.rates)?,
                ops: a.ops,
                seed: a.seed,
                align: a.align,
                real_time: a.real_time,
                ..KvBenchConfig::default()
            };
            let client = Client::new(tee(&cli, Some(a.seed), a.latency_ns)?);
            let t = Instant::now();
            let samples = run_kv_sweep(&client, DEFAULT_DEVICE, &base, &workloads, &modes)?;
            eprintln!("kv benchmark finished in {:.1?}", t.elapsed());
            write_samples(&samples, &a.out, "kv.csv")?;
            print_summary(&samples);
        }
        Command::Bench(Bench::Storage(a)) => {
            let cfg = StorageBenchConfig {
                commands: list(&a.commands, &StorageCommand::ALL)?,
                sizes: parse_sweep(&a.sizes)?,
                chunk: a.chunk,
                repetitions: a.reps,
                seed: a.seed,
                verify: a.verify,
            };
            let client = Client::new(tee(&cli, Some(a.seed), a.latency_ns)?);
            let t = Instant::now();
            let samples = run_storage_bench(&client, DEFAULT_DEVICE, &cfg)?;
            eprintln!("storage benchmark finished in {:.1?}", t.elapsed());
            write_samples(&samples, &a.out, "storage.csv")?;
            print_summary(&samples);
        }
        Command::Report(a) => {
            let format: ReportFormat = a.format.parse()?;
            let mut samples = Vec::new();
            for path in &a.inputs {
                samples.extend(read_csv(fs::File::open(path)?)?);
            }
            for f in emit_report(&samples, format, &a.out)? {
                println!("{}", f.display());
            }
            if format == ReportFormat::Summary {
                for ((bench, workload, shm), m) in report::workload_medians(&samples) {
                    eprintln!("{bench:<8} {workload:<8} {shm:<10} median {m:.0} ns");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("teekv: {e}");
            ExitCode::from(1)
        }
    }
}
