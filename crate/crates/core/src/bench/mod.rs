//! Benchmark harness: the key-value shared-memory benchmark, the
//! secure-storage benchmark and report generation.

pub mod kv;
pub mod report;
pub mod storage;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use kv::{run_kv_bench, run_kv_sweep, KvBenchConfig};
pub use report::{emit_report, ReportFormat};
pub use storage::{run_storage_bench, StorageBenchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Workload {
    Put,
    Get,
    Del,
    Mix20,
    Mix50,
}

impl Workload {
    pub const ALL: [Workload; 5] = [Workload::Put, Workload::Get, Workload::Del, Workload::Mix20, Workload::Mix50];

    /// Share of PUT operations in the workload.
    pub fn put_share(self) -> f64 {
        match self {
            Workload::Put => 1.0,
            Workload::Get | Workload::Del => 0.0,
            Workload::Mix20 => 0.2,
            Workload::Mix50 => 0.5,
        }
    }

    /// Entries in the table before the first timed operation, given the
    /// standard pre-population size.
    pub fn prepopulated(self, base: usize) -> usize {
        match self {
            Workload::Put => 0,
            Workload::Get | Workload::Del => base,
            // floor(base * GET share)
            Workload::Mix20 => base * 4 / 5,
            Workload::Mix50 => base / 2,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Workload::Put => "PUT",
            Workload::Get => "GET",
            Workload::Del => "DEL",
            Workload::Mix20 => "MIX20",
            Workload::Mix50 => "MIX50",
        })
    }
}

impl FromStr for Workload {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "put" => Ok(Workload::Put),
            "get" => Ok(Workload::Get),
            "del" => Ok(Workload::Del),
            "mix20" => Ok(Workload::Mix20),
            "mix50" => Ok(Workload::Mix50),
            _ => Err(Error::Config(format!("unknown workload {s:?}"))),
        }
    }
}

/// How the benchmark moves data across the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShmMode {
    /// The whole region is passed; the TA locates the chunk.
    Whole,
    /// Only the chunk's `(offset, length)` slice of the region is passed.
    Partial,
    /// A per-command client buffer holding the chunk.
    Temporary,
    /// No boundary: the reference map in the normal world.
    ReeDirect,
}

impl ShmMode {
    pub const ALL: [ShmMode; 4] = [ShmMode::Whole, ShmMode::Partial, ShmMode::Temporary, ShmMode::ReeDirect];
}

impl fmt::Display for ShmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShmMode::Whole => "whole",
            ShmMode::Partial => "partial",
            ShmMode::Temporary => "temporary",
            ShmMode::ReeDirect => "ree",
        })
    }
}

impl FromStr for ShmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "whole" => Ok(ShmMode::Whole),
            "partial" => Ok(ShmMode::Partial),
            "temporary" | "temp" => Ok(ShmMode::Temporary),
            "ree" | "ree_direct" => Ok(ShmMode::ReeDirect),
            _ => Err(Error::Config(format!("unknown shared-memory mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StorageCommand {
    Write,
    Read,
    Rewrite,
}

impl StorageCommand {
    pub const ALL: [StorageCommand; 3] = [StorageCommand::Write, StorageCommand::Read, StorageCommand::Rewrite];
}

impl fmt::Display for StorageCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StorageCommand::Write => "WRITE",
            StorageCommand::Read => "READ",
            StorageCommand::Rewrite => "REWRITE",
        })
    }
}

impl FromStr for StorageCommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "write" => Ok(StorageCommand::Write),
            "read" => Ok(StorageCommand::Read),
            "rewrite" => Ok(StorageCommand::Rewrite),
            _ => Err(Error::Config(format!("unknown storage command {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BenchKind {
    Kv,
    Storage,
}

impl fmt::Display for BenchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchKind::Kv => "kv",
            BenchKind::Storage => "storage",
        })
    }
}

impl FromStr for BenchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kv" => Ok(BenchKind::Kv),
            "storage" => Ok(BenchKind::Storage),
            _ => Err(Error::Config(format!("unknown bench {s:?}"))),
        }
    }
}

/// One timed operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub bench: BenchKind,
    /// Workload (kv) or command (storage).
    pub workload: String,
    /// Shared-memory mode; `none` for storage.
    pub shm: String,
    /// Issue rate in ops/s (kv) or object size in bytes (storage).
    pub rate_or_size: u64,
    pub op: String,
    /// Service time on the monotonic clock, always > 0.
    pub service_ns: u64,
    /// Virtual issue time in femtoseconds since the start of the cell.
    pub issue_fs: u128,
    /// Return code of the operation.
    pub code: u32,
    /// Chunk operations performed (storage only).
    pub chunk_ops: Option<u32>,
}

pub const FS_PER_SEC: u128 = 1_000_000_000_000_000;

/// Issue schedule for a fixed rate. Times are computed from the op index,
/// so they are exact whenever the period is a whole number of femtoseconds
/// (every power-of-two rate up to 2^15 ops/s).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualClock {
    rate: u64,
}

impl VirtualClock {
    pub fn new(rate: u64) -> Result<Self> {
        if rate == 0 {
            return Err(Error::Config("rate must be positive".into()));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> u64 {
        self.rate
    }

    pub fn issue_fs(&self, index: u64) -> u128 {
        index as u128 * FS_PER_SEC / self.rate as u128
    }

    pub fn period_fs(&self) -> u128 {
        FS_PER_SEC / self.rate as u128
    }
}

/// Parses `a..b` (powers of two from `a` up to `b`), a comma-separated
/// list, or a single number.
pub fn parse_sweep(s: &str) -> Result<Vec<u64>> {
    let bad = |why: &str| Error::Config(format!("bad sweep {s:?}: {why}"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad("lower bound"))?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad("upper bound"))?;
        if lo == 0 || lo > hi {
            return Err(bad("need 0 < lo <= hi"));
        }
        let mut out = Vec::new();
        let mut v = lo;
        while v <= hi {
            out.push(v);
            v = v.checked_mul(2).ok_or_else(|| bad("overflow"))?;
        }
        return Ok(out);
    }
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| bad("not a number")))
        .collect::<Result<Vec<_>>>()
        .and_then(|v| if v.is_empty() || v.contains(&0) { Err(bad("values must be positive")) } else { Ok(v) })
}

/// Powers of two from 1 to 32768 ops/s.
pub fn default_rates() -> Vec<u64> {
    (0..=15).map(|e| 1u64 << e).collect()
}

/// Powers of two from 256 B to 1 MiB.
pub fn default_sizes() -> Vec<u64> {
    (8..=20).map(|e| 1u64 << e).collect()
}
