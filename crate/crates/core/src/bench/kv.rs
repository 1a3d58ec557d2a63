//! Key-value shared-memory benchmark.
//!
//! A 512 KiB region is filled from the seeded generator. Each operation
//! draws a uniform offset into the region; the offset is the key and the
//! 1 KiB chunk at that offset is the value. Issue times run on a virtual
//! clock, service times on the monotonic clock.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BenchKind, Sample, ShmMode, VirtualClock, Workload};
use crate::client::{Client, ContextHandle, Operation, Parameter, SessionHandle, SharedMemoryRegion, ShmKind};
use crate::error::{rc, Error, Result};
use crate::kv::{self, split_key, ENTRY_OVERHEAD, MAX_VALUE_LEN};
use crate::ta::{stats, KV_TA_UUID, PSEUDO_STATS_UUID};
use crate::tee::{Direction, DEFAULT_TA_MEMORY_LIMIT};

pub const DEFAULT_REGION_SIZE: usize = 512 * 1024;
pub const DEFAULT_CHUNK: usize = 1024;
pub const DEFAULT_OPS: usize = 256;
pub const DEFAULT_PREPOPULATE: usize = 256;

#[derive(Debug, Clone)]
pub struct KvBenchConfig {
    pub workload: Workload,
    pub shm: ShmMode,
    pub region_size: usize,
    pub chunk: usize,
    /// Offsets are multiples of this.
    pub align: usize,
    pub ops: usize,
    pub rates: Vec<u64>,
    pub seed: u64,
    /// Table size before GET/DEL cells; MIX cells use the GET share of it.
    pub prepopulate: usize,
    /// Sleep until each op's issue time instead of only recording it.
    pub real_time: bool,
}

impl Default for KvBenchConfig {
    fn default() -> Self {
        Self {
            workload: Workload::Put,
            shm: ShmMode::Whole,
            region_size: DEFAULT_REGION_SIZE,
            chunk: DEFAULT_CHUNK,
            align: DEFAULT_CHUNK,
            ops: DEFAULT_OPS,
            rates: super::default_rates(),
            seed: 0,
            prepopulate: DEFAULT_PREPOPULATE,
            real_time: false,
        }
    }
}

impl KvBenchConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.chunk == 0 || self.chunk > MAX_VALUE_LEN {
            return cfg(format!("chunk must be 1..={MAX_VALUE_LEN}"));
        }
        if self.chunk > self.region_size {
            return cfg(format!("chunk {} larger than region {}", self.chunk, self.region_size));
        }
        if self.align == 0 {
            return cfg("alignment must be positive".into());
        }
        if self.region_size > u32::MAX as usize {
            return cfg("region too large for 32-bit offsets".into());
        }
        if self.rates.is_empty() || self.rates.contains(&0) {
            return cfg("rates must be non-empty and positive".into());
        }
        let slots = self.slots();
        let pre = self.workload.prepopulated(self.prepopulate);
        if pre > slots {
            return cfg(format!("cannot pre-populate {pre} distinct keys from {slots} offsets"));
        }
        Ok(())
    }

    /// Number of distinct offsets an operation can draw.
    pub fn slots(&self) -> usize {
        (self.region_size - self.chunk) / self.align + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Put,
    Get,
    Del,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Put => "PUT",
            OpKind::Get => "GET",
            OpKind::Del => "DEL",
        }
    }
}

/// One operation; the key is the offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvOp {
    pub kind: OpKind,
    pub offset: u64,
}

/// The deterministic part of a benchmark: region contents, pre-population
/// keys and the timed operation sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvPlan {
    pub region: Vec<u8>,
    pub prepopulate: Vec<u64>,
    pub ops: Vec<KvOp>,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Region contents for a seed, shared by every workload.
pub fn fill_region(seed: u64, size: usize) -> Vec<u8> {
    let mut region = vec![0; size];
    stream(seed, 0).fill_bytes(&mut region);
    region
}

impl KvPlan {
    pub fn new(cfg: &KvBenchConfig) -> Result<Self> {
        cfg.validate()?;
        let slots = cfg.slots();
        let align = cfg.align as u64;
        let w = cfg.workload.index();

        let mut rng = stream(cfg.seed, 1 + 2 * w);
        let prepopulate = index::sample(&mut rng, slots, cfg.workload.prepopulated(cfg.prepopulate))
            .into_iter()
            .map(|s| s as u64 * align)
            .collect();

        let mut rng = stream(cfg.seed, 2 + 2 * w);
        let mut kinds = match cfg.workload {
            Workload::Put => vec![OpKind::Put; cfg.ops],
            Workload::Get => vec![OpKind::Get; cfg.ops],
            Workload::Del => vec![OpKind::Del; cfg.ops],
            Workload::Mix20 | Workload::Mix50 => {
                let puts = (cfg.ops as f64 * cfg.workload.put_share()).round() as usize;
                let mut k = vec![OpKind::Put; puts];
                k.resize(cfg.ops, OpKind::Get);
                k
            }
        };
        kinds.shuffle(&mut rng);
        let ops = kinds.into_iter().map(|kind| KvOp { kind, offset: rng.gen_range(0..slots) as u64 * align }).collect();

        Ok(Self { region: fill_region(cfg.seed, cfg.region_size), prepopulate, ops })
    }
}

/// Result of one operation. `service` covers only the boundary crossing
/// (plus the temporary-buffer lifecycle in temporary mode).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpOutcome {
    pub code: u32,
    /// Bytes returned by a successful GET.
    pub fetched: Option<Vec<u8>>,
    pub service: Duration,
}

/// Executes key-value operations against one store.
pub trait KvBackend {
    /// Empties the store.
    fn clear(&mut self) -> Result<()>;
    fn execute(&mut self, op: KvOp) -> Result<OpOutcome>;
    /// Entries currently stored.
    fn count(&mut self) -> Result<u64>;
}

/// Normal-world reference map with the same return-code semantics and
/// memory accounting as the KV TA.
pub struct ReeKv {
    map: HashMap<u64, Vec<u8>>,
    region: Vec<u8>,
    chunk: usize,
    used: usize,
    limit: usize,
}

impl ReeKv {
    pub fn new(region: Vec<u8>, chunk: usize) -> Self {
        Self { map: HashMap::new(), region, chunk, used: 0, limit: DEFAULT_TA_MEMORY_LIMIT }
    }

    fn apply(&mut self, op: KvOp) -> (u32, Option<Vec<u8>>) {
        let key = op.offset;
        match op.kind {
            OpKind::Put => {
                let start = op.offset as usize;
                let Some(value) = self.region.get(start..start + self.chunk) else {
                    return (rc::BAD_PARAMETERS, None);
                };
                let old = self.map.get(&key).map_or(0, |v| v.len() + ENTRY_OVERHEAD);
                let new_used = self.used - old + value.len() + ENTRY_OVERHEAD;
                if new_used > self.limit {
                    return (rc::OUT_OF_MEMORY, None);
                }
                self.used = new_used;
                self.map.insert(key, value.to_vec());
                (rc::SUCCESS, None)
            }
            OpKind::Get => match self.map.get(&key) {
                Some(v) => (rc::SUCCESS, Some(v.clone())),
                None => (rc::ITEM_NOT_FOUND, None),
            },
            OpKind::Del => match self.map.remove(&key) {
                Some(v) => {
                    self.used -= v.len() + ENTRY_OVERHEAD;
                    (rc::SUCCESS, None)
                }
                None => (rc::ITEM_NOT_FOUND, None),
            },
        }
    }
}

impl KvBackend for ReeKv {
    fn clear(&mut self) -> Result<()> {
        self.map.clear();
        self.used = 0;
        Ok(())
    }

    fn execute(&mut self, op: KvOp) -> Result<OpOutcome> {
        let t = Instant::now();
        let (code, fetched) = self.apply(op);
        let service = t.elapsed();
        Ok(OpOutcome { code, fetched, service })
    }

    fn count(&mut self) -> Result<u64> {
        Ok(self.map.len() as u64)
    }
}

/// The KV TA reached through the client API in one of the boundary modes.
/// Owns a context with the shared region and a session per cell.
pub struct TeeKv<'c> {
    client: &'c Client,
    ctx: ContextHandle,
    mode: ShmMode,
    chunk: usize,
    source: Vec<u8>,
    region: Option<SharedMemoryRegion>,
    session: Option<SessionHandle>,
    stats: SessionHandle,
    uuid_region: SharedMemoryRegion,
}

impl<'c> TeeKv<'c> {
    pub fn new(client: &'c Client, device: &str, mode: ShmMode, region: Vec<u8>, chunk: usize) -> Result<Self> {
        if mode == ShmMode::ReeDirect {
            return Err(Error::Config("ree mode does not cross the boundary".into()));
        }
        let ctx = client.initialize_context(device)?;
        let build = || -> Result<Self> {
            let shared = match mode {
                ShmMode::Whole | ShmMode::Partial => {
                    let r = client.setup_shared_memory(&ctx, region.len(), ShmKind::Whole)?;
                    client.write_shared_memory(&r, 0, &region)?;
                    Some(r)
                }
                _ => None,
            };
            let stats = client.open_session(&ctx, PSEUDO_STATS_UUID)?;
            let uuid_region = client.setup_shared_memory(&ctx, 16, ShmKind::Whole)?;
            client.write_shared_memory(&uuid_region, 0, KV_TA_UUID.as_bytes())?;
            Ok(Self {
                client,
                ctx: ctx.clone(),
                mode,
                chunk,
                source: region,
                region: shared,
                session: None,
                stats,
                uuid_region,
            })
        };
        build().inspect_err(|_| {
            let _ = client.finalize_context(&ctx);
        })
    }

    /// Opens a fresh session to the KV TA, closing the previous one.
    pub fn new_session(&mut self) -> Result<()> {
        if let Some(s) = self.session.take() {
            self.client.close_session(&s)?;
        }
        self.session = Some(self.client.open_session(&self.ctx, KV_TA_UUID)?);
        Ok(())
    }

    fn session(&mut self) -> Result<SessionHandle> {
        if self.session.is_none() {
            self.new_session()?;
        }
        Ok(self.session.expect("opened above"))
    }

    fn invoke(&self, s: &SessionHandle, op: Operation) -> (u32, Option<Operation>) {
        match self.client.invoke_command(s, op) {
            Ok((code, op)) => (code, Some(op)),
            Err(e) => (e.code(), None),
        }
    }

    fn key_param(offset: u64) -> Parameter {
        let (lo, hi) = split_key(offset);
        Parameter::value(lo, hi)
    }

    fn shared_op(&mut self, s: &SessionHandle, op: KvOp) -> Result<OpOutcome> {
        let region = self.region.expect("shared modes own a region");
        let off = op.offset as usize;
        let chunk = self.chunk;
        let key = Self::key_param(op.offset);
        let window = Parameter::value(off as u32, chunk as u32);
        let operation = match (op.kind, self.mode) {
            (OpKind::Put, ShmMode::Whole) => {
                Operation::new(kv::CMD_PUT, vec![key, Parameter::whole(&region, Direction::In), window])
            }
            (OpKind::Put, _) => {
                Operation::new(kv::CMD_PUT, vec![key, Parameter::memref(&region, off, chunk, Direction::In)])
            }
            (OpKind::Get, ShmMode::Whole) => {
                Operation::new(kv::CMD_GET, vec![key, Parameter::whole(&region, Direction::Out), window])
            }
            (OpKind::Get, _) => Operation::new(
                kv::CMD_GET,
                vec![
                    key,
                    Parameter::memref(&region, off, chunk, Direction::Out),
                    Parameter::value(0, chunk as u32),
                ],
            ),
            (OpKind::Del, _) => Operation::new(kv::CMD_DEL, vec![key]),
        };

        // Blank the output window so a GET that writes nothing is caught.
        let is_get = op.kind == OpKind::Get;
        if is_get {
            self.client.with_shared_memory(&region, |b| b[off..off + chunk].fill(0))?;
        }
        let t = Instant::now();
        let (code, done) = self.invoke(s, operation);
        let service = t.elapsed();
        let mut fetched = None;
        if is_get {
            if code == rc::SUCCESS {
                let len = done.as_ref().and_then(|o| o.params[2].as_value()).map_or(0, |(_, b)| b as usize);
                fetched = Some(self.client.read_shared_memory(&region, off, len.min(chunk))?);
            }
            self.client.write_shared_memory(&region, off, &self.source[off..off + chunk])?;
        }
        Ok(OpOutcome { code, fetched, service })
    }

    fn temporary_op(&mut self, s: &SessionHandle, op: KvOp) -> Result<OpOutcome> {
        let off = op.offset as usize;
        let chunk = self.chunk;
        let key = Self::key_param(op.offset);
        let t = Instant::now();
        let (code, fetched) = match op.kind {
            OpKind::Del => (self.invoke(s, Operation::new(kv::CMD_DEL, vec![key])).0, None),
            OpKind::Put | OpKind::Get => {
                let temp = self.client.setup_shared_memory(&self.ctx, chunk, ShmKind::Temporary)?;
                let result = (|| -> Result<_> {
                    if op.kind == OpKind::Put {
                        self.client.write_shared_memory(&temp, 0, &self.source[off..off + chunk])?;
                        let p = Parameter::whole(&temp, Direction::In);
                        Ok((self.invoke(s, Operation::new(kv::CMD_PUT, vec![key, p])).0, None))
                    } else {
                        let p = Parameter::whole(&temp, Direction::Out);
                        let w = Parameter::value(0, chunk as u32);
                        let (code, done) = self.invoke(s, Operation::new(kv::CMD_GET, vec![key, p, w]));
                        let fetched = if code == rc::SUCCESS {
                            let len = done.and_then(|o| o.params[2].as_value()).map_or(0, |(_, b)| b as usize);
                            Some(self.client.read_shared_memory(&temp, 0, len.min(chunk))?)
                        } else {
                            None
                        };
                        Ok((code, fetched))
                    }
                })();
                self.client.release_shared_memory(&temp)?;
                result?
            }
        };
        let service = t.elapsed();
        Ok(OpOutcome { code, fetched, service })
    }
}

impl KvBackend for TeeKv<'_> {
    fn clear(&mut self) -> Result<()> {
        let s = self.session()?;
        let (code, _) = self.invoke(&s, Operation::new(kv::CMD_CLEAR, vec![]));
        match code {
            rc::SUCCESS => Ok(()),
            _ => Err(Error::Config(format!("CLEAR failed with {code:#010x}"))),
        }
    }

    fn execute(&mut self, op: KvOp) -> Result<OpOutcome> {
        let s = self.session()?;
        match self.mode {
            ShmMode::Whole | ShmMode::Partial => self.shared_op(&s, op),
            _ => self.temporary_op(&s, op),
        }
    }

    /// Table size as reported by the stats pseudo TA.
    fn count(&mut self) -> Result<u64> {
        let op = Operation::new(
            stats::CMD_TA_INFO,
            vec![Parameter::whole(&self.uuid_region, Direction::In), Parameter::value(0, 0), Parameter::value(0, 0)],
        );
        let (_, op) = self.client.invoke_command(&self.stats, op)?;
        let (_, items) = op.params[1].as_value().expect("value parameter");
        if items == u32::MAX {
            return Err(Error::Config("KV TA does not report an item count".into()));
        }
        Ok(items as u64)
    }
}

impl Drop for TeeKv<'_> {
    fn drop(&mut self) {
        let _ = self.client.finalize_context(&self.ctx);
    }
}

/// Builds the backend for `shm`; `device` is ignored in ree mode.
pub fn backend<'c>(client: &'c Client, device: &str, shm: ShmMode, region: Vec<u8>, chunk: usize) -> Result<Box<dyn KvBackend + 'c>> {
    Ok(match shm {
        ShmMode::ReeDirect => Box::new(ReeKv::new(region, chunk)),
        _ => Box::new(TeeKv::new(client, device, shm, region, chunk)?),
    })
}

/// Per-cell bookkeeping returned alongside the samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellInfo {
    pub rate: u64,
    /// Table size after pre-population.
    pub prepopulated: u64,
    /// Table size after the last timed operation.
    pub final_entries: u64,
}

#[derive(Debug, Clone, Default)]
pub struct KvRun {
    pub samples: Vec<Sample>,
    pub cells: Vec<CellInfo>,
}

/// Runs every rate cell of one (workload, mode) pair.
pub fn run_kv_bench(client: &Client, device: &str, cfg: &KvBenchConfig) -> Result<KvRun> {
    let plan = KvPlan::new(cfg)?;
    let mut store = backend(client, device, cfg.shm, plan.region.clone(), cfg.chunk)?;
    let mut run = KvRun::default();
    for &rate in &cfg.rates {
        let clock = VirtualClock::new(rate)?;
        store.clear()?;
        for &key in &plan.prepopulate {
            let out = store.execute(KvOp { kind: OpKind::Put, offset: key })?;
            if out.code != rc::SUCCESS {
                return Err(Error::Config(format!("pre-population PUT failed with {:#010x}", out.code)));
            }
        }
        let prepopulated = store.count()?;

        let start = Instant::now();
        for (i, &op) in plan.ops.iter().enumerate() {
            let issue_fs = clock.issue_fs(i as u64);
            if cfg.real_time {
                let due = Duration::from_nanos((issue_fs / 1_000_000) as u64);
                if let Some(wait) = due.checked_sub(start.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
            let out = store.execute(op)?;
            run.samples.push(Sample {
                bench: BenchKind::Kv,
                workload: cfg.workload.to_string(),
                shm: cfg.shm.to_string(),
                rate_or_size: rate,
                op: op.kind.name().to_owned(),
                service_ns: (out.service.as_nanos() as u64).max(1),
                issue_fs,
                code: out.code,
                chunk_ops: None,
            });
        }
        run.cells.push(CellInfo { rate, prepopulated, final_entries: store.count()? });
    }
    Ok(run)
}

/// Runs every (workload, mode) pair of `workloads` × `modes` with the
/// remaining settings from `base`.
pub fn run_kv_sweep(
    client: &Client,
    device: &str,
    base: &KvBenchConfig,
    workloads: &[Workload],
    modes: &[ShmMode],
) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for &workload in workloads {
        for &shm in modes {
            let cfg = KvBenchConfig { workload, shm, ..base.clone() };
            samples.extend(run_kv_bench(client, device, &cfg)?.samples);
        }
    }
    Ok(samples)
}

/// Runs `ops` in order and returns each outcome.
pub fn replay(store: &mut dyn KvBackend, ops: &[KvOp]) -> Result<Vec<OpOutcome>> {
    ops.iter().map(|&op| store.execute(op)).collect()
}

/// Like [`replay`] but with return codes only, for callers that do not
/// need timings.
pub fn replay_codes(store: &mut dyn KvBackend, ops: &[KvOp]) -> Result<Vec<u32>> {
    Ok(replay(store, ops)?.into_iter().map(|o| o.code).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tee::{Tee, TeeConfig};
    use crate::DEFAULT_DEVICE;

    fn cfg(workload: Workload, shm: ShmMode) -> KvBenchConfig {
        KvBenchConfig { workload, shm, rates: vec![32768], seed: 42, ..Default::default() }
    }

    #[test]
    fn plan_is_deterministic_and_aligned() {
        let c = cfg(Workload::Mix20, ShmMode::Whole);
        let a = KvPlan::new(&c).unwrap();
        assert_eq!(a, KvPlan::new(&c).unwrap());
        assert_eq!(a.ops.len(), 256);
        assert_eq!(a.prepopulate.len(), 204);
        assert_eq!(a.ops.iter().filter(|o| o.kind == OpKind::Put).count(), 51);
        for o in &a.ops {
            assert_eq!(o.offset % 1024, 0);
            assert!(o.offset as usize + 1024 <= DEFAULT_REGION_SIZE);
        }
        let other = KvPlan::new(&KvBenchConfig { seed: 43, ..c }).unwrap();
        assert_ne!(a.ops, other.ops);
    }

    #[test]
    fn plan_ignores_mode_and_rates() {
        let a = KvPlan::new(&cfg(Workload::Get, ShmMode::Whole)).unwrap();
        let mut c = cfg(Workload::Get, ShmMode::Temporary);
        c.rates = vec![1, 2];
        assert_eq!(a, KvPlan::new(&c).unwrap());
    }

    #[test]
    fn config_errors() {
        let mut c = cfg(Workload::Put, ShmMode::Whole);
        c.chunk = DEFAULT_REGION_SIZE + 1;
        assert!(matches!(KvPlan::new(&c), Err(Error::Config(_))));
        let mut c = cfg(Workload::Get, ShmMode::Whole);
        c.region_size = 64 * 1024;
        assert!(matches!(KvPlan::new(&c), Err(Error::Config(_))), "64 slots cannot hold 256 keys");
        let mut c = cfg(Workload::Put, ShmMode::Whole);
        c.rates = vec![];
        assert!(c.validate().is_err());
    }

    #[test]
    fn put_cell_through_whole_region() {
        let client = Client::new(Tee::new(TeeConfig::default()).unwrap());
        let run = run_kv_bench(&client, DEFAULT_DEVICE, &cfg(Workload::Put, ShmMode::Whole)).unwrap();
        assert_eq!(run.samples.len(), 256);
        assert!(run.samples.iter().all(|s| s.code == rc::SUCCESS && s.service_ns > 0));
        let cell = run.cells[0];
        assert_eq!(cell.prepopulated, 0);
        assert!(cell.final_entries <= 256 && cell.final_entries > 0);
    }

    #[test]
    fn modes_agree_with_reference() {
        let client = Client::new(Tee::new(TeeConfig::default()).unwrap());
        let plan = KvPlan::new(&KvBenchConfig { ops: 600, ..cfg(Workload::Mix50, ShmMode::Whole) }).unwrap();
        let mut ops = plan.ops.clone();
        ops.extend(plan.ops.iter().take(100).map(|o| KvOp { kind: OpKind::Del, offset: o.offset }));
        let mut reference = ReeKv::new(plan.region.clone(), DEFAULT_CHUNK);
        let expected: Vec<_> = replay(&mut reference, &ops).unwrap().into_iter().map(|o| (o.code, o.fetched)).collect();
        assert!(expected.iter().any(|(c, _)| *c == rc::ITEM_NOT_FOUND));
        for mode in [ShmMode::Whole, ShmMode::Partial, ShmMode::Temporary] {
            let mut store = backend(&client, DEFAULT_DEVICE, mode, plan.region.clone(), DEFAULT_CHUNK).unwrap();
            store.clear().unwrap();
            let got: Vec<_> = replay(store.as_mut(), &ops).unwrap().into_iter().map(|o| (o.code, o.fetched)).collect();
            assert_eq!(got, expected, "{mode}");
            assert_eq!(store.count().unwrap(), reference.count().unwrap());
        }
    }

    #[test]
    fn reference_reports_out_of_memory_like_the_ta() {
        let region = fill_region(1, 2 * 1024 * 1024);
        let mut r = ReeKv::new(region, 1024);
        let puts: Vec<_> = (0..993).map(|i| KvOp { kind: OpKind::Put, offset: i * 1024 }).collect();
        let codes = replay_codes(&mut r, &puts).unwrap();
        assert!(codes[..992].iter().all(|&c| c == rc::SUCCESS));
        assert_eq!(codes[992], rc::OUT_OF_MEMORY);
    }
}
