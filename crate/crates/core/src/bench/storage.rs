//! Secure-storage benchmark: WRITE, READ and REWRITE of one object per size,
//! driven through the storage-bench TA.

use std::time::Instant;

use super::{BenchKind, Sample, StorageCommand};
use crate::client::{Client, ContextHandle, Operation, Parameter, SessionHandle, SharedMemoryRegion, ShmKind};
use crate::error::{rc, Error, Result};
use crate::kv::split_key;
use crate::storage::{MAX_CHUNK, MAX_OBJECT_SIZE};
use crate::ta::{storage_bench, STORAGE_BENCH_TA_UUID};
use crate::tee::Direction;

#[derive(Debug, Clone)]
pub struct StorageBenchConfig {
    pub commands: Vec<StorageCommand>,
    pub sizes: Vec<u64>,
    pub chunk: usize,
    pub repetitions: usize,
    pub seed: u64,
    /// Have the TA hash the data and check READ/REWRITE against WRITE.
    pub verify: bool,
}

impl Default for StorageBenchConfig {
    fn default() -> Self {
        Self {
            commands: StorageCommand::ALL.to_vec(),
            sizes: super::default_sizes(),
            chunk: MAX_CHUNK,
            repetitions: 10,
            seed: 0,
            verify: false,
        }
    }
}

impl StorageBenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 || self.chunk > MAX_CHUNK {
            return Err(Error::Config(format!("chunk must be 1..={MAX_CHUNK}")));
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&s| s == 0 || s as usize > MAX_OBJECT_SIZE) {
            return Err(Error::Config(format!("sizes must be 1..={MAX_OBJECT_SIZE}")));
        }
        if self.repetitions == 0 || self.commands.is_empty() {
            return Err(Error::Config("need at least one command and repetition".into()));
        }
        Ok(())
    }
}

/// Outcome of one storage-bench command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandOutcome {
    pub code: u32,
    pub chunk_ops: u32,
    pub bytes: u32,
    pub digest: Option<[u8; 32]>,
    pub service_ns: u64,
}

/// A session to the storage-bench TA plus a digest buffer.
pub struct StorageBench<'c> {
    client: &'c Client,
    ctx: ContextHandle,
    session: SessionHandle,
    digest: SharedMemoryRegion,
    chunk: usize,
    seed: u64,
}

impl<'c> StorageBench<'c> {
    pub fn new(client: &'c Client, device: &str, chunk: usize, seed: u64) -> Result<Self> {
        let ctx = client.initialize_context(device)?;
        let open = || -> Result<_> {
            let session = client.open_session(&ctx, STORAGE_BENCH_TA_UUID)?;
            let digest = client.setup_shared_memory(&ctx, 32, ShmKind::Whole)?;
            Ok((session, digest))
        };
        match open() {
            Ok((session, digest)) => Ok(Self { client, ctx, session, digest, chunk, seed }),
            Err(e) => {
                let _ = client.finalize_context(&ctx);
                Err(e)
            }
        }
    }

    fn invoke(&self, command: u32, size: u64, verify: bool) -> Result<CommandOutcome> {
        let (lo, hi) = split_key(self.seed);
        let mut params =
            vec![Parameter::value(size as u32, self.chunk as u32), Parameter::value(lo, hi), Parameter::value(0, 0)];
        if verify {
            params.push(Parameter::whole(&self.digest, Direction::Out));
        }
        let t = Instant::now();
        let result = self.client.invoke_command(&self.session, Operation::new(command, params));
        let service_ns = (t.elapsed().as_nanos() as u64).max(1);
        let (code, op) = match result {
            Ok((code, op)) => (code, Some(op)),
            Err(e) => (e.code(), None),
        };
        let (chunk_ops, bytes) = op.as_ref().and_then(|o| o.params[2].as_value()).unwrap_or((0, 0));
        let digest = if verify && code == rc::SUCCESS {
            let d = self.client.read_shared_memory(&self.digest, 0, 32)?;
            Some(d.try_into().expect("32 bytes"))
        } else {
            None
        };
        Ok(CommandOutcome { code, chunk_ops, bytes, digest, service_ns })
    }

    pub fn run(&self, command: StorageCommand, size: u64, verify: bool) -> Result<CommandOutcome> {
        let id = match command {
            StorageCommand::Write => storage_bench::CMD_WRITE,
            StorageCommand::Read => storage_bench::CMD_READ,
            StorageCommand::Rewrite => storage_bench::CMD_REWRITE,
        };
        self.invoke(id, size, verify)
    }

    /// Removes the object for `size`; a missing object is not an error.
    pub fn delete(&self, size: u64) -> Result<()> {
        let out = self.invoke(storage_bench::CMD_DELETE, size, false)?;
        match out.code {
            rc::SUCCESS | rc::ITEM_NOT_FOUND => Ok(()),
            code => Err(Error::Config(format!("DELETE of {size} B object failed with {code:#010x}"))),
        }
    }
}

impl Drop for StorageBench<'_> {
    fn drop(&mut self) {
        let _ = self.client.finalize_context(&self.ctx);
    }
}

fn expect_ok(out: &CommandOutcome, what: &str, size: u64) -> Result<()> {
    if out.code != rc::SUCCESS {
        return Err(Error::Config(format!("{what} of {size} B failed with {:#010x}", out.code)));
    }
    Ok(())
}

/// For each size: WRITE reps each start from a deleted object; READ and
/// REWRITE reps run on the object left by the last WRITE (created untimed
/// if WRITE is not selected). The object is deleted afterwards.
pub fn run_storage_bench(client: &Client, device: &str, cfg: &StorageBenchConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let bench = StorageBench::new(client, device, cfg.chunk, cfg.seed)?;
    let mut samples = Vec::new();
    let sample = |cmd: StorageCommand, size: u64, rep: usize, out: &CommandOutcome| Sample {
        bench: BenchKind::Storage,
        workload: cmd.to_string(),
        shm: "none".to_owned(),
        rate_or_size: size,
        op: cmd.to_string(),
        service_ns: out.service_ns,
        issue_fs: rep as u128,
        code: out.code,
        chunk_ops: Some(out.chunk_ops),
    };

    for &size in &cfg.sizes {
        let mut written = None;
        if cfg.commands.contains(&StorageCommand::Write) {
            for rep in 0..cfg.repetitions {
                bench.delete(size)?;
                let out = bench.run(StorageCommand::Write, size, cfg.verify)?;
                expect_ok(&out, "WRITE", size)?;
                written = out.digest;
                samples.push(sample(StorageCommand::Write, size, rep, &out));
            }
        } else {
            bench.delete(size)?;
            let out = bench.run(StorageCommand::Write, size, cfg.verify)?;
            expect_ok(&out, "WRITE", size)?;
            written = out.digest;
        }
        for cmd in [StorageCommand::Read, StorageCommand::Rewrite] {
            if !cfg.commands.contains(&cmd) {
                continue;
            }
            for rep in 0..cfg.repetitions {
                let out = bench.run(cmd, size, cfg.verify)?;
                expect_ok(&out, &cmd.to_string(), size)?;
                if cfg.verify && out.digest != written {
                    return Err(Error::CorruptObject);
                }
                samples.push(sample(cmd, size, rep, &out));
            }
        }
        bench.delete(size)?;
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tee::{Tee, TeeConfig};
    use crate::DEFAULT_DEVICE;

    #[test]
    fn chunk_counts_and_digests() {
        let client = Client::new(Tee::new(TeeConfig::default()).unwrap());
        let cfg = StorageBenchConfig {
            sizes: vec![256, 1024, 1500, 4096],
            repetitions: 2,
            seed: 7,
            verify: true,
            ..Default::default()
        };
        let samples = run_storage_bench(&client, DEFAULT_DEVICE, &cfg).unwrap();
        assert_eq!(samples.len(), 4 * 3 * 2);
        for s in &samples {
            let phase = s.rate_or_size.div_ceil(1024) as u32;
            let expected = if s.op == "REWRITE" { 2 * phase } else { phase };
            assert_eq!(s.chunk_ops, Some(expected), "{} {}", s.op, s.rate_or_size);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let client = Client::new(Tee::new(TeeConfig::default()).unwrap());
        for cfg in [
            StorageBenchConfig { chunk: 2048, ..Default::default() },
            StorageBenchConfig { sizes: vec![(1 << 20) + 1], ..Default::default() },
            StorageBenchConfig { repetitions: 0, ..Default::default() },
        ] {
            assert!(matches!(run_storage_bench(&client, DEFAULT_DEVICE, &cfg), Err(Error::Config(_))));
        }
    }
}
