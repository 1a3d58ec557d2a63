//! Built-in trusted applications and their UUIDs.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use uuid::{uuid, Uuid};

use crate::error::{Error, Result};
use crate::kv::KvTa;
use crate::storage::MAX_CHUNK;
use crate::tee::{InstanceState, TaContext, TaDescriptor, TaFactory, TaParams, Tee, TrustedApp};

pub const KV_TA_UUID: Uuid = uuid!("c1a5b3d2-4e6f-4a8b-9c0d-1e2f3a4b5c6d");
pub const STORAGE_BENCH_TA_UUID: Uuid = uuid!("f4e3d2c1-b0a9-4876-8543-210fedcba987");
pub const PSEUDO_STATS_UUID: Uuid = uuid!("d96a5b40-e2c7-4c1e-9a2d-3b5f7e9c1a04");

pub fn kv_factory() -> TaFactory {
    Arc::new(|| Box::new(KvTa::new()))
}

pub fn storage_bench_factory() -> TaFactory {
    Arc::new(|| Box::new(StorageBenchTa))
}

pub fn stats_factory() -> TaFactory {
    Arc::new(|| Box::new(StatsPta))
}

/// Installs the built-in TA images into the supplicant and registers the
/// stats pseudo TA.
pub fn install_builtin(tee: &Tee) -> Result<()> {
    let sup = tee.supplicant();
    sup.install_binary(KV_TA_UUID, kv_factory());
    sup.install_binary(STORAGE_BENCH_TA_UUID, storage_bench_factory());
    tee.register_pseudo_ta(TaDescriptor::pseudo(PSEUDO_STATS_UUID), stats_factory())
}

pub mod storage_bench {
    //! Commands of the storage benchmark TA.
    //!
    //! Every command takes `[0]` value `{size, chunk}`. WRITE also takes
    //! `[1]` value `{seed lo, seed hi}`. `[2]` is an output value receiving
    //! `{chunk ops, bytes moved}`. An optional `[3]` out memref of at least
    //! 32 bytes receives the SHA-256 of the bytes read (READ) or written
    //! (WRITE, REWRITE).
    pub const CMD_WRITE: u32 = 0;
    pub const CMD_READ: u32 = 1;
    pub const CMD_REWRITE: u32 = 2;
    pub const CMD_DELETE: u32 = 3;

    pub fn object_id(size: u32) -> Vec<u8> {
        format!("bench-{size}").into_bytes()
    }
}

/// Runs the WRITE / READ / REWRITE secure-storage commands over
/// TEE-generated scrambled data.
struct StorageBenchTa;

impl StorageBenchTa {
    fn finish(params: &mut TaParams<'_>, chunk_ops: u32, bytes: usize, digest: Option<Sha256>) -> Result<()> {
        params.set_value(2, chunk_ops, bytes as u32)?;
        if let Some(d) = digest {
            if params.len() > 3 {
                let out = params.memref_mut(3)?;
                if out.len() < 32 {
                    return Err(Error::ShortBuffer { required: 32 });
                }
                out[..32].copy_from_slice(&d.finalize());
            }
        }
        Ok(())
    }
}

impl TrustedApp for StorageBenchTa {
    fn invoke(&mut self, ctx: &mut TaContext<'_>, _session: u64, command_id: u32, params: &mut TaParams<'_>) -> Result<()> {
        use storage_bench::*;

        let (size, chunk) = params.value(0)?;
        let (size_u, chunk) = (size as usize, chunk as usize);
        if chunk == 0 || chunk > MAX_CHUNK {
            return Err(Error::bad_params(format!("chunk must be 1..={MAX_CHUNK}")));
        }
        let id = object_id(size);
        let storage = ctx.storage()?;

        match command_id {
            CMD_WRITE => {
                let (lo, hi) = params.value(1)?;
                let charge = ctx.alloc(size_u.max(1))?;
                let mut data = vec![0u8; size_u];
                ChaCha8Rng::seed_from_u64(crate::kv::join_key(lo, hi)).fill_bytes(&mut data);
                let result = (|| -> Result<_> {
                    let mut obj = storage.create_object(&id, &[])?;
                    let mut ops = 0;
                    for c in data.chunks(chunk) {
                        storage.write_chunk(&mut obj, c)?;
                        ops += 1;
                    }
                    storage.close_object(obj)?;
                    Ok(ops)
                })();
                ctx.free(charge);
                let ops = result?;
                Self::finish(params, ops, size_u, Some(Sha256::new_with_prefix(&data)))
            }
            CMD_READ => {
                let mut obj = storage.open_object(&id)?;
                let mut hasher = Sha256::new();
                let mut ops = 0;
                let mut total = 0;
                while total < obj.data_len() {
                    let c = storage.read_chunk(&mut obj, chunk)?;
                    hasher.update(&c);
                    total += c.len();
                    ops += 1;
                }
                storage.close_object(obj)?;
                Self::finish(params, ops, total, Some(hasher))
            }
            CMD_REWRITE => {
                let mut obj = storage.open_object(&id)?;
                let len = obj.data_len();
                let charge = ctx.alloc(len.max(1))?;
                let result = (|| -> Result<_> {
                    let mut buf = Vec::with_capacity(len);
                    let mut ops = 0;
                    while buf.len() < len {
                        buf.extend(storage.read_chunk(&mut obj, chunk)?);
                        ops += 1;
                    }
                    storage.seek(&mut obj, 0)?;
                    for c in buf.chunks(chunk) {
                        storage.write_chunk(&mut obj, c)?;
                        ops += 1;
                    }
                    storage.close_object(obj)?;
                    Ok((ops, buf))
                })();
                ctx.free(charge);
                let (ops, buf) = result?;
                Self::finish(params, ops, len, Some(Sha256::new_with_prefix(&buf)))
            }
            CMD_DELETE => {
                let obj = storage.open_object(&id)?;
                storage.delete_object(obj)?;
                Self::finish(params, 0, 0, None)
            }
            other => Err(Error::bad_params(format!("unknown command {other}"))),
        }
    }
}

pub mod stats {
    //! Commands of the stats pseudo TA.
    //!
    //! * `CMD_BOUNDARY`: `[0]` out `{world switches lo, hi}`, `[1]` out `{supplicant RPCs lo, hi}`.
    //! * `CMD_TA_INFO`: `[0]` in memref holding a 16-byte UUID, `[1]` out
    //!   `{heap used, item count}` (item count `u32::MAX` when unknown),
    //!   `[2]` out `{state, sessions}`. `ItemNotFound` when no instance exists.
    //! * `CMD_TRY_STORAGE`: attempts to create a trusted-storage object.
    pub const CMD_BOUNDARY: u32 = 0;
    pub const CMD_TA_INFO: u32 = 1;
    pub const CMD_TRY_STORAGE: u32 = 2;

    pub const STATE_CREATED: u32 = 0;
    pub const STATE_SESSIONS_OPEN: u32 = 1;
    pub const STATE_DESTROYED: u32 = 2;
}

struct StatsPta;

impl TrustedApp for StatsPta {
    fn invoke(&mut self, ctx: &mut TaContext<'_>, _session: u64, command_id: u32, params: &mut TaParams<'_>) -> Result<()> {
        use stats::*;

        match command_id {
            CMD_BOUNDARY => {
                let s = ctx.core()?.read_stats();
                params.set_value(0, s.world_switches as u32, (s.world_switches >> 32) as u32)?;
                params.set_value(1, s.supplicant_rpcs as u32, (s.supplicant_rpcs >> 32) as u32)
            }
            CMD_TA_INFO => {
                let raw = params.memref(0)?;
                let uuid = Uuid::from_slice(raw.get(..16).unwrap_or(raw)).map_err(|_| Error::bad_params("bad uuid"))?;
                if uuid == ctx.uuid() {
                    return Err(Error::bad_params("cannot introspect the calling TA"));
                }
                let info = ctx.core()?.instance_info(&uuid).ok_or(Error::ItemNotFound)?;
                let items = info.item_count.map_or(u32::MAX, |c| c as u32);
                params.set_value(1, info.heap_used as u32, items)?;
                let state = match info.state {
                    InstanceState::Created => STATE_CREATED,
                    InstanceState::SessionsOpen => STATE_SESSIONS_OPEN,
                    InstanceState::Destroyed => STATE_DESTROYED,
                };
                params.set_value(2, state, info.sessions as u32)
            }
            CMD_TRY_STORAGE => {
                ctx.storage()?.create_object(b"pta-probe", b"")?;
                Ok(())
            }
            other => Err(Error::bad_params(format!("unknown command {other}"))),
        }
    }
}
