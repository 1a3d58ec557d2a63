//! C ABI over the teekv client API.
//!
//! Every call returns a `u32` result code (`TEEKV_SUCCESS` or one of the
//! GlobalPlatform-style codes). Contexts, sessions and shared-memory regions
//! are plain `u64` handles scoped to a `TeekvClient`. When a call fails, a
//! description is available from `teekv_last_error` on the same thread.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::{Arc, Mutex};

use teekv::storage::keys::{derive_ssk, derive_tsk, Huk};
use teekv::tee::Direction;
use teekv::{
    rc, Client, ContextHandle, Error, Operation, Parameter, SessionHandle, SharedMemoryRegion, ShmKind, Tee, TeeConfig,
    Uuid, DEFAULT_DEVICE,
};

// Literal values so cbindgen can emit them; checked against `rc` in tests.
pub const TEEKV_SUCCESS: u32 = 0;
pub const TEEKV_ERROR_GENERIC: u32 = 0xFFFF0000;
pub const TEEKV_ERROR_ACCESS_DENIED: u32 = 0xFFFF0001;
pub const TEEKV_ERROR_ACCESS_CONFLICT: u32 = 0xFFFF0003;
pub const TEEKV_ERROR_BAD_PARAMETERS: u32 = 0xFFFF0006;
pub const TEEKV_ERROR_BAD_STATE: u32 = 0xFFFF0007;
pub const TEEKV_ERROR_ITEM_NOT_FOUND: u32 = 0xFFFF0008;
pub const TEEKV_ERROR_OUT_OF_MEMORY: u32 = 0xFFFF000C;
pub const TEEKV_ERROR_COMMUNICATION: u32 = 0xFFFF000E;
pub const TEEKV_ERROR_SECURITY: u32 = 0xFFFF000F;
pub const TEEKV_ERROR_SHORT_BUFFER: u32 = 0xFFFF0010;
pub const TEEKV_ERROR_TARGET_DEAD: u32 = 0xFFFF3024;
pub const TEEKV_ERROR_STORAGE_NO_SPACE: u32 = 0xFFFF3041;
pub const TEEKV_ERROR_CORRUPT_OBJECT: u32 = 0xF0100001;

pub const TEEKV_PARAM_NONE: u32 = 0;
pub const TEEKV_PARAM_VALUE: u32 = 1;
pub const TEEKV_PARAM_MEMREF: u32 = 2;

pub const TEEKV_DIR_IN: u32 = 0;
pub const TEEKV_DIR_OUT: u32 = 1;
pub const TEEKV_DIR_INOUT: u32 = 2;

pub const TEEKV_SHM_WHOLE: u32 = 0;
pub const TEEKV_SHM_TEMPORARY: u32 = 1;

pub const TEEKV_MAX_PARAMS: usize = 4;

/// One command parameter. For `TEEKV_PARAM_VALUE` only `a` and `b` are
/// used and are updated in place after the call; for `TEEKV_PARAM_MEMREF`
/// `region`, `offset`, `length` and `direction` describe the reference.
/// `TEEKV_PARAM_NONE` entries are skipped.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TeekvParam {
    pub kind: u32,
    pub a: u32,
    pub b: u32,
    pub direction: u32,
    pub region: u64,
    pub offset: u64,
    pub length: u64,
}

#[derive(Default)]
struct Handles {
    contexts: HashMap<u64, ContextHandle>,
    sessions: HashMap<u64, SessionHandle>,
    /// region id -> (owning context, region)
    regions: HashMap<u64, (u64, SharedMemoryRegion)>,
}

/// Opaque client: an emulated TEE plus the handles opened through it.
pub struct TeekvClient {
    client: Client,
    tee: Arc<Tee>,
    handles: Mutex<Handles>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

/// Runs `f`, converting errors and panics into result codes.
fn guard(f: impl FnOnce() -> Result<u32, Error>) -> u32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(code)) => code,
        Ok(Err(e)) => {
            set_error(e.to_string());
            e.code()
        }
        Err(_) => {
            set_error("panic inside teekv".into());
            rc::GENERIC
        }
    }
}

fn null(what: &str) -> Error {
    Error::BadParameters(format!("{what} is null"))
}

unsafe fn client<'a>(c: *const TeekvClient) -> Result<&'a TeekvClient, Error> {
    c.as_ref().ok_or_else(|| null("client"))
}

unsafe fn uuid_arg(p: *const u8) -> Result<Uuid, Error> {
    if p.is_null() {
        return Err(null("uuid"));
    }
    Ok(Uuid::from_bytes(*(p as *const [u8; 16])))
}

unsafe fn key_arg(p: *const u8, what: &str) -> Result<[u8; 32], Error> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(*(p as *const [u8; 32]))
}

unsafe fn out<T>(p: *mut T, v: T) -> Result<(), Error> {
    if p.is_null() {
        return Err(null("output pointer"));
    }
    p.write(v);
    Ok(())
}

impl TeekvClient {
    fn context(&self, id: u64) -> Result<ContextHandle, Error> {
        self.handles.lock().unwrap().contexts.get(&id).cloned().ok_or(Error::StaleHandle(id))
    }

    fn session(&self, id: u64) -> Result<SessionHandle, Error> {
        self.handles.lock().unwrap().sessions.get(&id).copied().ok_or(Error::StaleHandle(id))
    }

    fn region(&self, id: u64) -> Result<SharedMemoryRegion, Error> {
        self.handles.lock().unwrap().regions.get(&id).map(|r| r.1).ok_or(Error::StaleHandle(id))
    }
}

/// Creates an emulated TEE with the built-in TAs and a client bound to it.
/// `store_root` may be null for a private temporary directory.
///
/// # Safety
/// `store_root` is null or a NUL-terminated string; `out_client` is valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn teekv_client_new(store_root: *const c_char, out_client: *mut *mut TeekvClient) -> u32 {
    guard(|| {
        let mut cfg = TeeConfig::default();
        if !store_root.is_null() {
            let s = CStr::from_ptr(store_root).to_str().map_err(|_| Error::BadParameters("store_root is not UTF-8".into()))?;
            std::fs::create_dir_all(s)?;
            cfg.store_root = Some(PathBuf::from(s));
        }
        let tee = Tee::new(cfg)?;
        let c = Box::new(TeekvClient { client: Client::new(Arc::clone(&tee)), tee, handles: Mutex::default() });
        out(out_client, Box::into_raw(c))?;
        Ok(rc::SUCCESS)
    })
}

/// Finalizes every open context and frees the client. Null is ignored.
///
/// # Safety
/// `c` is null or was returned by `teekv_client_new` and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn teekv_client_free(c: *mut TeekvClient) {
    if c.is_null() {
        return;
    }
    let c = Box::from_raw(c);
    let contexts: Vec<_> = c.handles.lock().map(|h| h.contexts.values().cloned().collect()).unwrap_or_default();
    for ctx in contexts {
        let _ = c.client.finalize_context(&ctx);
    }
}

/// Opens a context on `device` (null for the default device).
///
/// # Safety
/// `c` is a live client; `device` is null or NUL-terminated; `out_ctx` is
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn teekv_context_open(c: *const TeekvClient, device: *const c_char, out_ctx: *mut u64) -> u32 {
    guard(|| {
        let c = client(c)?;
        let name = if device.is_null() {
            DEFAULT_DEVICE.to_owned()
        } else {
            CStr::from_ptr(device).to_string_lossy().into_owned()
        };
        let ctx = c.client.initialize_context(&name)?;
        out(out_ctx, ctx.id)?;
        c.handles.lock().unwrap().contexts.insert(ctx.id, ctx);
        Ok(rc::SUCCESS)
    })
}

/// Finalizes a context together with its sessions and regions.
///
/// # Safety
/// `c` is a live client.
#[no_mangle]
pub unsafe extern "C" fn teekv_context_close(c: *const TeekvClient, ctx: u64) -> u32 {
    guard(|| {
        let c = client(c)?;
        let handle = c.context(ctx)?;
        c.client.finalize_context(&handle)?;
        let mut h = c.handles.lock().unwrap();
        h.contexts.remove(&ctx);
        h.sessions.retain(|_, s| s.context != ctx);
        h.regions.retain(|_, r| r.0 != ctx);
        Ok(rc::SUCCESS)
    })
}

/// Opens a session to the TA with the given 16-byte UUID.
///
/// # Safety
/// `c` is a live client; `uuid` points to 16 bytes; `out_session` is valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn teekv_session_open(
    c: *const TeekvClient,
    ctx: u64,
    uuid: *const u8,
    out_session: *mut u64,
) -> u32 {
    guard(|| {
        let c = client(c)?;
        let ta = uuid_arg(uuid)?;
        let s = c.client.open_session(&c.context(ctx)?, ta)?;
        out(out_session, s.id)?;
        c.handles.lock().unwrap().sessions.insert(s.id, s);
        Ok(rc::SUCCESS)
    })
}

/// # Safety
/// `c` is a live client.
#[no_mangle]
pub unsafe extern "C" fn teekv_session_close(c: *const TeekvClient, session: u64) -> u32 {
    guard(|| {
        let c = client(c)?;
        let s = c.session(session)?;
        c.handles.lock().unwrap().sessions.remove(&session);
        c.client.close_session(&s)?;
        Ok(rc::SUCCESS)
    })
}

/// Allocates a zero-filled region of `kind` `TEEKV_SHM_WHOLE` or
/// `TEEKV_SHM_TEMPORARY`.
///
/// # Safety
/// `c` is a live client; `out_region` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn teekv_shm_alloc(c: *const TeekvClient, ctx: u64, size: usize, kind: u32, out_region: *mut u64) -> u32 {
    guard(|| {
        let c = client(c)?;
        let kind = match kind {
            TEEKV_SHM_WHOLE => ShmKind::Whole,
            TEEKV_SHM_TEMPORARY => ShmKind::Temporary,
            other => return Err(Error::BadParameters(format!("unknown shared-memory kind {other}"))),
        };
        let r = c.client.setup_shared_memory(&c.context(ctx)?, size, kind)?;
        out(out_region, r.id)?;
        c.handles.lock().unwrap().regions.insert(r.id, (ctx, r));
        Ok(rc::SUCCESS)
    })
}

/// Copies `len` bytes from `data` into the region at `offset`.
///
/// # Safety
/// `c` is a live client; `data` is valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn teekv_shm_write(c: *const TeekvClient, region: u64, offset: usize, data: *const u8, len: usize) -> u32 {
    guard(|| {
        let c = client(c)?;
        let bytes = if len == 0 {
            &[][..]
        } else if data.is_null() {
            return Err(null("data"));
        } else {
            std::slice::from_raw_parts(data, len)
        };
        c.client.write_shared_memory(&c.region(region)?, offset, bytes)?;
        Ok(rc::SUCCESS)
    })
}

/// Copies `len` bytes at `offset` out of the region into `buf`.
///
/// # Safety
/// `c` is a live client; `buf` is valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn teekv_shm_read(c: *const TeekvClient, region: u64, offset: usize, buf: *mut u8, len: usize) -> u32 {
    guard(|| {
        let c = client(c)?;
        let data = c.client.read_shared_memory(&c.region(region)?, offset, len)?;
        if len > 0 {
            if buf.is_null() {
                return Err(null("buf"));
            }
            ptr::copy_nonoverlapping(data.as_ptr(), buf, len);
        }
        Ok(rc::SUCCESS)
    })
}

/// # Safety
/// `c` is a live client.
#[no_mangle]
pub unsafe extern "C" fn teekv_shm_release(c: *const TeekvClient, region: u64) -> u32 {
    guard(|| {
        let c = client(c)?;
        let r = c.region(region)?;
        c.handles.lock().unwrap().regions.remove(&region);
        c.client.release_shared_memory(&r)?;
        Ok(rc::SUCCESS)
    })
}

fn to_parameter(p: &TeekvParam) -> Result<Option<Parameter>, Error> {
    Ok(match p.kind {
        TEEKV_PARAM_NONE => None,
        TEEKV_PARAM_VALUE => Some(Parameter::value(p.a, p.b)),
        TEEKV_PARAM_MEMREF => {
            let direction = match p.direction {
                TEEKV_DIR_IN => Direction::In,
                TEEKV_DIR_OUT => Direction::Out,
                TEEKV_DIR_INOUT => Direction::InOut,
                other => return Err(Error::BadParameters(format!("unknown direction {other}"))),
            };
            let conv = |v: u64| usize::try_from(v).map_err(|_| Error::BadParameters("offset overflow".into()));
            Some(Parameter::MemRef { region: p.region, offset: conv(p.offset)?, length: conv(p.length)?, direction })
        }
        other => return Err(Error::BadParameters(format!("unknown parameter kind {other}"))),
    })
}

/// Invokes `command` on a session. Returns the TA's result code; value
/// parameters are updated in place.
///
/// # Safety
/// `c` is a live client; `params` is valid for `n` reads and writes (or
/// null when `n` is 0).
#[no_mangle]
pub unsafe extern "C" fn teekv_invoke(
    c: *const TeekvClient,
    session: u64,
    command: u32,
    params: *mut TeekvParam,
    n: usize,
) -> u32 {
    guard(|| {
        let c = client(c)?;
        if n > TEEKV_MAX_PARAMS {
            return Err(Error::BadParameters(format!("{n} parameters, at most {TEEKV_MAX_PARAMS}")));
        }
        let slots: &mut [TeekvParam] = if n == 0 {
            &mut []
        } else if params.is_null() {
            return Err(null("params"));
        } else {
            std::slice::from_raw_parts_mut(params, n)
        };
        let mut used = Vec::new();
        let mut list = Vec::new();
        for (i, p) in slots.iter().enumerate() {
            if let Some(param) = to_parameter(p)? {
                used.push(i);
                list.push(param);
            }
        }
        let s = c.session(session)?;
        let (code, op) = c.client.invoke_command(&s, Operation::new(command, list))?;
        for (&i, p) in used.iter().zip(&op.params) {
            if let Some((a, b)) = p.as_value() {
                slots[i].a = a;
                slots[i].b = b;
            }
        }
        Ok(code)
    })
}

/// Boundary counters of the client's TEE.
///
/// # Safety
/// `c` is a live client; the output pointers are valid for writes.
#[no_mangle]
pub unsafe extern "C" fn teekv_stats(c: *const TeekvClient, world_switches: *mut u64, supplicant_rpcs: *mut u64) -> u32 {
    guard(|| {
        let s = client(c)?.tee.read_stats();
        out(world_switches, s.world_switches)?;
        out(supplicant_rpcs, s.supplicant_rpcs)?;
        Ok(rc::SUCCESS)
    })
}

/// SSK = HMAC-SHA256(huk, "ssk-derivation-v1").
///
/// # Safety
/// `huk` points to 32 readable bytes, `out_ssk` to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn teekv_derive_ssk(huk: *const u8, out_ssk: *mut u8) -> u32 {
    guard(|| {
        let ssk = derive_ssk(&Huk::provisioned(key_arg(huk, "huk")?));
        out(out_ssk as *mut [u8; 32], *ssk.bytes())?;
        Ok(rc::SUCCESS)
    })
}

/// TSK = HMAC-SHA256(SSK(huk), uuid).
///
/// # Safety
/// `huk` points to 32 readable bytes, `uuid` to 16, `out_tsk` to 32
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn teekv_derive_tsk(huk: *const u8, uuid: *const u8, out_tsk: *mut u8) -> u32 {
    guard(|| {
        let ssk = derive_ssk(&Huk::provisioned(key_arg(huk, "huk")?));
        let tsk = derive_tsk(&ssk, &uuid_arg(uuid)?);
        out(out_tsk as *mut [u8; 32], *tsk.bytes())?;
        Ok(rc::SUCCESS)
    })
}

/// Copies the built-in key-value TA's UUID into `out_uuid` (16 bytes).
///
/// # Safety
/// `out_uuid` is valid for 16 writes.
#[no_mangle]
pub unsafe extern "C" fn teekv_kv_ta_uuid(out_uuid: *mut u8) -> u32 {
    guard(|| {
        out(out_uuid as *mut [u8; 16], *teekv::ta::KV_TA_UUID.as_bytes())?;
        Ok(rc::SUCCESS)
    })
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len`, into `buf`. Returns the full message length.
///
/// # Safety
/// `buf` is null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn teekv_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
