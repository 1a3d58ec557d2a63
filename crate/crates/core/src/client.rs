//! Normal-world client API: contexts, sessions, shared memory and command
//! invocation, modeled on the GlobalPlatform TEE Client API.
//!
//! All handles come from one monotonic counter per [`Client`] and are never
//! reused. Finalizing a context closes its sessions and releases its shared
//! memory; any later use of those handles fails with `StaleHandle`.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::tee::{ParamView, TaParams, Tee};

pub use crate::tee::Direction;

/// Name of the endpoint registered by [`Client::new`].
pub const DEFAULT_DEVICE: &str = "optee-emu";

pub const MAX_PARAMS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ContextHandle {
    pub id: u64,
    pub device_name: Arc<str>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SessionHandle {
    pub id: u64,
    pub context: u64,
    pub ta: Uuid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShmKind {
    /// Allocated on the TEE side for the life of the context.
    Whole,
    /// Client buffer shared for one command only.
    Temporary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShmLifetime {
    ContextScoped,
    CallScoped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SharedMemoryRegion {
    pub id: u64,
    pub size: usize,
    pub kind: ShmKind,
    pub lifetime: ShmLifetime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameter {
    Value { a: u32, b: u32 },
    /// `(offset, length)` into a region. A reference covering a strict
    /// subset of a whole region is a partial reference.
    MemRef { region: u64, offset: usize, length: usize, direction: Direction },
}

impl Parameter {
    pub fn value(a: u32, b: u32) -> Self {
        Parameter::Value { a, b }
    }

    pub fn memref(region: &SharedMemoryRegion, offset: usize, length: usize, direction: Direction) -> Self {
        Parameter::MemRef { region: region.id, offset, length, direction }
    }

    /// Reference to the entire region.
    pub fn whole(region: &SharedMemoryRegion, direction: Direction) -> Self {
        Self::memref(region, 0, region.size, direction)
    }

    pub fn as_value(&self) -> Option<(u32, u32)> {
        match *self {
            Parameter::Value { a, b } => Some((a, b)),
            Parameter::MemRef { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Operation {
    pub command_id: u32,
    pub params: Vec<Parameter>,
}

impl Operation {
    pub fn new(command_id: u32, params: Vec<Parameter>) -> Self {
        Self { command_id, params }
    }
}

struct ContextEntry {
    tee: Arc<Tee>,
    sessions: BTreeSet<u64>,
    regions: BTreeSet<u64>,
}

struct SessionEntry {
    context: u64,
    tee_session: u64,
    tee: Arc<Tee>,
    /// Serializes commands issued on this session.
    lane: Arc<Mutex<()>>,
}

struct RegionEntry {
    context: u64,
    region: SharedMemoryRegion,
    data: Arc<Mutex<Vec<u8>>>,
    tee: Arc<Tee>,
    /// Temporary regions are consumed by the first command that carries them.
    consumed: bool,
}

#[derive(Default)]
struct State {
    contexts: HashMap<u64, ContextEntry>,
    sessions: HashMap<u64, SessionEntry>,
    regions: HashMap<u64, RegionEntry>,
}

pub struct Client {
    devices: RwLock<HashMap<String, Arc<Tee>>>,
    next_id: AtomicU64,
    state: Mutex<State>,
}

impl Client {
    /// A client with `tee` registered as [`DEFAULT_DEVICE`].
    pub fn new(tee: Arc<Tee>) -> Self {
        let client = Self::without_devices();
        client.register_device(DEFAULT_DEVICE, tee);
        client
    }

    pub fn without_devices() -> Self {
        Self { devices: RwLock::new(HashMap::new()), next_id: AtomicU64::new(1), state: Mutex::new(State::default()) }
    }

    pub fn register_device(&self, name: &str, tee: Arc<Tee>) {
        self.devices.write().insert(name.to_owned(), tee);
    }

    pub fn device(&self, name: &str) -> Option<Arc<Tee>> {
        self.devices.read().get(name).cloned()
    }

    fn next_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::SeqCst)
    }

    pub fn initialize_context(&self, device_name: &str) -> Result<ContextHandle> {
        let tee = self.device(device_name).ok_or_else(|| Error::UnknownDevice(device_name.to_owned()))?;
        let id = self.next_id();
        self.state
            .lock()
            .contexts
            .insert(id, ContextEntry { tee, sessions: BTreeSet::new(), regions: BTreeSet::new() });
        Ok(ContextHandle { id, device_name: device_name.into() })
    }

    pub fn finalize_context(&self, ctx: &ContextHandle) -> Result<()> {
        let (entry, sessions, regions) = {
            let mut st = self.state.lock();
            let entry = st.contexts.remove(&ctx.id).ok_or(Error::StaleHandle(ctx.id))?;
            let sessions: Vec<SessionEntry> = entry.sessions.iter().filter_map(|s| st.sessions.remove(s)).collect();
            let regions: Vec<RegionEntry> = entry.regions.iter().filter_map(|r| st.regions.remove(r)).collect();
            (entry, sessions, regions)
        };
        for s in sessions {
            let _lane = s.lane.lock();
            // a dead or already-reaped TEE session still counts as closed here
            let _ = s.tee.close_session(s.tee_session);
        }
        for r in regions {
            release(&r);
        }
        drop(entry);
        Ok(())
    }

    pub fn open_session(&self, ctx: &ContextHandle, ta: Uuid) -> Result<SessionHandle> {
        let tee = {
            let st = self.state.lock();
            Arc::clone(&st.contexts.get(&ctx.id).ok_or(Error::StaleHandle(ctx.id))?.tee)
        };
        let tee_session = tee.open_session(ta)?;
        let id = self.next_id();
        let mut st = self.state.lock();
        match st.contexts.get_mut(&ctx.id) {
            Some(c) => {
                c.sessions.insert(id);
            }
            None => {
                // context finalized concurrently
                drop(st);
                let _ = tee.close_session(tee_session);
                return Err(Error::StaleHandle(ctx.id));
            }
        }
        st.sessions
            .insert(id, SessionEntry { context: ctx.id, tee_session, tee, lane: Arc::new(Mutex::new(())) });
        Ok(SessionHandle { id, context: ctx.id, ta })
    }

    pub fn close_session(&self, s: &SessionHandle) -> Result<()> {
        let entry = {
            let mut st = self.state.lock();
            let entry = st.sessions.remove(&s.id).ok_or(Error::StaleHandle(s.id))?;
            if let Some(c) = st.contexts.get_mut(&entry.context) {
                c.sessions.remove(&s.id);
            }
            entry
        };
        let _lane = entry.lane.lock();
        entry.tee.close_session(entry.tee_session)
    }

    pub fn setup_shared_memory(&self, ctx: &ContextHandle, size: usize, kind: ShmKind) -> Result<SharedMemoryRegion> {
        if size == 0 {
            return Err(Error::bad_params("shared memory size must be positive"));
        }
        let mut st = self.state.lock();
        let tee = Arc::clone(&st.contexts.get(&ctx.id).ok_or(Error::StaleHandle(ctx.id))?.tee);
        tee.shm_reserve(size)?;
        let id = self.next_id();
        let lifetime = match kind {
            ShmKind::Whole => ShmLifetime::ContextScoped,
            ShmKind::Temporary => ShmLifetime::CallScoped,
        };
        let region = SharedMemoryRegion { id, size, kind, lifetime };
        st.contexts.get_mut(&ctx.id).expect("checked above").regions.insert(id);
        st.regions.insert(
            id,
            RegionEntry { context: ctx.id, region, data: Arc::new(Mutex::new(vec![0; size])), tee, consumed: false },
        );
        Ok(region)
    }

    /// Client-side write into a region's memory.
    pub fn write_shared_memory(&self, region: &SharedMemoryRegion, offset: usize, bytes: &[u8]) -> Result<()> {
        let data = self.region_data(region.id)?;
        let mut buf = data.lock();
        let dst = bounded(&mut buf, offset, bytes.len())?;
        dst.copy_from_slice(bytes);
        Ok(())
    }

    /// Client-side read of a region's memory. Temporary regions stay
    /// readable after their command until released.
    pub fn read_shared_memory(&self, region: &SharedMemoryRegion, offset: usize, len: usize) -> Result<Vec<u8>> {
        let data = self.region_data(region.id)?;
        let mut buf = data.lock();
        Ok(bounded(&mut buf, offset, len)?.to_vec())
    }

    /// Runs `f` over the region's whole buffer.
    pub fn with_shared_memory<R>(&self, region: &SharedMemoryRegion, f: impl FnOnce(&mut [u8]) -> R) -> Result<R> {
        let data = self.region_data(region.id)?;
        let mut buf = data.lock();
        Ok(f(&mut buf))
    }

    pub fn release_shared_memory(&self, region: &SharedMemoryRegion) -> Result<()> {
        let entry = {
            let mut st = self.state.lock();
            let entry = st.regions.remove(&region.id).ok_or(Error::StaleHandle(region.id))?;
            if let Some(c) = st.contexts.get_mut(&entry.context) {
                c.regions.remove(&region.id);
            }
            entry
        };
        release(&entry);
        Ok(())
    }

    fn region_data(&self, id: u64) -> Result<Arc<Mutex<Vec<u8>>>> {
        let st = self.state.lock();
        Ok(Arc::clone(&st.regions.get(&id).ok_or(Error::StaleHandle(id))?.data))
    }

    /// Sends `op` to the TA behind `s` and returns the TA's return code with
    /// the operation as updated by the TA.
    pub fn invoke_command(&self, s: &SessionHandle, mut op: Operation) -> Result<(u32, Operation)> {
        if op.params.len() > MAX_PARAMS {
            return Err(Error::bad_params(format!("{} parameters, at most {MAX_PARAMS}", op.params.len())));
        }
        let (tee, tee_session, lane, buffers, temporaries) = {
            let st = self.state.lock();
            let entry = st.sessions.get(&s.id).ok_or(Error::StaleHandle(s.id))?;
            let mut buffers: Vec<(u64, Arc<Mutex<Vec<u8>>>)> = Vec::new();
            let mut temporaries = Vec::new();
            for p in &op.params {
                let Parameter::MemRef { region, offset, length, .. } = *p else { continue };
                let r = st.regions.get(&region).ok_or(Error::StaleHandle(region))?;
                if r.context != entry.context {
                    return Err(Error::bad_params(format!("region {region} belongs to another context")));
                }
                if r.consumed {
                    return Err(Error::StaleHandle(region));
                }
                match offset.checked_add(length) {
                    Some(end) if end <= r.region.size => {}
                    _ => {
                        return Err(Error::bad_params(format!(
                            "memref [{offset}, +{length}) outside region of {} bytes",
                            r.region.size
                        )))
                    }
                }
                if !buffers.iter().any(|(id, _)| *id == region) {
                    buffers.push((region, Arc::clone(&r.data)));
                    if r.region.kind == ShmKind::Temporary {
                        temporaries.push(region);
                    }
                }
            }
            (Arc::clone(&entry.tee), entry.tee_session, Arc::clone(&entry.lane), buffers, temporaries)
        };

        let _lane = lane.lock();
        // lock order: ascending region id
        let mut order: Vec<usize> = (0..buffers.len()).collect();
        order.sort_by_key(|&i| buffers[i].0);
        let mut guards: Vec<_> = order.iter().map(|&i| (buffers[i].0, buffers[i].1.lock())).collect();
        let views: Vec<ParamView> = op
            .params
            .iter()
            .map(|p| match *p {
                Parameter::Value { a, b } => ParamView::Value { a, b },
                Parameter::MemRef { region, offset, length, direction } => ParamView::Mem {
                    buffer: guards.iter().position(|(id, _)| *id == region).expect("region locked above"),
                    offset,
                    length,
                    direction,
                },
            })
            .collect();
        let slices: Vec<&mut [u8]> = guards.iter_mut().map(|(_, g)| g.as_mut_slice()).collect();
        let mut params = TaParams::new(views, slices)?;
        let result = tee.invoke(tee_session, op.command_id, &mut params);
        for (p, v) in op.params.iter_mut().zip(params.views()) {
            if let (Parameter::Value { a, b }, ParamView::Value { a: na, b: nb }) = (p, v) {
                *a = *na;
                *b = *nb;
            }
        }
        drop(params);
        drop(guards);

        if !temporaries.is_empty() {
            let mut st = self.state.lock();
            for id in temporaries {
                if let Some(r) = st.regions.get_mut(&id) {
                    r.consumed = true;
                }
            }
        }
        Ok((result?, op))
    }

    /// Whether the session's TA instance is still alive.
    pub fn session_alive(&self, s: &SessionHandle) -> bool {
        let st = self.state.lock();
        st.sessions.get(&s.id).is_some_and(|e| e.tee.session_alive(e.tee_session))
    }
}

fn bounded(buf: &mut [u8], offset: usize, len: usize) -> Result<&mut [u8]> {
    match offset.checked_add(len) {
        Some(end) if end <= buf.len() => Ok(&mut buf[offset..end]),
        _ => Err(Error::bad_params("access outside shared memory region")),
    }
}

fn release(r: &RegionEntry) {
    r.tee.shm_release(r.region.size);
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let st = self.state.lock();
        f.debug_struct("Client")
            .field("contexts", &st.contexts.len())
            .field("sessions", &st.sessions.len())
            .field("regions", &st.regions.len())
            .finish()
    }
}
