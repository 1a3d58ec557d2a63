//! The emulated secure world.
//!
//! [`Tee`] owns the TA registry, one instance per TA UUID, the shared-memory
//! pool accounting, the boundary counters and the secure-storage service.
//! Every entry into the secure world (session open, command, session close)
//! is one recorded world switch; commands into one instance run under that
//! instance's lock so a TA never sees two commands at once.

use std::collections::HashMap;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::storage::{Huk, SecureStorage, StorageClient};
use crate::supplicant::{self, LoadedTa, Manifest, RpcRequest, RpcResponse, StoreRoot, Supplicant};

pub const DEFAULT_TA_MEMORY_LIMIT: usize = 1 << 20;
pub const DEFAULT_SHM_POOL_SIZE: usize = 4 << 20;

/// World switches recorded by one open/close session pair (one round trip
/// each). After opening a session, issuing N commands and closing it, the
/// world-switch counter has advanced by exactly `N + SESSION_WORLD_SWITCHES`.
pub const SESSION_WORLD_SWITCHES: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaKind {
    User,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaDescriptor {
    pub uuid: Uuid,
    pub kind: TaKind,
    pub memory_limit: usize,
}

impl TaDescriptor {
    pub fn pseudo(uuid: Uuid) -> Self {
        Self { uuid, kind: TaKind::Pseudo, memory_limit: DEFAULT_TA_MEMORY_LIMIT }
    }
}

/// Produces a fresh TA instance; stands in for the TA binary.
pub type TaFactory = Arc<dyn Fn() -> Box<dyn TrustedApp> + Send + Sync>;

/// Entry points of a trusted application.
///
/// Hooks returning `Err(e)` from `invoke` report `e.code()` to the client.
/// A panic in any hook kills the instance.
pub trait TrustedApp: Send {
    fn create(&mut self, _ctx: &mut TaContext<'_>) -> Result<()> {
        Ok(())
    }

    fn open_session(&mut self, _ctx: &mut TaContext<'_>, _session: u64) -> Result<()> {
        Ok(())
    }

    fn invoke(&mut self, ctx: &mut TaContext<'_>, session: u64, command_id: u32, params: &mut TaParams<'_>) -> Result<()>;

    fn close_session(&mut self, _ctx: &mut TaContext<'_>, _session: u64) {}

    /// Number of items the TA holds, for introspection by core services.
    fn item_count(&self) -> Option<u64> {
        None
    }
}

/// Token for bytes charged against a TA's memory limit. Hand it back to
/// [`TaHeap::free`] to release the charge.
#[derive(Debug, PartialEq, Eq)]
#[must_use]
pub struct HeapAllocation {
    size: usize,
}

impl HeapAllocation {
    pub fn size(&self) -> usize {
        self.size
    }
}

/// Per-instance accounting of explicit TA allocations.
#[derive(Debug, Clone)]
pub struct TaHeap {
    used: usize,
    limit: usize,
}

impl TaHeap {
    pub fn new(limit: usize) -> Self {
        Self { used: 0, limit }
    }

    pub fn alloc(&mut self, n: usize) -> Result<HeapAllocation> {
        if n == 0 {
            return Err(Error::bad_params("zero-sized TA allocation"));
        }
        match self.used.checked_add(n) {
            Some(total) if total <= self.limit => {
                self.used = total;
                Ok(HeapAllocation { size: n })
            }
            _ => Err(Error::OutOfMemory),
        }
    }

    pub fn free(&mut self, a: HeapAllocation) {
        self.used -= a.size;
    }

    /// Resizes an allocation as if it were freed and re-allocated. On
    /// failure the allocation keeps its old size.
    pub fn realloc(&mut self, a: &mut HeapAllocation, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::bad_params("zero-sized TA allocation"));
        }
        let base = self.used - a.size;
        match base.checked_add(n) {
            Some(total) if total <= self.limit => {
                self.used = total;
                a.size = n;
                Ok(())
            }
            _ => Err(Error::OutOfMemory),
        }
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn limit(&self) -> usize {
        self.limit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
    InOut,
}

impl Direction {
    pub fn readable(self) -> bool {
        matches!(self, Direction::In | Direction::InOut)
    }

    pub fn writable(self) -> bool {
        matches!(self, Direction::Out | Direction::InOut)
    }
}

/// TA-side shape of one command parameter. Memory references point into
/// one of the buffers held by [`TaParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamView {
    Value { a: u32, b: u32 },
    Mem { buffer: usize, offset: usize, length: usize, direction: Direction },
}

/// Parameters as a TA sees them during one command.
pub struct TaParams<'a> {
    params: Vec<ParamView>,
    buffers: Vec<&'a mut [u8]>,
}

impl<'a> TaParams<'a> {
    pub fn new(params: Vec<ParamView>, buffers: Vec<&'a mut [u8]>) -> Result<Self> {
        if params.len() > 4 {
            return Err(Error::bad_params(format!("{} parameters, at most 4", params.len())));
        }
        for p in &params {
            if let ParamView::Mem { buffer, offset, length, .. } = *p {
                let size = buffers.get(buffer).map(|b| b.len()).ok_or_else(|| Error::bad_params("no such buffer"))?;
                match offset.checked_add(length) {
                    Some(end) if end <= size => {}
                    _ => return Err(Error::bad_params("memory reference out of bounds")),
                }
            }
        }
        Ok(Self { params, buffers })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn views(&self) -> &[ParamView] {
        &self.params
    }

    pub fn value(&self, idx: usize) -> Result<(u32, u32)> {
        match self.params.get(idx) {
            Some(ParamView::Value { a, b }) => Ok((*a, *b)),
            _ => Err(Error::bad_params(format!("parameter {idx} is not a value"))),
        }
    }

    pub fn has_value(&self, idx: usize) -> bool {
        matches!(self.params.get(idx), Some(ParamView::Value { .. }))
    }

    pub fn set_value(&mut self, idx: usize, a: u32, b: u32) -> Result<()> {
        match self.params.get_mut(idx) {
            Some(ParamView::Value { a: pa, b: pb }) => {
                *pa = a;
                *pb = b;
                Ok(())
            }
            _ => Err(Error::bad_params(format!("parameter {idx} is not a value"))),
        }
    }

    pub fn memref(&self, idx: usize) -> Result<&[u8]> {
        match self.params.get(idx) {
            Some(&ParamView::Mem { buffer, offset, length, direction }) if direction.readable() => {
                Ok(&self.buffers[buffer][offset..offset + length])
            }
            _ => Err(Error::bad_params(format!("parameter {idx} is not a readable memref"))),
        }
    }

    pub fn memref_mut(&mut self, idx: usize) -> Result<&mut [u8]> {
        match self.params.get(idx) {
            Some(&ParamView::Mem { buffer, offset, length, direction }) if direction.writable() => {
                Ok(&mut self.buffers[buffer][offset..offset + length])
            }
            _ => Err(Error::bad_params(format!("parameter {idx} is not a writable memref"))),
        }
    }
}

/// What a TA hook can reach while it runs.
pub struct TaContext<'a> {
    descriptor: TaDescriptor,
    heap: &'a mut TaHeap,
    tee: &'a Tee,
}

impl<'a> TaContext<'a> {
    pub fn uuid(&self) -> Uuid {
        self.descriptor.uuid
    }

    pub fn kind(&self) -> TaKind {
        self.descriptor.kind
    }

    pub fn heap(&mut self) -> &mut TaHeap {
        self.heap
    }

    pub fn alloc(&mut self, n: usize) -> Result<HeapAllocation> {
        self.heap.alloc(n)
    }

    pub fn free(&mut self, a: HeapAllocation) {
        self.heap.free(a)
    }

    /// Trusted storage bound to this TA. Pseudo TAs have no access.
    pub fn storage(&self) -> Result<StorageClient<'a>> {
        self.tee.storage.for_ta(self.descriptor.uuid, self.descriptor.kind)
    }

    /// Core services; only pseudo TAs run with core privileges.
    pub fn core(&self) -> Result<&'a Tee> {
        match self.descriptor.kind {
            TaKind::Pseudo => Ok(self.tee),
            TaKind::User => Err(Error::AccessDenied("core services are reserved for pseudo TAs")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceState {
    Created,
    SessionsOpen,
    Destroyed,
}

/// Snapshot of one TA instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceInfo {
    pub descriptor: TaDescriptor,
    pub heap_used: usize,
    pub state: InstanceState,
    pub sessions: usize,
    pub item_count: Option<u64>,
}

struct TaInstance {
    descriptor: TaDescriptor,
    heap: TaHeap,
    app: Box<dyn TrustedApp>,
    state: InstanceState,
    sessions: usize,
}

impl TaInstance {
    fn info(&self) -> InstanceInfo {
        InstanceInfo {
            descriptor: self.descriptor,
            heap_used: self.heap.used(),
            state: self.state,
            sessions: self.sessions,
            item_count: self.app.item_count(),
        }
    }
}

type InstanceSlot = Arc<Mutex<TaInstance>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BoundaryStats {
    pub world_switches: u64,
    pub supplicant_rpcs: u64,
    pub injected_latency: Duration,
}

#[derive(Debug, Clone)]
pub struct TeeConfig {
    /// Directory for persisted objects; a private temporary directory when unset.
    pub store_root: Option<PathBuf>,
    /// TA manifest; the built-in manifest when unset.
    pub manifest: Option<Manifest>,
    pub huk: Huk,
    /// Seed for FEK and nonce generation; OS entropy when unset.
    pub seed: Option<u64>,
    pub shm_pool_size: usize,
    pub injected_latency: Duration,
}

impl Default for TeeConfig {
    fn default() -> Self {
        Self {
            store_root: None,
            manifest: None,
            huk: Huk::static_fallback(),
            seed: None,
            shm_pool_size: DEFAULT_SHM_POOL_SIZE,
            injected_latency: Duration::ZERO,
        }
    }
}

impl TeeConfig {
    /// Reads `TEEKV_STORE_ROOT` and `TEEKV_HUK` (hex or `static`).
    pub fn from_env() -> Result<Self> {
        let mut cfg = Self::default();
        if let Ok(root) = std::env::var("TEEKV_STORE_ROOT") {
            cfg.store_root = Some(root.into());
        }
        if let Ok(huk) = std::env::var("TEEKV_HUK") {
            cfg.huk = huk.parse()?;
        }
        Ok(cfg)
    }
}

struct PseudoTa {
    descriptor: TaDescriptor,
    factory: TaFactory,
}

struct TeeSession {
    instance: InstanceSlot,
}

pub struct Tee {
    pseudo: Mutex<HashMap<Uuid, PseudoTa>>,
    instances: Mutex<HashMap<Uuid, InstanceSlot>>,
    sessions: Mutex<HashMap<u64, TeeSession>>,
    next_session: AtomicU64,
    supplicant: Arc<Supplicant>,
    storage: SecureStorage,
    world_switches: AtomicU64,
    injected_latency: Duration,
    shm_pool: Mutex<ShmPool>,
    _tempdir: Option<tempfile::TempDir>,
}

#[derive(Debug)]
struct ShmPool {
    used: usize,
    size: usize,
}

impl Tee {
    /// Builds a TEE with the built-in TAs installed: the key-value TA and
    /// the storage-benchmark TA as user TAs, the stats service as a pseudo TA.
    pub fn new(config: TeeConfig) -> Result<Arc<Self>> {
        let tee = Self::bare(config)?;
        crate::ta::install_builtin(&tee)?;
        Ok(tee)
    }

    /// Builds a TEE with nothing registered.
    pub fn bare(config: TeeConfig) -> Result<Arc<Self>> {
        let (root, tempdir) = match &config.store_root {
            Some(p) => (StoreRoot::new(p)?, None),
            None => {
                let dir = tempfile::Builder::new().prefix("teekv-store").tempdir()?;
                (StoreRoot::new(dir.path())?, Some(dir))
            }
        };
        let manifest = config.manifest.clone().unwrap_or_else(supplicant::default_manifest);
        let supplicant = Arc::new(Supplicant::new(root, manifest));
        let storage = SecureStorage::new(Arc::clone(&supplicant), &config.huk, config.seed);
        Ok(Arc::new(Self {
            pseudo: Mutex::new(HashMap::new()),
            instances: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            supplicant,
            storage,
            world_switches: AtomicU64::new(0),
            injected_latency: config.injected_latency,
            shm_pool: Mutex::new(ShmPool { used: 0, size: config.shm_pool_size }),
            _tempdir: tempdir,
        }))
    }

    pub fn supplicant(&self) -> &Arc<Supplicant> {
        &self.supplicant
    }

    pub fn storage(&self) -> &SecureStorage {
        &self.storage
    }

    pub fn register_pseudo_ta(&self, descriptor: TaDescriptor, factory: TaFactory) -> Result<()> {
        if descriptor.kind != TaKind::Pseudo {
            return Err(Error::bad_params("register_pseudo_ta needs a pseudo descriptor"));
        }
        let mut pseudo = self.pseudo.lock();
        if pseudo.contains_key(&descriptor.uuid) {
            return Err(Error::DuplicateUuid(descriptor.uuid));
        }
        pseudo.insert(descriptor.uuid, PseudoTa { descriptor, factory });
        Ok(())
    }

    pub fn read_stats(&self) -> BoundaryStats {
        BoundaryStats {
            world_switches: self.world_switches.load(Ordering::SeqCst),
            supplicant_rpcs: self.supplicant.rpc_count(),
            injected_latency: self.injected_latency,
        }
    }

    pub fn instance_info(&self, uuid: &Uuid) -> Option<InstanceInfo> {
        let slot = self.instances.lock().get(uuid).cloned()?;
        let info = slot.lock().info();
        Some(info)
    }

    pub(crate) fn shm_reserve(&self, n: usize) -> Result<()> {
        let mut pool = self.shm_pool.lock();
        match pool.used.checked_add(n) {
            Some(total) if total <= pool.size => {
                pool.used = total;
                Ok(())
            }
            _ => Err(Error::OutOfMemory),
        }
    }

    pub(crate) fn shm_release(&self, n: usize) {
        self.shm_pool.lock().used -= n;
    }

    pub fn shm_in_use(&self) -> usize {
        self.shm_pool.lock().used
    }

    fn world_switch(&self) {
        self.world_switches.fetch_add(1, Ordering::SeqCst);
        if !self.injected_latency.is_zero() {
            let until = Instant::now() + self.injected_latency;
            while Instant::now() < until {
                std::hint::spin_loop();
            }
        }
    }

    /// Instantiates a user TA through the supplicant and runs its create hook.
    pub fn load_user_ta(&self, uuid: Uuid) -> Result<()> {
        let mut instances = self.instances.lock();
        if instances.contains_key(&uuid) {
            return Ok(());
        }
        let slot = self.instantiate_user(uuid)?;
        instances.insert(uuid, slot);
        Ok(())
    }

    fn instantiate_user(&self, uuid: Uuid) -> Result<InstanceSlot> {
        let LoadedTa { descriptor, factory } = match self.supplicant.handle_rpc(RpcRequest::LoadTa { uuid })? {
            RpcResponse::Ta(t) => t,
            other => unreachable!("LoadTa answered with {other:?}"),
        };
        self.instantiate(descriptor, &factory)
    }

    fn instantiate(&self, descriptor: TaDescriptor, factory: &TaFactory) -> Result<InstanceSlot> {
        let mut inst = TaInstance {
            descriptor,
            heap: TaHeap::new(descriptor.memory_limit),
            app: factory(),
            state: InstanceState::Created,
            sessions: 0,
        };
        let TaInstance { heap, app, .. } = &mut inst;
        let mut ctx = TaContext { descriptor, heap, tee: self };
        guarded(|| app.create(&mut ctx)).map_err(|e| e.into_error(descriptor.uuid))?;
        Ok(Arc::new(Mutex::new(inst)))
    }

    fn instance_for(&self, uuid: Uuid) -> Result<InstanceSlot> {
        let mut instances = self.instances.lock();
        if let Some(slot) = instances.get(&uuid) {
            return Ok(Arc::clone(slot));
        }
        let pseudo = self.pseudo.lock().get(&uuid).map(|p| (p.descriptor, Arc::clone(&p.factory)));
        let slot = match pseudo {
            Some((descriptor, factory)) => self.instantiate(descriptor, &factory)?,
            None => self.instantiate_user(uuid)?,
        };
        instances.insert(uuid, Arc::clone(&slot));
        Ok(slot)
    }

    /// Opens a session to `uuid`, loading the TA first if no instance exists.
    pub fn open_session(&self, uuid: Uuid) -> Result<u64> {
        self.world_switch();
        let slot = self.instance_for(uuid)?;
        let id = self.next_session.fetch_add(1, Ordering::SeqCst);
        {
            let mut inst = slot.lock();
            if inst.state == InstanceState::Destroyed {
                return Err(Error::TargetDead);
            }
            let TaInstance { descriptor, heap, app, .. } = &mut *inst;
            let mut ctx = TaContext { descriptor: *descriptor, heap, tee: self };
            if let Err(e) = guarded(|| app.open_session(&mut ctx, id)) {
                if matches!(e, HookError::Panicked(_)) {
                    self.kill(&slot, &mut inst);
                }
                return Err(e.into_error(uuid));
            }
            inst.sessions += 1;
            inst.state = InstanceState::SessionsOpen;
        }
        self.sessions.lock().insert(id, TeeSession { instance: slot });
        Ok(id)
    }

    /// Runs one command inside the TA bound to `session`.
    ///
    /// `Ok(code)` carries the TA's return code. A panicking TA yields
    /// `TaPanicked` once and `TargetDead` on every later call.
    pub fn invoke(&self, session: u64, command_id: u32, params: &mut TaParams<'_>) -> Result<u32> {
        let slot = {
            let sessions = self.sessions.lock();
            let s = sessions.get(&session).ok_or(Error::StaleHandle(session))?;
            Arc::clone(&s.instance)
        };
        self.world_switch();
        let mut inst = slot.lock();
        if inst.state == InstanceState::Destroyed {
            return Err(Error::TargetDead);
        }
        let TaInstance { descriptor, heap, app, .. } = &mut *inst;
        let uuid = descriptor.uuid;
        let mut ctx = TaContext { descriptor: *descriptor, heap, tee: self };
        match guarded(|| app.invoke(&mut ctx, session, command_id, params)) {
            Ok(()) => Ok(crate::error::rc::SUCCESS),
            Err(HookError::Failed(e)) => Ok(e.code()),
            Err(HookError::Panicked(msg)) => {
                self.kill(&slot, &mut inst);
                Err(Error::TaPanicked(uuid, msg))
            }
        }
    }

    pub fn close_session(&self, session: u64) -> Result<()> {
        let s = self.sessions.lock().remove(&session).ok_or(Error::StaleHandle(session))?;
        self.world_switch();
        let mut inst = s.instance.lock();
        if inst.state == InstanceState::Destroyed {
            return Ok(());
        }
        let TaInstance { descriptor, heap, app, .. } = &mut *inst;
        let mut ctx = TaContext { descriptor: *descriptor, heap, tee: self };
        if guarded(|| {
            app.close_session(&mut ctx, session);
            Ok(())
        })
        .is_err()
        {
            self.kill(&s.instance, &mut inst);
            return Ok(());
        }
        inst.sessions -= 1;
        if inst.sessions == 0 {
            inst.state = InstanceState::Created;
        }
        Ok(())
    }

    /// Whether commands on `session` can still reach a live instance.
    pub fn session_alive(&self, session: u64) -> bool {
        let sessions = self.sessions.lock();
        let Some(s) = sessions.get(&session) else { return false };
        let slot = Arc::clone(&s.instance);
        drop(sessions);
        let alive = slot.lock().state != InstanceState::Destroyed;
        alive
    }

    /// Destroys a panicked instance. Its sessions stay registered but see
    /// `TargetDead`; the next session to that UUID gets a fresh instance.
    fn kill(&self, slot: &InstanceSlot, inst: &mut TaInstance) {
        inst.state = InstanceState::Destroyed;
        let uuid = inst.descriptor.uuid;
        let mut instances = self.instances.lock();
        if instances.get(&uuid).is_some_and(|s| Arc::ptr_eq(s, slot)) {
            instances.remove(&uuid);
        }
    }
}

impl fmt::Debug for Tee {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tee")
            .field("stats", &self.read_stats())
            .field("supplicant", &self.supplicant)
            .finish_non_exhaustive()
    }
}

enum HookError {
    Failed(Error),
    Panicked(String),
}

impl HookError {
    fn into_error(self, uuid: Uuid) -> Error {
        match self {
            HookError::Failed(e) => Error::TaPanicked(uuid, format!("entry point failed: {e}")),
            HookError::Panicked(msg) => Error::TaPanicked(uuid, msg),
        }
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T>) -> Result<T, HookError> {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(HookError::Failed(e)),
        Err(payload) => Err(HookError::Panicked(panic_message(&payload))),
    }
}

fn panic_message(payload: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_owned()
    }
}
