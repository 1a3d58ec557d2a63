//! Normal-world daemon that services requests coming out of the secure
//! world: locating TA images and persisting opaque object files.
//!
//! The supplicant runs in-process. Requests go through [`Supplicant::handle_rpc`],
//! which serializes them behind a single lock so they are served in arrival
//! order, and every request bumps the RPC counter whether it succeeds or not.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::tee::{TaDescriptor, TaFactory, TaKind, DEFAULT_TA_MEMORY_LIMIT};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RpcRequest {
    LoadTa { uuid: Uuid },
    FsOpen { name: String, create: bool },
    FsRead { file_id: u64, offset: u64, length: usize },
    FsWrite { file_id: u64, offset: u64, data: Vec<u8> },
    FsClose { file_id: u64 },
    FsRemove { name: String },
    FsList { prefix: String },
}

impl RpcRequest {
    fn kind(&self) -> RpcKind {
        match self {
            RpcRequest::LoadTa { .. } => RpcKind::LoadTa,
            RpcRequest::FsOpen { .. } => RpcKind::FsOpen,
            RpcRequest::FsRead { .. } => RpcKind::FsRead,
            RpcRequest::FsWrite { .. } => RpcKind::FsWrite,
            RpcRequest::FsClose { .. } => RpcKind::FsClose,
            RpcRequest::FsRemove { .. } => RpcKind::FsRemove,
            RpcRequest::FsList { .. } => RpcKind::FsList,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RpcKind {
    LoadTa,
    FsOpen,
    FsRead,
    FsWrite,
    FsClose,
    FsRemove,
    FsList,
}

/// A TA image handed back by `LoadTa`: its manifest descriptor plus the
/// entry points.
#[derive(Clone)]
pub struct LoadedTa {
    pub descriptor: TaDescriptor,
    pub factory: TaFactory,
}

impl fmt::Debug for LoadedTa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LoadedTa").field("descriptor", &self.descriptor).finish_non_exhaustive()
    }
}

#[derive(Debug)]
pub enum RpcResponse {
    Ta(LoadedTa),
    Opened { file_id: u64, size: u64 },
    Data(Vec<u8>),
    Written(usize),
    Done,
    Listing(Vec<String>),
}

/// One line of the TA manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub uuid: Uuid,
    pub kind: TaKind,
    pub memory_limit: usize,
}

/// Registry of installed TAs: `<uuid> <kind> <memory_limit_bytes>` per line,
/// `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: BTreeMap<Uuid, ManifestEntry>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: ManifestEntry) -> Option<ManifestEntry> {
        self.entries.insert(entry.uuid, entry)
    }

    pub fn get(&self, uuid: &Uuid) -> Option<&ManifestEntry> {
        self.entries.get(uuid)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.values()
    }

    pub fn load(path: &Path) -> Result<Self> {
        fs::read_to_string(path)?.parse()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl FromStr for Manifest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut manifest = Manifest::new();
        for (idx, raw) in s.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Manifest { line: line_no, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [uuid, kind, limit] = fields[..] else {
                return Err(err(format!("expected 3 fields, got {}", fields.len())));
            };
            let uuid = Uuid::parse_str(uuid).map_err(|e| err(format!("bad uuid: {e}")))?;
            let kind = match kind {
                "user" => TaKind::User,
                "pseudo" => TaKind::Pseudo,
                other => return Err(err(format!("unknown TA kind {other:?}"))),
            };
            let memory_limit = limit.parse::<usize>().map_err(|e| err(format!("bad memory limit: {e}")))?;
            if manifest.insert(ManifestEntry { uuid, kind, memory_limit }).is_some() {
                return Err(err(format!("duplicate uuid {uuid}")));
            }
        }
        Ok(manifest)
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# uuid kind memory_limit_bytes")?;
        for e in self.entries.values() {
            let kind = match e.kind {
                TaKind::User => "user",
                TaKind::Pseudo => "pseudo",
            };
            writeln!(f, "{} {} {}", e.uuid, kind, e.memory_limit)?;
        }
        Ok(())
    }
}

/// Directory that holds every persisted object file.
#[derive(Debug, Clone)]
pub struct StoreRoot {
    directory: PathBuf,
}

impl StoreRoot {
    pub fn new(directory: impl Into<PathBuf>) -> Result<Self> {
        let directory = directory.into();
        fs::create_dir_all(&directory)?;
        Ok(Self { directory })
    }

    pub fn directory(&self) -> &Path {
        &self.directory
    }

    /// Resolves a store-relative name. Names are `/`-separated sequences of
    /// plain components; anything that could leave the root is rejected.
    pub fn resolve(&self, name: &str) -> Result<PathBuf> {
        let violation = || Error::PathViolation(name.to_owned());
        if name.is_empty() || name.contains('\\') || name.contains('\0') {
            return Err(violation());
        }
        let mut path = self.directory.clone();
        for part in name.split('/') {
            let mut comps = Path::new(part).components();
            match (comps.next(), comps.next()) {
                (Some(Component::Normal(c)), None) if c == part => path.push(c),
                _ => return Err(violation()),
            }
        }
        Ok(path)
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RpcLog {
    pub total: u64,
    pub by_kind: BTreeMap<RpcKind, u64>,
}

impl RpcLog {
    pub fn count(&self, kind: RpcKind) -> u64 {
        self.by_kind.get(&kind).copied().unwrap_or(0)
    }
}

#[derive(Default)]
struct FsState {
    next_file_id: u64,
    open: HashMap<u64, PathBuf>,
    log: RpcLog,
}

pub struct Supplicant {
    root: StoreRoot,
    manifest: RwLock<Manifest>,
    binaries: RwLock<HashMap<Uuid, TaFactory>>,
    state: Mutex<FsState>,
    rpcs: AtomicU64,
}

impl Supplicant {
    pub fn new(root: StoreRoot, manifest: Manifest) -> Self {
        Self {
            root,
            manifest: RwLock::new(manifest),
            binaries: RwLock::new(HashMap::new()),
            state: Mutex::new(FsState { next_file_id: 1, ..Default::default() }),
            rpcs: AtomicU64::new(0),
        }
    }

    pub fn root(&self) -> &StoreRoot {
        &self.root
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest.read().clone()
    }

    /// Makes a TA image available for loading. The TA is only loadable if
    /// the manifest also lists it as a user TA.
    pub fn install_binary(&self, uuid: Uuid, factory: TaFactory) {
        self.binaries.write().insert(uuid, factory);
    }

    /// Installs a TA image and adds a matching manifest entry.
    pub fn install_user_ta(&self, uuid: Uuid, memory_limit: usize, factory: TaFactory) {
        self.manifest.write().insert(ManifestEntry { uuid, kind: TaKind::User, memory_limit });
        self.install_binary(uuid, factory);
    }

    pub fn rpc_count(&self) -> u64 {
        self.rpcs.load(Ordering::SeqCst)
    }

    pub fn rpc_log(&self) -> RpcLog {
        self.state.lock().log.clone()
    }

    pub fn handle_rpc(&self, req: RpcRequest) -> Result<RpcResponse> {
        let mut state = self.state.lock();
        self.rpcs.fetch_add(1, Ordering::SeqCst);
        state.log.total += 1;
        *state.log.by_kind.entry(req.kind()).or_default() += 1;

        match req {
            RpcRequest::LoadTa { uuid } => self.load_ta(uuid).map(RpcResponse::Ta),
            RpcRequest::FsOpen { name, create } => {
                let path = self.root.resolve(&name)?;
                let file = if create {
                    if let Some(parent) = path.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    File::create(&path)?
                } else {
                    File::open(&path).map_err(not_found)?
                };
                let size = file.metadata()?.len();
                let file_id = state.next_file_id;
                state.next_file_id += 1;
                state.open.insert(file_id, path);
                Ok(RpcResponse::Opened { file_id, size })
            }
            RpcRequest::FsRead { file_id, offset, length } => {
                let path = open_path(&state, file_id)?;
                let mut file = File::open(path).map_err(not_found)?;
                file.seek(SeekFrom::Start(offset))?;
                let mut buf = Vec::with_capacity(length);
                file.take(length as u64).read_to_end(&mut buf)?;
                Ok(RpcResponse::Data(buf))
            }
            RpcRequest::FsWrite { file_id, offset, data } => {
                let path = open_path(&state, file_id)?;
                let mut file = OpenOptions::new().write(true).open(path).map_err(not_found)?;
                file.seek(SeekFrom::Start(offset))?;
                file.write_all(&data)?;
                file.sync_data()?;
                Ok(RpcResponse::Written(data.len()))
            }
            RpcRequest::FsClose { file_id } => {
                state.open.remove(&file_id).ok_or(Error::ItemNotFound)?;
                Ok(RpcResponse::Done)
            }
            RpcRequest::FsRemove { name } => {
                let path = self.root.resolve(&name)?;
                fs::remove_file(&path).map_err(not_found)?;
                Ok(RpcResponse::Done)
            }
            RpcRequest::FsList { prefix } => {
                let mut names = Vec::new();
                list_files(self.root.directory(), "", &mut names)?;
                names.retain(|n| n.starts_with(&prefix));
                names.sort();
                Ok(RpcResponse::Listing(names))
            }
        }
    }

    fn load_ta(&self, uuid: Uuid) -> Result<LoadedTa> {
        let entry = match self.manifest.read().get(&uuid) {
            Some(e) if e.kind == TaKind::User => *e,
            _ => return Err(Error::TaNotFound(uuid)),
        };
        let factory = self.binaries.read().get(&uuid).cloned().ok_or(Error::TaNotFound(uuid))?;
        Ok(LoadedTa {
            descriptor: TaDescriptor { uuid, kind: TaKind::User, memory_limit: entry.memory_limit },
            factory,
        })
    }
}

impl fmt::Debug for Supplicant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Supplicant")
            .field("root", &self.root)
            .field("rpcs", &self.rpc_count())
            .finish_non_exhaustive()
    }
}

fn open_path(state: &FsState, file_id: u64) -> Result<&PathBuf> {
    state.open.get(&file_id).ok_or(Error::ItemNotFound)
}

fn not_found(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::NotFound {
        Error::ItemNotFound
    } else {
        Error::Io(e)
    }
}

fn list_files(dir: &Path, rel: &str, out: &mut Vec<String>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let rel_name = if rel.is_empty() { name } else { format!("{rel}/{name}") };
        if entry.file_type()?.is_dir() {
            list_files(&entry.path(), &rel_name, out)?;
        } else {
            out.push(rel_name);
        }
    }
    Ok(())
}

/// Manifest listing the built-in user TAs with the default memory limit.
pub fn default_manifest() -> Manifest {
    let mut m = Manifest::new();
    for uuid in [crate::ta::KV_TA_UUID, crate::ta::STORAGE_BENCH_TA_UUID] {
        m.insert(ManifestEntry { uuid, kind: TaKind::User, memory_limit: DEFAULT_TA_MEMORY_LIMIT });
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn supplicant() -> (tempfile::TempDir, Supplicant) {
        let dir = tempfile::tempdir().unwrap();
        let root = StoreRoot::new(dir.path()).unwrap();
        (dir, Supplicant::new(root, default_manifest()))
    }

    fn open(s: &Supplicant, name: &str, create: bool) -> Result<u64> {
        match s.handle_rpc(RpcRequest::FsOpen { name: name.into(), create })? {
            RpcResponse::Opened { file_id, .. } => Ok(file_id),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn write_then_read_round_trips() {
        let (_d, s) = supplicant();
        let id = open(&s, "abc/01.obj", true).unwrap();
        s.handle_rpc(RpcRequest::FsWrite { file_id: id, offset: 3, data: b"hello".to_vec() }).unwrap();
        let RpcResponse::Data(got) = s.handle_rpc(RpcRequest::FsRead { file_id: id, offset: 3, length: 5 }).unwrap() else {
            panic!()
        };
        assert_eq!(got, b"hello");
        // read past the end is short, not an error
        let RpcResponse::Data(tail) = s.handle_rpc(RpcRequest::FsRead { file_id: id, offset: 6, length: 100 }).unwrap() else {
            panic!()
        };
        assert_eq!(tail, b"lo");
        assert_eq!(s.rpc_count(), 4);
    }

    #[test]
    fn traversal_is_rejected() {
        let (_d, s) = supplicant();
        for bad in ["../etc/x", "/etc/passwd", "a/../../b", "a//b", "./a", "a\\b", ""] {
            let err = open(&s, bad, true).unwrap_err();
            assert!(matches!(err, Error::PathViolation(_)), "{bad}: {err:?}");
        }
        // rejected requests still count as RPCs
        assert_eq!(s.rpc_count(), 7);
    }

    #[test]
    fn missing_file_is_not_found() {
        let (_d, s) = supplicant();
        assert!(matches!(open(&s, "nope.obj", false), Err(Error::ItemNotFound)));
        assert!(matches!(
            s.handle_rpc(RpcRequest::FsRemove { name: "nope.obj".into() }),
            Err(Error::ItemNotFound)
        ));
    }

    #[test]
    fn load_ta_requires_manifest_and_binary() {
        let (_d, s) = supplicant();
        let kv = crate::ta::KV_TA_UUID;
        assert!(matches!(s.handle_rpc(RpcRequest::LoadTa { uuid: kv }), Err(Error::TaNotFound(_))));
        s.install_binary(kv, crate::ta::kv_factory());
        let RpcResponse::Ta(loaded) = s.handle_rpc(RpcRequest::LoadTa { uuid: kv }).unwrap() else { panic!() };
        assert_eq!(loaded.descriptor.memory_limit, DEFAULT_TA_MEMORY_LIMIT);
        assert_eq!(s.rpc_log().count(RpcKind::LoadTa), 2);
    }

    #[test]
    fn list_filters_by_prefix() {
        let (_d, s) = supplicant();
        for n in ["a/1.obj", "a/2.obj", "b/1.obj"] {
            open(&s, n, true).unwrap();
        }
        let RpcResponse::Listing(names) = s.handle_rpc(RpcRequest::FsList { prefix: "a/".into() }).unwrap() else {
            panic!()
        };
        assert_eq!(names, vec!["a/1.obj", "a/2.obj"]);
    }

    #[test]
    fn manifest_parse_and_print() {
        let text = "# installed TAs\n\
                    8aaaf200-2450-11e4-abe2-0002a5d5c51b user 1048576\n\
                    \n\
                    6e5c4c6a-0000-4000-8000-000000000001 pseudo 4096 # stats\n";
        let m: Manifest = text.parse().unwrap();
        assert_eq!(m.entries().count(), 2);
        let again: Manifest = m.to_string().parse().unwrap();
        assert_eq!(m, again);

        let err = "8aaaf200-2450-11e4-abe2-0002a5d5c51b user".parse::<Manifest>().unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }));
        let err = "x\n8aaaf200-2450-11e4-abe2-0002a5d5c51b kernel 1".parse::<Manifest>();
        assert!(matches!(err, Err(Error::Manifest { line: 1, .. })));
    }
}
