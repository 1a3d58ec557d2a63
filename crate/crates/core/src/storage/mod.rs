//! Trusted storage for TAs.
//!
//! Objects are encrypted under a fresh per-object FEK, which is itself
//! wrapped under the owning TA's TSK, and persisted through the supplicant
//! as `<uuid>/<hex(object_id)>.obj`. An open object keeps its plaintext in
//! TEE memory; every write re-seals the whole object and flushes it
//! (write-through), reads never leave the secure world.

pub mod format;
pub mod keys;

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::sync::Arc;
use uuid::Uuid;

pub use keys::{derive_ssk, derive_tsk, Fek, Huk, HukSource, Ssk, Tsk, KEY_LEN, SSK_DERIVATION_MESSAGE};

use crate::error::{Error, Result};
use crate::supplicant::{RpcRequest, RpcResponse, Supplicant};
use crate::tee::TaKind;
use format::{KeyBlock, NONCE_LEN};

/// Largest chunk moved by a single read or write.
pub const MAX_CHUNK: usize = 1024;
/// Per-object size quota.
pub const MAX_OBJECT_SIZE: usize = 1 << 20;
pub const MAX_OBJECT_ID_LEN: usize = 64;

/// Store-relative file name of an object.
pub fn object_file_name(ta: &Uuid, object_id: &[u8]) -> String {
    format!("{}/{}.obj", ta, hex::encode(object_id))
}

pub struct SecureStorage {
    supplicant: Arc<Supplicant>,
    ssk: Ssk,
    rng: Mutex<ChaCha20Rng>,
}

impl SecureStorage {
    pub fn new(supplicant: Arc<Supplicant>, huk: &Huk, seed: Option<u64>) -> Self {
        let rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        Self { supplicant, ssk: derive_ssk(huk), rng: Mutex::new(rng) }
    }

    /// Storage access on behalf of `ta`. Pseudo TAs cannot use trusted storage.
    pub fn for_ta(&self, ta: Uuid, kind: TaKind) -> Result<StorageClient<'_>> {
        if kind == TaKind::Pseudo {
            return Err(Error::AccessDenied("pseudo TAs have no trusted storage"));
        }
        Ok(StorageClient { storage: self, tsk: derive_tsk(&self.ssk, &ta) })
    }

    fn random<const N: usize>(&self) -> [u8; N] {
        let mut out = [0u8; N];
        self.rng.lock().fill_bytes(&mut out);
        out
    }

    fn rpc(&self, req: RpcRequest) -> Result<RpcResponse> {
        self.supplicant.handle_rpc(req)
    }
}

impl std::fmt::Debug for SecureStorage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecureStorage").finish_non_exhaustive()
    }
}

/// An open persistent object. The FEK and plaintext live only here.
#[derive(Debug)]
pub struct PersistentObject {
    ta: Uuid,
    object_id: Vec<u8>,
    file_id: u64,
    keys: KeyBlock,
    fek: Fek,
    data: Vec<u8>,
    cursor: usize,
}

impl PersistentObject {
    pub fn ta(&self) -> Uuid {
        self.ta
    }

    pub fn object_id(&self) -> &[u8] {
        &self.object_id
    }

    pub fn data_len(&self) -> usize {
        self.data.len()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }
}

/// Trusted storage bound to one TA.
pub struct StorageClient<'a> {
    storage: &'a SecureStorage,
    tsk: Tsk,
}

impl<'a> StorageClient<'a> {
    pub fn ta(&self) -> Uuid {
        self.tsk.ta()
    }

    fn file_name(&self, object_id: &[u8]) -> Result<String> {
        if object_id.is_empty() || object_id.len() > MAX_OBJECT_ID_LEN {
            return Err(Error::bad_params(format!("object id must be 1..={MAX_OBJECT_ID_LEN} bytes")));
        }
        Ok(object_file_name(&self.tsk.ta(), object_id))
    }

    fn open_file(&self, name: String, create: bool) -> Result<(u64, u64)> {
        match self.storage.rpc(RpcRequest::FsOpen { name, create })? {
            RpcResponse::Opened { file_id, size } => Ok((file_id, size)),
            other => unreachable!("FsOpen answered with {other:?}"),
        }
    }

    fn flush(&self, obj: &PersistentObject) -> Result<()> {
        let nonce: [u8; NONCE_LEN] = self.storage.random();
        let file = format::seal(&obj.ta, &obj.object_id, &obj.keys, &obj.fek, nonce, &obj.data);
        self.storage.rpc(RpcRequest::FsWrite { file_id: obj.file_id, offset: 0, data: file })?;
        Ok(())
    }

    pub fn create_object(&self, object_id: &[u8], initial: &[u8]) -> Result<PersistentObject> {
        let name = self.file_name(object_id)?;
        if initial.len() > MAX_OBJECT_SIZE {
            return Err(Error::QuotaExceeded);
        }
        match self.open_file(name.clone(), false) {
            Ok((file_id, _)) => {
                self.storage.rpc(RpcRequest::FsClose { file_id })?;
                return Err(Error::AccessConflict);
            }
            Err(Error::ItemNotFound) => {}
            Err(e) => return Err(e),
        }
        let fek = Fek(self.storage.random());
        let keys = format::wrap_fek(&self.tsk, object_id, &fek, self.storage.random());
        let (file_id, _) = self.open_file(name, true)?;
        let obj = PersistentObject {
            ta: self.tsk.ta(),
            object_id: object_id.to_vec(),
            file_id,
            keys,
            fek,
            data: initial.to_vec(),
            cursor: 0,
        };
        self.flush(&obj)?;
        Ok(obj)
    }

    pub fn open_object(&self, object_id: &[u8]) -> Result<PersistentObject> {
        let name = self.file_name(object_id)?;
        let (file_id, size) = self.open_file(name, false)?;
        let file = match self.storage.rpc(RpcRequest::FsRead { file_id, offset: 0, length: size as usize })? {
            RpcResponse::Data(d) => d,
            other => unreachable!("FsRead answered with {other:?}"),
        };
        let opened = format::open(&self.tsk, object_id, &file);
        let (fek, keys, data) = match opened {
            Ok(v) => v,
            Err(e) => {
                self.storage.rpc(RpcRequest::FsClose { file_id })?;
                return Err(e);
            }
        };
        Ok(PersistentObject { ta: self.tsk.ta(), object_id: object_id.to_vec(), file_id, keys, fek, data, cursor: 0 })
    }

    fn check_owner(&self, obj: &PersistentObject) -> Result<()> {
        if obj.ta != self.tsk.ta() {
            return Err(Error::AccessDenied("object belongs to another TA"));
        }
        Ok(())
    }

    /// Reads up to `len` bytes at the cursor; short at end of data.
    pub fn read_chunk(&self, obj: &mut PersistentObject, len: usize) -> Result<Vec<u8>> {
        self.check_owner(obj)?;
        if len > MAX_CHUNK {
            return Err(Error::bad_params(format!("chunk of {len} bytes exceeds {MAX_CHUNK}")));
        }
        let end = obj.data.len().min(obj.cursor + len);
        let out = obj.data[obj.cursor..end].to_vec();
        obj.cursor = end;
        Ok(out)
    }

    /// Writes at the cursor, extending the object if needed, then flushes.
    pub fn write_chunk(&self, obj: &mut PersistentObject, bytes: &[u8]) -> Result<()> {
        self.check_owner(obj)?;
        if bytes.len() > MAX_CHUNK {
            return Err(Error::bad_params(format!("chunk of {} bytes exceeds {MAX_CHUNK}", bytes.len())));
        }
        let end = obj.cursor + bytes.len();
        if end > MAX_OBJECT_SIZE {
            return Err(Error::QuotaExceeded);
        }
        if end > obj.data.len() {
            obj.data.resize(end, 0);
        }
        obj.data[obj.cursor..end].copy_from_slice(bytes);
        obj.cursor = end;
        self.flush(obj)
    }

    pub fn seek(&self, obj: &mut PersistentObject, pos: usize) -> Result<()> {
        self.check_owner(obj)?;
        if pos > obj.data.len() {
            return Err(Error::bad_params(format!("seek to {pos} past end {}", obj.data.len())));
        }
        obj.cursor = pos;
        Ok(())
    }

    pub fn close_object(&self, obj: PersistentObject) -> Result<()> {
        self.check_owner(&obj)?;
        self.storage.rpc(RpcRequest::FsClose { file_id: obj.file_id })?;
        Ok(())
    }

    pub fn delete_object(&self, obj: PersistentObject) -> Result<()> {
        self.check_owner(&obj)?;
        self.storage.rpc(RpcRequest::FsClose { file_id: obj.file_id })?;
        self.storage.rpc(RpcRequest::FsRemove { name: object_file_name(&obj.ta, &obj.object_id) })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supplicant::{default_manifest, StoreRoot};

    fn storage(seed: u64) -> (tempfile::TempDir, SecureStorage) {
        let dir = tempfile::tempdir().unwrap();
        let sup = Arc::new(Supplicant::new(StoreRoot::new(dir.path()).unwrap(), default_manifest()));
        (dir, SecureStorage::new(sup, &Huk::static_fallback(), Some(seed)))
    }

    const TA: Uuid = Uuid::from_u128(0xA);

    #[test]
    fn create_writes_expected_file_size() {
        let (dir, s) = storage(1);
        let c = s.for_ta(TA, TaKind::User).unwrap();
        c.create_object(b"counter", &[7u8; 256]).unwrap();
        let path = dir.path().join(object_file_name(&TA, b"counter"));
        assert_eq!(std::fs::metadata(path).unwrap().len() as usize, 93 + 256 + 16);
        assert!(matches!(c.create_object(b"counter", b""), Err(Error::AccessConflict)));
    }

    #[test]
    fn pseudo_is_denied() {
        let (_d, s) = storage(1);
        assert!(matches!(s.for_ta(TA, TaKind::Pseudo), Err(Error::AccessDenied(_))));
    }

    #[test]
    fn cursor_semantics() {
        let (_d, s) = storage(2);
        let c = s.for_ta(TA, TaKind::User).unwrap();
        let mut o = c.create_object(b"o", &[1u8; 256]).unwrap();
        assert_eq!(c.read_chunk(&mut o, 1024).unwrap().len(), 256);
        assert_eq!(o.cursor(), 256);
        assert!(c.read_chunk(&mut o, 1024).unwrap().is_empty());
        c.seek(&mut o, 0).unwrap();
        assert_eq!(c.read_chunk(&mut o, 10).unwrap(), vec![1u8; 10]);
        c.seek(&mut o, 256).unwrap();
        assert!(c.read_chunk(&mut o, 1).unwrap().is_empty());
        assert!(matches!(c.seek(&mut o, 257), Err(Error::BadParameters(_))));
        assert!(c.read_chunk(&mut o, 1025).is_err());
    }

    #[test]
    fn write_extends() {
        let (_d, s) = storage(3);
        let c = s.for_ta(TA, TaKind::User).unwrap();
        let mut o = c.create_object(b"o", b"").unwrap();
        c.write_chunk(&mut o, &[2u8; 1024]).unwrap();
        assert_eq!(o.data_len(), 1024);
        c.seek(&mut o, 512).unwrap();
        c.write_chunk(&mut o, &[3u8; 1024]).unwrap();
        assert_eq!(o.data_len(), 1536);
        c.close_object(o).unwrap();
        let mut o = c.open_object(b"o").unwrap();
        let mut all = Vec::new();
        loop {
            let chunk = c.read_chunk(&mut o, 1024).unwrap();
            if chunk.is_empty() {
                break;
            }
            all.extend(chunk);
        }
        assert_eq!(&all[..512], &[2u8; 512][..]);
        assert_eq!(&all[512..], &[3u8; 1024][..]);
    }

    #[test]
    fn quota_hits_on_the_1025th_chunk() {
        let (_d, s) = storage(4);
        let c = s.for_ta(TA, TaKind::User).unwrap();
        let mut o = c.create_object(b"big", &vec![0u8; MAX_OBJECT_SIZE - 1024]).unwrap();
        c.seek(&mut o, MAX_OBJECT_SIZE - 1024).unwrap();
        c.write_chunk(&mut o, &[1u8; 1024]).unwrap();
        assert_eq!(o.data_len(), MAX_OBJECT_SIZE);
        assert!(matches!(c.write_chunk(&mut o, &[1u8; 1024]), Err(Error::QuotaExceeded)));
        assert_eq!(o.data_len(), MAX_OBJECT_SIZE);
    }

    #[test]
    fn objects_are_namespaced_per_ta() {
        let (_d, s) = storage(5);
        let a = s.for_ta(TA, TaKind::User).unwrap();
        let b = s.for_ta(Uuid::from_u128(0xB), TaKind::User).unwrap();
        a.create_object(b"shared-name", b"secret").unwrap();
        assert!(matches!(b.open_object(b"shared-name"), Err(Error::ItemNotFound)));
    }

    #[test]
    fn object_id_bounds() {
        let (_d, s) = storage(6);
        let c = s.for_ta(TA, TaKind::User).unwrap();
        assert!(c.create_object(&[b'x'; 64], b"").is_ok());
        assert!(matches!(c.create_object(&[b'x'; 65], b""), Err(Error::BadParameters(_))));
        assert!(matches!(c.create_object(b"", b""), Err(Error::BadParameters(_))));
    }

    #[test]
    fn delete_then_open_is_not_found() {
        let (_d, s) = storage(7);
        let c = s.for_ta(TA, TaKind::User).unwrap();
        let o = c.create_object(b"gone", b"x").unwrap();
        c.create_object(b"kept", b"y").unwrap();
        c.delete_object(o).unwrap();
        assert!(matches!(c.open_object(b"gone"), Err(Error::ItemNotFound)));
        assert!(c.open_object(b"kept").is_ok());
    }
}
