use std::sync::Arc;

use proptest::prelude::*;
use teekv::storage::format::HEADER_LEN;
use teekv::storage::{object_file_name, Huk, SecureStorage, MAX_CHUNK};
use teekv::supplicant::{default_manifest, StoreRoot, Supplicant};
use teekv::tee::TaKind;
use teekv::{Error, Uuid};

const A: Uuid = Uuid::from_u128(0xA11CE);
const B: Uuid = Uuid::from_u128(0xB0B);

fn storage(dir: &std::path::Path, huk: &Huk, seed: u64) -> SecureStorage {
    let sup = Arc::new(Supplicant::new(StoreRoot::new(dir).unwrap(), default_manifest()));
    SecureStorage::new(sup, huk, Some(seed))
}

fn read_all(c: &teekv::storage::StorageClient<'_>, id: &[u8]) -> Vec<u8> {
    let mut o = c.open_object(id).unwrap();
    let mut out = Vec::new();
    loop {
        let chunk = c.read_chunk(&mut o, MAX_CHUNK).unwrap();
        if chunk.is_empty() {
            break;
        }
        out.extend(chunk);
    }
    c.close_object(o).unwrap();
    out
}

#[test]
fn plaintext_never_reaches_the_normal_world() {
    let dir = tempfile::tempdir().unwrap();
    let s = storage(dir.path(), &Huk::static_fallback(), 1);
    let c = s.for_ta(A, TaKind::User).unwrap();
    let secret = b"attack at dawn, bring the good biscuits".repeat(30);
    let mut o = c.create_object(b"plan", b"").unwrap();
    for chunk in secret.chunks(MAX_CHUNK) {
        c.write_chunk(&mut o, chunk).unwrap();
    }
    c.close_object(o).unwrap();
    let file = std::fs::read(dir.path().join(object_file_name(&A, b"plan"))).unwrap();
    assert_eq!(file.len(), HEADER_LEN + secret.len() + 16);
    assert!(!file.windows(16).any(|w| secret.windows(16).any(|s| s == w)));
}

#[test]
fn objects_survive_a_restart_with_the_same_huk_only() {
    let dir = tempfile::tempdir().unwrap();
    let huk: Huk = "11".repeat(32).parse().unwrap();
    {
        let s = storage(dir.path(), &huk, 1);
        s.for_ta(A, TaKind::User).unwrap().create_object(b"k", b"persisted").unwrap();
    }
    let s = storage(dir.path(), &huk, 2);
    assert_eq!(read_all(&s.for_ta(A, TaKind::User).unwrap(), b"k"), b"persisted");

    let other = storage(dir.path(), &Huk::static_fallback(), 3);
    let err = other.for_ta(A, TaKind::User).unwrap().open_object(b"k").unwrap_err();
    assert!(matches!(err, Error::CorruptObject), "{err:?}");
}

#[test]
fn tas_cannot_read_each_others_objects() {
    let dir = tempfile::tempdir().unwrap();
    let s = storage(dir.path(), &Huk::static_fallback(), 1);
    let a = s.for_ta(A, TaKind::User).unwrap();
    let b = s.for_ta(B, TaKind::User).unwrap();
    a.create_object(b"shared-name", b"for A only").unwrap();
    assert!(matches!(b.open_object(b"shared-name"), Err(Error::ItemNotFound)));

    // planting A's file under B's directory does not help B
    let from = dir.path().join(object_file_name(&A, b"shared-name"));
    let to = dir.path().join(object_file_name(&B, b"shared-name"));
    std::fs::create_dir_all(to.parent().unwrap()).unwrap();
    std::fs::copy(from, to).unwrap();
    assert!(matches!(b.open_object(b"shared-name"), Err(Error::CorruptObject)));
}

#[test]
fn renamed_object_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = storage(dir.path(), &Huk::static_fallback(), 1);
    let a = s.for_ta(A, TaKind::User).unwrap();
    a.create_object(b"one", b"payload").unwrap();
    std::fs::rename(dir.path().join(object_file_name(&A, b"one")), dir.path().join(object_file_name(&A, b"two"))).unwrap();
    assert!(matches!(a.open_object(b"two"), Err(Error::CorruptObject)));
}

#[test]
fn delete_then_missing() {
    let dir = tempfile::tempdir().unwrap();
    let s = storage(dir.path(), &Huk::static_fallback(), 1);
    let a = s.for_ta(A, TaKind::User).unwrap();
    let o = a.create_object(b"gone", b"x").unwrap();
    a.delete_object(o).unwrap();
    assert!(!dir.path().join(object_file_name(&A, b"gone")).exists());
    assert!(matches!(a.open_object(b"gone"), Err(Error::ItemNotFound)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chunked_writes_round_trip(
        data in proptest::collection::vec(any::<u8>(), 0..6000),
        chunk in 1usize..=MAX_CHUNK,
        id in proptest::collection::vec(any::<u8>(), 1..=64),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let s = storage(dir.path(), &Huk::static_fallback(), 9);
        let c = s.for_ta(A, TaKind::User).unwrap();
        let mut o = c.create_object(&id, b"").unwrap();
        for piece in data.chunks(chunk) {
            c.write_chunk(&mut o, piece).unwrap();
        }
        c.close_object(o).unwrap();
        prop_assert_eq!(read_all(&c, &id), data.clone());
        let len = std::fs::metadata(dir.path().join(object_file_name(&A, &id))).unwrap().len() as usize;
        prop_assert_eq!(len, HEADER_LEN + data.len() + 16);
    }
}
