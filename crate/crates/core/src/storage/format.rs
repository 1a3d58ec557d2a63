//! On-disk object layout.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "TKV1"
//!      4     1  version (1)
//!      5    16  TA uuid
//!     21    12  fek_nonce
//!     33    48  wrapped FEK (32 B ciphertext + 16 B tag)
//!     81    12  data_nonce
//!     93     n  ciphertext
//!   93+n    16  data tag
//! ```
//!
//! The wrapped FEK is AES-256-GCM under the TSK with associated data
//! `uuid ‖ object_id`; the data is AES-256-GCM under the FEK with associated
//! data `uuid ‖ object_id ‖ data_len` (u64 little-endian).

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Key, Nonce};
use uuid::Uuid;

use super::keys::{Fek, Tsk, KEY_LEN};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TKV1";
pub const VERSION: u8 = 1;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const WRAPPED_FEK_LEN: usize = KEY_LEN + TAG_LEN;
pub const HEADER_LEN: usize = 4 + 1 + 16 + NONCE_LEN + WRAPPED_FEK_LEN + NONCE_LEN;

pub const UUID_OFFSET: usize = 5;
pub const FEK_NONCE_OFFSET: usize = UUID_OFFSET + 16;
pub const WRAPPED_FEK_OFFSET: usize = FEK_NONCE_OFFSET + NONCE_LEN;
pub const DATA_NONCE_OFFSET: usize = WRAPPED_FEK_OFFSET + WRAPPED_FEK_LEN;

/// Size of an object file holding `data_len` plaintext bytes.
pub const fn file_len(data_len: usize) -> usize {
    HEADER_LEN + data_len + TAG_LEN
}

/// Header fields that stay fixed for the lifetime of an object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyBlock {
    pub fek_nonce: [u8; NONCE_LEN],
    pub wrapped_fek: [u8; WRAPPED_FEK_LEN],
}

fn fek_ad(ta: &Uuid, object_id: &[u8]) -> Vec<u8> {
    let mut ad = Vec::with_capacity(16 + object_id.len());
    ad.extend_from_slice(ta.as_bytes());
    ad.extend_from_slice(object_id);
    ad
}

fn data_ad(ta: &Uuid, object_id: &[u8], data_len: usize) -> Vec<u8> {
    let mut ad = fek_ad(ta, object_id);
    ad.extend_from_slice(&(data_len as u64).to_le_bytes());
    ad
}

pub fn wrap_fek(tsk: &Tsk, object_id: &[u8], fek: &Fek, fek_nonce: [u8; NONCE_LEN]) -> KeyBlock {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(tsk.bytes()));
    let ad = fek_ad(&tsk.ta(), object_id);
    let ct = cipher
        .encrypt(Nonce::from_slice(&fek_nonce), Payload { msg: &fek.0, aad: &ad })
        .expect("AES-GCM encryption of 32 bytes cannot fail");
    let mut wrapped_fek = [0u8; WRAPPED_FEK_LEN];
    wrapped_fek.copy_from_slice(&ct);
    KeyBlock { fek_nonce, wrapped_fek }
}

pub fn unwrap_fek(tsk: &Tsk, object_id: &[u8], block: &KeyBlock) -> Result<Fek> {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(tsk.bytes()));
    let ad = fek_ad(&tsk.ta(), object_id);
    let pt = cipher
        .decrypt(Nonce::from_slice(&block.fek_nonce), Payload { msg: &block.wrapped_fek, aad: &ad })
        .map_err(|_| Error::CorruptObject)?;
    let mut fek = [0u8; KEY_LEN];
    fek.copy_from_slice(&pt);
    Ok(Fek(fek))
}

/// Serializes a whole object file.
pub fn seal(
    ta: &Uuid,
    object_id: &[u8],
    keys: &KeyBlock,
    fek: &Fek,
    data_nonce: [u8; NONCE_LEN],
    plaintext: &[u8],
) -> Vec<u8> {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&fek.0));
    let ad = data_ad(ta, object_id, plaintext.len());
    let body = cipher
        .encrypt(Nonce::from_slice(&data_nonce), Payload { msg: plaintext, aad: &ad })
        .expect("AES-GCM encryption within size limits cannot fail");

    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(ta.as_bytes());
    out.extend_from_slice(&keys.fek_nonce);
    out.extend_from_slice(&keys.wrapped_fek);
    out.extend_from_slice(&data_nonce);
    out.extend_from_slice(&body);
    debug_assert_eq!(out.len(), file_len(plaintext.len()));
    out
}

/// Parses and authenticates an object file for `tsk.ta()`, returning the
/// FEK, the fixed key block and the plaintext.
pub fn open(tsk: &Tsk, object_id: &[u8], file: &[u8]) -> Result<(Fek, KeyBlock, Vec<u8>)> {
    if file.len() < file_len(0) || &file[..4] != MAGIC || file[4] != VERSION {
        return Err(Error::CorruptObject);
    }
    if file[UUID_OFFSET..FEK_NONCE_OFFSET] != tsk.ta().as_bytes()[..] {
        return Err(Error::CorruptObject);
    }
    let mut block = KeyBlock { fek_nonce: [0; NONCE_LEN], wrapped_fek: [0; WRAPPED_FEK_LEN] };
    block.fek_nonce.copy_from_slice(&file[FEK_NONCE_OFFSET..WRAPPED_FEK_OFFSET]);
    block.wrapped_fek.copy_from_slice(&file[WRAPPED_FEK_OFFSET..DATA_NONCE_OFFSET]);
    let fek = unwrap_fek(tsk, object_id, &block)?;

    let data_nonce = &file[DATA_NONCE_OFFSET..HEADER_LEN];
    let body = &file[HEADER_LEN..];
    let data_len = body.len() - TAG_LEN;
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&fek.0));
    let ad = data_ad(&tsk.ta(), object_id, data_len);
    let plaintext = cipher
        .decrypt(Nonce::from_slice(data_nonce), Payload { msg: body, aad: &ad })
        .map_err(|_| Error::CorruptObject)?;
    Ok((fek, block, plaintext))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::keys::{derive_ssk, derive_tsk, Huk};

    fn tsk() -> Tsk {
        derive_tsk(&derive_ssk(&Huk::static_fallback()), &Uuid::from_u128(7))
    }

    #[test]
    fn header_is_93_bytes() {
        assert_eq!(HEADER_LEN, 93);
        assert_eq!(file_len(256), 93 + 256 + 16);
    }

    #[test]
    fn seal_open_round_trip() {
        let tsk = tsk();
        let fek = Fek([9; 32]);
        let keys = wrap_fek(&tsk, b"obj", &fek, [1; 12]);
        let file = seal(&tsk.ta(), b"obj", &keys, &fek, [2; 12], b"payload");
        let (fek2, keys2, pt) = open(&tsk, b"obj", &file).unwrap();
        assert_eq!(fek2, fek);
        assert_eq!(keys2, keys);
        assert_eq!(pt, b"payload");
    }

    #[test]
    fn wrong_object_id_or_ta_is_rejected() {
        let tsk = tsk();
        let fek = Fek([9; 32]);
        let keys = wrap_fek(&tsk, b"obj", &fek, [1; 12]);
        let file = seal(&tsk.ta(), b"obj", &keys, &fek, [2; 12], b"payload");
        assert!(matches!(open(&tsk, b"obk", &file), Err(Error::CorruptObject)));
        let other = derive_tsk(&derive_ssk(&Huk::static_fallback()), &Uuid::from_u128(8));
        assert!(matches!(open(&other, b"obj", &file), Err(Error::CorruptObject)));
    }

    #[test]
    fn truncation_is_corruption() {
        let tsk = tsk();
        let fek = Fek([9; 32]);
        let keys = wrap_fek(&tsk, b"obj", &fek, [1; 12]);
        let file = seal(&tsk.ta(), b"obj", &keys, &fek, [2; 12], b"payload");
        for cut in [0, 4, HEADER_LEN, file.len() - 1] {
            assert!(matches!(open(&tsk, b"obj", &file[..cut]), Err(Error::CorruptObject)), "cut {cut}");
        }
    }
}
