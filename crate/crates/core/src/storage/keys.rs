//! Storage key hierarchy: HUK → SSK → TSK, plus per-object FEKs.

use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use sha2::Sha256;
use uuid::Uuid;

use crate::error::{Error, Result};

pub const KEY_LEN: usize = 32;

/// Message fed to HMAC when deriving the SSK from the HUK.
pub const SSK_DERIVATION_MESSAGE: &[u8] = b"ssk-derivation-v1";

const STATIC_HUK_STRING: &[u8] = b"static-huk-fallback";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HukSource {
    Provisioned,
    StaticFallback,
}

/// Hardware unique key.
#[derive(Clone, PartialEq, Eq)]
pub struct Huk {
    bytes: [u8; KEY_LEN],
    source: HukSource,
}

impl Huk {
    pub fn provisioned(bytes: [u8; KEY_LEN]) -> Self {
        Self { bytes, source: HukSource::Provisioned }
    }

    /// The fixed string used when no device key is available, zero-padded
    /// to 32 bytes.
    pub fn static_fallback() -> Self {
        let mut bytes = [0u8; KEY_LEN];
        bytes[..STATIC_HUK_STRING.len()].copy_from_slice(STATIC_HUK_STRING);
        Self { bytes, source: HukSource::StaticFallback }
    }

    pub fn bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }

    pub fn source(&self) -> HukSource {
        self.source
    }
}

impl FromStr for Huk {
    type Err = Error;

    /// `static` or 64 hex digits.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("static") {
            return Ok(Self::static_fallback());
        }
        let mut bytes = [0u8; KEY_LEN];
        hex::decode_to_slice(s, &mut bytes).map_err(|e| Error::Config(format!("HUK must be `static` or 64 hex digits: {e}")))?;
        Ok(Self::provisioned(bytes))
    }
}

impl fmt::Debug for Huk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Huk").field("source", &self.source).finish_non_exhaustive()
    }
}

/// Secure storage key.
#[derive(Clone, PartialEq, Eq)]
pub struct Ssk([u8; KEY_LEN]);

impl Ssk {
    pub fn bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

/// Per-TA storage key.
#[derive(Clone, PartialEq, Eq)]
pub struct Tsk {
    bytes: [u8; KEY_LEN],
    ta: Uuid,
}

impl Tsk {
    pub fn bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }

    pub fn ta(&self) -> Uuid {
        self.ta
    }
}

/// File encryption key. Only ever written out wrapped under a TSK.
#[derive(Clone, PartialEq, Eq)]
pub struct Fek(pub(crate) [u8; KEY_LEN]);

macro_rules! redacted_debug {
    ($($t:ty),*) => {$(
        impl fmt::Debug for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(concat!(stringify!($t), "(..)"))
            }
        }
    )*};
}
redacted_debug!(Ssk, Tsk, Fek);

fn hmac_sha256(key: &[u8], msg: &[u8]) -> [u8; KEY_LEN] {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(msg);
    mac.finalize().into_bytes().into()
}

pub fn derive_ssk(huk: &Huk) -> Ssk {
    Ssk(hmac_sha256(&huk.bytes, SSK_DERIVATION_MESSAGE))
}

pub fn derive_tsk(ssk: &Ssk, ta: &Uuid) -> Tsk {
    Tsk { bytes: hmac_sha256(&ssk.0, ta.as_bytes()), ta: *ta }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_fallback_layout() {
        let huk = Huk::static_fallback();
        assert_eq!(&huk.bytes()[..19], b"static-huk-fallback");
        assert!(huk.bytes()[19..].iter().all(|&b| b == 0));
        assert_eq!(huk.source(), HukSource::StaticFallback);
    }

    #[test]
    fn parse_huk() {
        assert_eq!("static".parse::<Huk>().unwrap(), Huk::static_fallback());
        let h: Huk = "00".repeat(31).chars().chain("ff".chars()).collect::<String>().parse().unwrap();
        assert_eq!(h.bytes()[31], 0xff);
        assert_eq!(h.source(), HukSource::Provisioned);
        assert!("abcd".parse::<Huk>().is_err());
        assert!("zz".repeat(32).parse::<Huk>().is_err());
    }

    #[test]
    fn derivation_is_deterministic() {
        let huk = Huk::static_fallback();
        assert_eq!(derive_ssk(&huk), derive_ssk(&huk));
        let ssk = derive_ssk(&huk);
        let a = Uuid::from_u128(1);
        let b = Uuid::from_u128(2);
        assert_eq!(derive_tsk(&ssk, &a), derive_tsk(&ssk, &a));
        assert_ne!(derive_tsk(&ssk, &a).bytes(), derive_tsk(&ssk, &b).bytes());
    }

    #[test]
    fn one_bit_huk_change_changes_ssk() {
        let mut bytes = *Huk::static_fallback().bytes();
        bytes[31] ^= 1;
        assert_ne!(derive_ssk(&Huk::provisioned(bytes)), derive_ssk(&Huk::static_fallback()));
    }

    #[test]
    fn debug_does_not_leak_keys() {
        let ssk = derive_ssk(&Huk::static_fallback());
        assert_eq!(format!("{ssk:?}"), "Ssk(..)");
    }
}
