//! Desk-scale emulator of a TrustZone-style trusted execution environment.
//!
//! * [`client`]: normal-world client API (contexts, sessions, shared memory, commands).
//! * [`tee`]: the emulated secure world, TA lifecycle and boundary accounting.
//! * [`supplicant`]: normal-world daemon serving TA loads and object file I/O.
//! * [`kv`]: the key-value TA and its static chained hash table.
//! * [`storage`]: trusted storage with the HUK → SSK → TSK → FEK key hierarchy.
//! * [`bench`]: shared-memory and secure-storage benchmarks plus reporting.

pub mod bench;
pub mod client;
pub mod error;
pub mod kv;
pub mod storage;
pub mod supplicant;
pub mod ta;
pub mod tee;

pub use client::{Client, DEFAULT_DEVICE, ContextHandle, Operation, Parameter, SessionHandle, SharedMemoryRegion, ShmKind};
pub use error::{rc, Error, Result};
pub use tee::{BoundaryStats, Tee, TeeConfig};
pub use uuid::Uuid;
