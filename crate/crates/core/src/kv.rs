//! Key-value trusted application.
//!
//! A static hash table with 251 separate chains and modular hashing. Values
//! are copied out of shared memory into TA memory, and each entry is charged
//! `value.len() + ENTRY_OVERHEAD` bytes against the TA memory limit.
//!
//! Command ABI:
//!
//! | id | command | params |
//! |----|---------|--------|
//! | 0  | PUT     | `[0]` value key lo/hi, `[1]` memref in, `[2]` optional value window offset/len |
//! | 1  | GET     | `[0]` value key lo/hi, `[1]` memref out, `[2]` optional value window offset/len, `b` receives the value length |
//! | 2  | DEL     | `[0]` value key lo/hi |
//! | 3  | CLEAR   | none |
//!
//! Without a window parameter the data is the whole memref extent.

use crate::error::{Error, Result};
use crate::tee::{HeapAllocation, TaContext, TaHeap, TaParams, TrustedApp};

pub const CHAINS: usize = 251;
pub const MAX_VALUE_LEN: usize = 4096;
/// Bytes charged per entry on top of the value itself: key, length,
/// chain link and allocation header.
pub const ENTRY_OVERHEAD: usize = 32;

pub const CMD_PUT: u32 = 0;
pub const CMD_GET: u32 = 1;
pub const CMD_DEL: u32 = 2;
pub const CMD_CLEAR: u32 = 3;

pub fn hash_index(key: u64) -> usize {
    (key % CHAINS as u64) as usize
}

pub fn split_key(key: u64) -> (u32, u32) {
    (key as u32, (key >> 32) as u32)
}

pub fn join_key(lo: u32, hi: u32) -> u64 {
    (hi as u64) << 32 | lo as u64
}

struct Node {
    key: u64,
    value: Vec<u8>,
    charge: HeapAllocation,
    next: Option<Box<Node>>,
}

pub struct HashTable {
    chains: Vec<Option<Box<Node>>>,
    count: usize,
}

impl Default for HashTable {
    fn default() -> Self {
        Self::new()
    }
}

impl HashTable {
    pub fn new() -> Self {
        Self { chains: (0..CHAINS).map(|_| None).collect(), count: 0 }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn get(&self, key: u64) -> Option<&[u8]> {
        let mut cur = self.chains[hash_index(key)].as_deref();
        while let Some(node) = cur {
            if node.key == key {
                return Some(&node.value);
            }
            cur = node.next.as_deref();
        }
        None
    }

    fn find_mut(&mut self, key: u64) -> Option<&mut Node> {
        let mut cur = self.chains[hash_index(key)].as_deref_mut();
        while let Some(node) = cur {
            if node.key == key {
                return Some(node);
            }
            cur = node.next.as_deref_mut();
        }
        None
    }

    /// Inserts or overwrites. On `OutOfMemory` the table is unchanged.
    pub fn insert(&mut self, heap: &mut TaHeap, key: u64, value: &[u8]) -> Result<()> {
        if value.is_empty() || value.len() > MAX_VALUE_LEN {
            return Err(Error::bad_params(format!("value length {} not in 1..={MAX_VALUE_LEN}", value.len())));
        }
        let need = value.len() + ENTRY_OVERHEAD;
        if let Some(node) = self.find_mut(key) {
            heap.realloc(&mut node.charge, need)?;
            node.value.clear();
            node.value.extend_from_slice(value);
            Ok(())
        } else {
            let charge = heap.alloc(need)?;
            let idx = hash_index(key);
            let next = self.chains[idx].take();
            self.chains[idx] = Some(Box::new(Node { key, value: value.to_vec(), charge, next }));
            self.count += 1;
            Ok(())
        }
    }

    pub fn remove(&mut self, heap: &mut TaHeap, key: u64) -> Result<()> {
        let mut link = &mut self.chains[hash_index(key)];
        loop {
            match link {
                None => return Err(Error::ItemNotFound),
                Some(node) if node.key == key => {
                    let mut node = link.take().unwrap();
                    *link = node.next.take();
                    heap.free(node.charge);
                    self.count -= 1;
                    return Ok(());
                }
                Some(node) => link = &mut node.next,
            }
        }
    }

    pub fn clear(&mut self, heap: &mut TaHeap) {
        for chain in &mut self.chains {
            let mut cur = chain.take();
            while let Some(mut node) = cur {
                cur = node.next.take();
                heap.free(node.charge);
            }
        }
        self.count = 0;
    }

    /// Keys stored in one chain, head first.
    pub fn chain_keys(&self, idx: usize) -> Vec<u64> {
        let mut keys = Vec::new();
        let mut cur = self.chains[idx].as_deref();
        while let Some(node) = cur {
            keys.push(node.key);
            cur = node.next.as_deref();
        }
        keys
    }
}

impl Drop for HashTable {
    // Iterative drop so long chains cannot overflow the stack.
    fn drop(&mut self) {
        for chain in &mut self.chains {
            let mut cur = chain.take();
            while let Some(mut node) = cur {
                cur = node.next.take();
            }
        }
    }
}

#[derive(Default)]
pub struct KvTa {
    table: HashTable,
}

impl KvTa {
    pub fn new() -> Self {
        Self::default()
    }
}

fn window(params: &TaParams<'_>, memref_len: usize) -> Result<(usize, usize)> {
    if !params.has_value(2) {
        return Ok((0, memref_len));
    }
    let (off, len) = params.value(2)?;
    let (off, len) = (off as usize, len as usize);
    match off.checked_add(len) {
        Some(end) if end <= memref_len => Ok((off, len)),
        _ => Err(Error::bad_params("data window outside memref")),
    }
}

impl TrustedApp for KvTa {
    fn invoke(&mut self, ctx: &mut TaContext<'_>, _session: u64, command_id: u32, params: &mut TaParams<'_>) -> Result<()> {
        match command_id {
            CMD_PUT => {
                let (lo, hi) = params.value(0)?;
                let data = params.memref(1)?;
                let (off, len) = window(params, data.len())?;
                self.table.insert(ctx.heap(), join_key(lo, hi), &data[off..off + len])
            }
            CMD_GET => {
                let (lo, hi) = params.value(0)?;
                let value = self.table.get(join_key(lo, hi)).ok_or(Error::ItemNotFound)?;
                let out = params.memref_mut(1)?;
                let out_len = out.len();
                let (off, len) = window(params, out_len)?;
                if len < value.len() {
                    if params.has_value(2) {
                        params.set_value(2, off as u32, value.len() as u32)?;
                    }
                    return Err(Error::ShortBuffer { required: value.len() });
                }
                params.memref_mut(1)?[off..off + value.len()].copy_from_slice(value);
                if params.has_value(2) {
                    params.set_value(2, off as u32, value.len() as u32)?;
                }
                Ok(())
            }
            CMD_DEL => {
                let (lo, hi) = params.value(0)?;
                self.table.remove(ctx.heap(), join_key(lo, hi))
            }
            CMD_CLEAR => {
                self.table.clear(ctx.heap());
                Ok(())
            }
            other => Err(Error::bad_params(format!("unknown command {other}"))),
        }
    }

    fn item_count(&self) -> Option<u64> {
        Some(self.table.len() as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tee::DEFAULT_TA_MEMORY_LIMIT;

    #[test]
    fn modular_hashing() {
        assert_eq!(hash_index(0), 0);
        assert_eq!(hash_index(251), 0);
        assert_eq!(hash_index(252), 1);
        assert_eq!(hash_index(502), 0);
        // 524287 = 251 * 2088 + 199
        assert_eq!(hash_index(524287), 199);
    }

    #[test]
    fn hash_matches_subtraction_oracle() {
        fn slow_mod(mut k: u128) -> usize {
            let mut step = 251u128;
            while step * 2 <= k {
                step *= 2;
            }
            while k >= 251 {
                if k >= step {
                    k -= step;
                }
                step = (step / 2).max(251);
            }
            k as usize
        }
        for k in [0u64, 250, 251, 252, 524287, u32::MAX as u64, u64::MAX, 0xdead_beef_cafe] {
            assert_eq!(hash_index(k), slow_mod(k as u128), "key {k}");
        }
    }

    #[test]
    fn key_split_round_trips() {
        let k = 0x1234_5678_9abc_def0;
        let (lo, hi) = split_key(k);
        assert_eq!((lo, hi), (0x9abc_def0, 0x1234_5678));
        assert_eq!(join_key(lo, hi), k);
    }

    #[test]
    fn colliding_keys_share_a_chain_newest_first() {
        let mut heap = TaHeap::new(DEFAULT_TA_MEMORY_LIMIT);
        let mut t = HashTable::new();
        t.insert(&mut heap, 251, b"a").unwrap();
        t.insert(&mut heap, 502, b"b").unwrap();
        t.insert(&mut heap, 0, b"c").unwrap();
        assert_eq!(t.chain_keys(0), vec![0, 502, 251]);
        t.remove(&mut heap, 502).unwrap();
        assert_eq!(t.chain_keys(0), vec![0, 251]);
        assert_eq!(t.get(251), Some(&b"a"[..]));
    }

    #[test]
    fn overwrite_keeps_one_entry() {
        let mut heap = TaHeap::new(DEFAULT_TA_MEMORY_LIMIT);
        let mut t = HashTable::new();
        t.insert(&mut heap, 7, &[1; 1024]).unwrap();
        t.insert(&mut heap, 7, &[2; 100]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.get(7).unwrap(), &[2; 100][..]);
        assert_eq!(heap.used(), 100 + ENTRY_OVERHEAD);
    }

    #[test]
    fn value_length_bounds() {
        let mut heap = TaHeap::new(DEFAULT_TA_MEMORY_LIMIT);
        let mut t = HashTable::new();
        assert!(matches!(t.insert(&mut heap, 1, &[]), Err(Error::BadParameters(_))));
        assert!(matches!(t.insert(&mut heap, 1, &[0; 4097]), Err(Error::BadParameters(_))));
        t.insert(&mut heap, 1, &[0; 4096]).unwrap();
    }

    #[test]
    fn double_delete_is_not_found() {
        let mut heap = TaHeap::new(DEFAULT_TA_MEMORY_LIMIT);
        let mut t = HashTable::new();
        t.insert(&mut heap, 3, b"x").unwrap();
        t.remove(&mut heap, 3).unwrap();
        assert!(matches!(t.remove(&mut heap, 3), Err(Error::ItemNotFound)));
        assert!(t.get(3).is_none());
    }

    #[test]
    fn failed_overwrite_leaves_old_value() {
        let mut heap = TaHeap::new(2 * (1024 + ENTRY_OVERHEAD));
        let mut t = HashTable::new();
        t.insert(&mut heap, 1, &[1; 1024]).unwrap();
        t.insert(&mut heap, 2, &[2; 1024]).unwrap();
        let used = heap.used();
        assert!(matches!(t.insert(&mut heap, 1, &[3; 1025]), Err(Error::OutOfMemory)));
        assert_eq!(heap.used(), used);
        assert_eq!(t.get(1).unwrap(), &[1; 1024][..]);
    }

    #[test]
    fn clear_returns_all_memory() {
        let mut heap = TaHeap::new(DEFAULT_TA_MEMORY_LIMIT);
        let mut t = HashTable::new();
        for k in 0..600 {
            t.insert(&mut heap, k, &[0; 16]).unwrap();
        }
        t.clear(&mut heap);
        assert_eq!(heap.used(), 0);
        assert!(t.is_empty());
    }
}
