//! Shadow MAC storage, indexed by the address at which the protected
//! pointer is stored.
//!
//! The slot bytes live in a writable VM memory region, so the attacker can
//! read and corrupt them at will; soundness rests on key secrecy alone, not
//! on table integrity. Two modes:
//!
//! - `Exact`: one slot per address, allocated on first use. No false
//!   positives; the default.
//! - `Direct(n)`: a direct-mapped table of `n` slots (power of two).
//!   Distinct live addresses can alias a slot and overwrite each other,
//!   which surfaces as a spurious check failure; the collision counter
//!   tracks aliasing overwrites.
//!
//! An all-zero slot doubles as "no MAC stored", so a never-MACed pointer
//! fails its first check the same way a corrupted one does.

use crate::mac::MacValue;
use crate::vm::memory::Memory;
use serde::Serialize;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableMode {
    Exact,
    Direct(u64),
}

impl TableMode {
    pub fn parse(s: &str) -> Result<TableMode, String> {
        if s == "exact" {
            return Ok(TableMode::Exact);
        }
        if let Some(n) = s.strip_prefix("direct:") {
            let n: u64 = n
                .parse()
                .map_err(|_| format!("invalid table size `{n}`"))?;
            if !n.is_power_of_two() {
                return Err(format!("table size {n} is not a power of two"));
            }
            return Ok(TableMode::Direct(n));
        }
        Err(format!(
            "invalid mac-table mode `{s}` (expected `exact` or `direct:<2^k>`)"
        ))
    }
}

/// Direct-mapped slot index: pointers are 8-byte aligned, so the low three
/// address bits carry no information.
pub fn slot_of(address: u64, size: u64) -> u64 {
    debug_assert!(size.is_power_of_two());
    (address >> 3) & (size - 1)
}

#[derive(Debug, Default, Clone, Copy, Serialize)]
pub struct TableStats {
    pub stores: u64,
    pub loads: u64,
    pub hits: u64,
    pub misses: u64,
    pub collisions: u64,
}

/// Exact-mode slot space ran out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableFull;

impl std::fmt::Display for TableFull {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("mac table exhausted")
    }
}

impl std::error::Error for TableFull {}

pub struct MacTable {
    mode: TableMode,
    base: u64,
    capacity: u64,
    /// Exact mode: protected address -> allocated slot address.
    index: HashMap<u64, u64>,
    next_slot: u64,
    /// Direct mode: slot address -> owning protected address, for the
    /// collision counter only. Attacker writes bypass this bookkeeping,
    /// which is fine: stats describe program behavior, not security.
    owner: HashMap<u64, u64>,
    pub stats: TableStats,
}

pub const SLOT_BYTES: u64 = 16;

impl MacTable {
    /// Exact-mode slot capacity; generous for desk-scale programs.
    pub const EXACT_CAPACITY: u64 = 1 << 16;

    pub fn new(mode: TableMode, base: u64) -> MacTable {
        let capacity = match mode {
            TableMode::Exact => Self::EXACT_CAPACITY,
            TableMode::Direct(n) => n,
        };
        MacTable {
            mode,
            base,
            capacity,
            index: HashMap::new(),
            next_slot: 0,
            owner: HashMap::new(),
            stats: TableStats::default(),
        }
    }

    pub fn mode(&self) -> TableMode {
        self.mode
    }

    /// Bytes of VM address space the table occupies.
    pub fn region_len(&self) -> u64 {
        self.capacity * SLOT_BYTES
    }

    /// VM address of the slot for `address`, allocating it in exact mode.
    /// `None` means the exact-mode table is full.
    pub fn slot_address(&mut self, address: u64) -> Option<u64> {
        match self.mode {
            TableMode::Direct(n) => Some(self.base + slot_of(address, n) * SLOT_BYTES),
            TableMode::Exact => {
                if let Some(&s) = self.index.get(&address) {
                    return Some(s);
                }
                if self.next_slot >= self.capacity {
                    return None;
                }
                let s = self.base + self.next_slot * SLOT_BYTES;
                self.next_slot += 1;
                self.index.insert(address, s);
                Some(s)
            }
        }
    }

    /// Slot address without allocating; used by loads.
    pub fn peek_slot(&self, address: u64) -> Option<u64> {
        match self.mode {
            TableMode::Direct(n) => Some(self.base + slot_of(address, n) * SLOT_BYTES),
            TableMode::Exact => self.index.get(&address).copied(),
        }
    }

    pub fn store(
        &mut self,
        mem: &mut Memory,
        address: u64,
        mac: MacValue,
    ) -> Result<(), TableFull> {
        let slot = self.slot_address(address).ok_or(TableFull)?;
        if let TableMode::Direct(_) = self.mode {
            match self.owner.insert(slot, address) {
                Some(prev) if prev != address => self.stats.collisions += 1,
                _ => {}
            }
        }
        self.stats.stores += 1;
        mem.write(slot, &mac.0).map_err(|_| TableFull)
    }

    /// The stored MAC, or `None` when nothing was ever written for this
    /// address (or the slot holds the all-zero sentinel).
    pub fn load(&mut self, mem: &Memory, address: u64) -> Option<MacValue> {
        self.stats.loads += 1;
        let slot = match self.peek_slot(address) {
            Some(s) => s,
            None => {
                self.stats.misses += 1;
                return None;
            }
        };
        let bytes = match mem.read_16(slot) {
            Ok(b) => b,
            Err(_) => {
                self.stats.misses += 1;
                return None;
            }
        };
        let v = MacValue(bytes);
        if v.is_zero() {
            self.stats.misses += 1;
            None
        } else {
            self.stats.hits += 1;
            Some(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: u64 = 0x8000_0000;

    fn mem_for(t: &MacTable) -> Memory {
        let mut m = Memory::new();
        m.add_region(BASE, t.region_len(), true, "mac-table");
        m
    }

    fn mv(b: u8) -> MacValue {
        MacValue([b; 16])
    }

    #[test]
    fn slot_of_examples() {
        assert_eq!(slot_of(0x1000, 256), 0);
        assert_eq!(slot_of(0x1008, 256), 1);
        assert_eq!(slot_of(0x1000 + 256 * 8, 256), 0);
    }

    #[test]
    fn store_load_round_trip_exact() {
        let mut t = MacTable::new(TableMode::Exact, BASE);
        let mut m = mem_for(&t);
        t.store(&mut m, 0x1000, mv(7)).unwrap();
        assert_eq!(t.load(&m, 0x1000), Some(mv(7)));
        assert_eq!(t.load(&m, 0x2000), None);
    }

    #[test]
    fn direct_mapped_collision_overwrites_and_counts() {
        let mut t = MacTable::new(TableMode::Direct(256), BASE);
        let mut m = mem_for(&t);
        t.store(&mut m, 0x1000, mv(1)).unwrap();
        t.store(&mut m, 0x1000 + 2048, mv(2)).unwrap();
        assert_eq!(t.load(&m, 0x1000), Some(mv(2)));
        assert_eq!(t.stats.collisions, 1);
    }

    #[test]
    fn exact_keeps_both_aliasing_addresses() {
        let mut t = MacTable::new(TableMode::Exact, BASE);
        let mut m = mem_for(&t);
        t.store(&mut m, 0x1000, mv(1)).unwrap();
        t.store(&mut m, 0x1000 + 2048, mv(2)).unwrap();
        assert_eq!(t.load(&m, 0x1000), Some(mv(1)));
        assert_eq!(t.load(&m, 0x1000 + 2048), Some(mv(2)));
        assert_eq!(t.stats.collisions, 0);
    }

    #[test]
    fn attacker_overwrite_of_slot_memory_is_what_loads_see() {
        let mut t = MacTable::new(TableMode::Exact, BASE);
        let mut m = mem_for(&t);
        t.store(&mut m, 0x1000, mv(7)).unwrap();
        let slot = t.peek_slot(0x1000).unwrap();
        m.write(slot, &[0xee; 16]).unwrap();
        assert_eq!(t.load(&m, 0x1000), Some(mv(0xee)));
    }

    #[test]
    fn same_store_twice_is_not_a_collision() {
        let mut t = MacTable::new(TableMode::Direct(64), BASE);
        let mut m = mem_for(&t);
        t.store(&mut m, 0x1000, mv(1)).unwrap();
        t.store(&mut m, 0x1000, mv(2)).unwrap();
        assert_eq!(t.stats.collisions, 0);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(TableMode::parse("exact").unwrap(), TableMode::Exact);
        assert_eq!(
            TableMode::parse("direct:256").unwrap(),
            TableMode::Direct(256)
        );
        assert!(TableMode::parse("direct:300").is_err());
        assert!(TableMode::parse("lru").is_err());
    }
}
