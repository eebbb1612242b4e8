//! Sparse, region-mapped VM memory.
//!
//! The address space is 48-bit; pages materialize on first touch. Accesses
//! must fall inside a mapped region, and writes additionally require the
//! region to be writable. Reads of never-touched bytes in a mapped region
//! return zero.

use std::collections::HashMap;
use std::fmt;

pub const PAGE: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemFault {
    Unmapped { addr: u64 },
    ReadOnly { addr: u64, region: &'static str },
}

impl fmt::Display for MemFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemFault::Unmapped { addr } => write!(f, "unmapped address {addr:#x}"),
            MemFault::ReadOnly { addr, region } => {
                write!(f, "write to read-only {region} memory at {addr:#x}")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Region {
    pub start: u64,
    pub end: u64,
    pub writable: bool,
    pub name: &'static str,
}

#[derive(Default)]
pub struct Memory {
    pages: HashMap<u64, Box<[u8; PAGE as usize]>>,
    regions: Vec<Region>,
}

impl Memory {
    pub fn new() -> Self {
        Memory::default()
    }

    pub fn add_region(&mut self, start: u64, len: u64, writable: bool, name: &'static str) {
        self.regions.push(Region {
            start,
            end: start + len,
            writable,
            name,
        });
    }

    /// Extend a region (the heap grows as allocations are made).
    pub fn grow_region(&mut self, name: &str, new_end: u64) {
        if let Some(r) = self.regions.iter_mut().find(|r| r.name == name) {
            if new_end > r.end {
                r.end = new_end;
            }
        }
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    /// An access must sit entirely inside one region; the gaps between
    /// regions are wide, so a spanning access is a fault either way.
    fn check(&self, addr: u64, len: u64, write: bool) -> Result<(), MemFault> {
        let region = self
            .regions
            .iter()
            .find(|r| addr >= r.start && addr < r.end);
        match region {
            None => Err(MemFault::Unmapped { addr }),
            Some(r) => {
                if addr + len > r.end {
                    return Err(MemFault::Unmapped { addr: r.end });
                }
                if write && !r.writable {
                    return Err(MemFault::ReadOnly {
                        addr,
                        region: r.name,
                    });
                }
                Ok(())
            }
        }
    }

    pub fn is_writable(&self, addr: u64, len: u64) -> bool {
        self.check(addr, len, true).is_ok()
    }

    fn page_mut(&mut self, page: u64) -> &mut [u8; PAGE as usize] {
        self.pages
            .entry(page)
            .or_insert_with(|| Box::new([0u8; PAGE as usize]))
    }

    fn raw_read(&self, addr: u64, out: &mut [u8]) {
        for (i, b) in out.iter_mut().enumerate() {
            let a = addr + i as u64;
            *b = self
                .pages
                .get(&(a / PAGE))
                .map(|p| p[(a % PAGE) as usize])
                .unwrap_or(0);
        }
    }

    fn raw_write(&mut self, addr: u64, data: &[u8]) {
        for (i, b) in data.iter().enumerate() {
            let a = addr + i as u64;
            self.page_mut(a / PAGE)[(a % PAGE) as usize] = *b;
        }
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>, MemFault> {
        self.check(addr, len, false)?;
        let mut out = vec![0u8; len as usize];
        self.raw_read(addr, &mut out);
        Ok(out)
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), MemFault> {
        self.check(addr, data.len() as u64, true)?;
        self.raw_write(addr, data);
        Ok(())
    }

    /// Unchecked write used only while the loader lays out code-adjacent
    /// structures (method tables, read-only globals) before execution.
    pub fn poke(&mut self, addr: u64, data: &[u8]) {
        self.raw_write(addr, data);
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, MemFault> {
        self.check(addr, 8, false)?;
        let mut b = [0u8; 8];
        self.raw_read(addr, &mut b);
        Ok(u64::from_le_bytes(b))
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) -> Result<(), MemFault> {
        self.write(addr, &value.to_le_bytes())
    }

    pub fn read_16(&self, addr: u64) -> Result<[u8; 16], MemFault> {
        self.check(addr, 16, false)?;
        let mut b = [0u8; 16];
        self.raw_read(addr, &mut b);
        Ok(b)
    }

    /// Contiguous runs of touched, mapped bytes — everything an attacker
    /// with arbitrary read access could observe.
    pub fn snapshot(&self) -> Vec<(u64, Vec<u8>)> {
        let mut page_ids: Vec<u64> = self.pages.keys().copied().collect();
        page_ids.sort_unstable();
        let mut runs: Vec<(u64, Vec<u8>)> = Vec::new();
        for pid in page_ids {
            let page_start = pid * PAGE;
            let page = &self.pages[&pid];
            for r in &self.regions {
                let lo = r.start.max(page_start);
                let hi = r.end.min(page_start + PAGE);
                if lo >= hi {
                    continue;
                }
                let bytes = page[(lo - page_start) as usize..(hi - page_start) as usize].to_vec();
                match runs.last_mut() {
                    Some((start, data)) if *start + data.len() as u64 == lo => {
                        data.extend_from_slice(&bytes)
                    }
                    _ => runs.push((lo, bytes)),
                }
            }
        }
        runs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unmapped_access_faults() {
        let m = Memory::new();
        assert!(matches!(m.read(0x1000, 8), Err(MemFault::Unmapped { .. })));
    }

    #[test]
    fn readonly_region_rejects_writes_but_serves_reads() {
        let mut m = Memory::new();
        m.add_region(0x1000, 0x1000, false, "code");
        m.poke(0x1000, &[1, 2, 3]);
        assert_eq!(m.read(0x1000, 3).unwrap(), vec![1, 2, 3]);
        assert!(matches!(
            m.write(0x1000, &[9]),
            Err(MemFault::ReadOnly { .. })
        ));
    }

    #[test]
    fn zero_fill_and_round_trip() {
        let mut m = Memory::new();
        m.add_region(0x8000, 0x1000, true, "stack");
        assert_eq!(m.read_u64(0x8100).unwrap(), 0);
        m.write_u64(0x8100, 0xdead_beef).unwrap();
        assert_eq!(m.read_u64(0x8100).unwrap(), 0xdead_beef);
    }

    #[test]
    fn snapshot_merges_touched_pages() {
        let mut m = Memory::new();
        m.add_region(0x0, 3 * PAGE, true, "arena");
        m.write_u64(10, 77).unwrap();
        m.write_u64(PAGE + 8, 88).unwrap();
        let snap = m.snapshot();
        assert_eq!(snap.len(), 1);
        assert_eq!(snap[0].0, 0);
        assert_eq!(snap[0].1.len(), 2 * PAGE as usize);
    }
}
