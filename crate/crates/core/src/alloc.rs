//! Per-allocation randomized heap and stack-frame padding.
//!
//! Every allocation reserves room for the worst-case pad and returns
//! `base + pad` where `pad` is a fresh draw of `entropy_bits` bits times the
//! 8-byte granule. Two pointers landing at the same address across
//! allocations of the same size therefore requires the pads to agree, which
//! happens with probability `2^-entropy_bits` per reuse.
//!
//! Freed ranges are not reused unless explicitly enabled: same-address reuse
//! is exactly the condition replay attacks need, so it has to be opted into.

use crate::prng::ReservedPrng;
use std::collections::HashMap;
use std::fmt;

pub const GRANULE: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AllocError {
    OutOfMemory,
    BadFree { addr: u64 },
    BadSize,
}

impl fmt::Display for AllocError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllocError::OutOfMemory => write!(f, "heap exhausted"),
            AllocError::BadFree { addr } => write!(f, "free of unallocated address {addr:#x}"),
            AllocError::BadSize => write!(f, "allocation size must be positive"),
        }
    }
}

pub struct HeapAllocator {
    cursor: u64,
    end: u64,
    entropy_bits: u32,
    reuse: bool,
    /// aligned size -> freed extent bases (LIFO).
    free_lists: HashMap<u64, Vec<u64>>,
    /// live address -> (extent base, aligned size).
    live: HashMap<u64, (u64, u64)>,
}

impl HeapAllocator {
    pub fn new(base: u64, len: u64, entropy_bits: u32, reuse: bool) -> Self {
        assert!(entropy_bits <= 16);
        HeapAllocator {
            cursor: base,
            end: base + len,
            entropy_bits,
            reuse,
            free_lists: HashMap::new(),
            live: HashMap::new(),
        }
    }

    /// High-water mark; everything below is mapped heap.
    pub fn mapped_end(&self) -> u64 {
        self.cursor
    }

    fn max_pad(&self) -> u64 {
        ((1u64 << self.entropy_bits) - 1) * GRANULE
    }

    pub fn alloc(&mut self, prng: &mut ReservedPrng, size: u64) -> Result<u64, AllocError> {
        if size == 0 {
            return Err(AllocError::BadSize);
        }
        let aligned = size.div_ceil(GRANULE) * GRANULE;
        let extent = aligned + self.max_pad();
        let base = match self.free_lists.get_mut(&aligned).and_then(|v| v.pop()) {
            Some(base) => base,
            None => {
                if self.cursor + extent > self.end {
                    return Err(AllocError::OutOfMemory);
                }
                let base = self.cursor;
                self.cursor += extent;
                base
            }
        };
        let pad = prng.draw_bits(self.entropy_bits) * GRANULE;
        let addr = base + pad;
        self.live.insert(addr, (base, aligned));
        Ok(addr)
    }

    pub fn free(&mut self, addr: u64) -> Result<(), AllocError> {
        let (base, aligned) = self
            .live
            .remove(&addr)
            .ok_or(AllocError::BadFree { addr })?;
        if self.reuse {
            self.free_lists.entry(aligned).or_default().push(base);
        }
        Ok(())
    }
}

/// Stack-frame pad consumed by instrumented prologues: a random number of
/// granules in `[0, 2^entropy_bits)`, drawn from the reserved-register
/// randomness source (never from memory).
pub fn frame_pad(prng: &mut ReservedPrng, entropy_bits: u32) -> u64 {
    prng.draw_bits(entropy_bits) * GRANULE
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: u64 = 0x4000_0000;

    #[test]
    fn zero_entropy_is_deterministic_and_sequential() {
        let mut prng = ReservedPrng::from_seed(1);
        let mut h = HeapAllocator::new(BASE, 1 << 20, 0, false);
        let a = h.alloc(&mut prng, 16).unwrap();
        let b = h.alloc(&mut prng, 16).unwrap();
        assert_eq!(a, BASE);
        assert_eq!(b, BASE + 16);
    }

    #[test]
    fn same_seed_same_addresses() {
        let run = |seed| {
            let mut prng = ReservedPrng::from_seed(seed);
            let mut h = HeapAllocator::new(BASE, 1 << 20, 4, false);
            (0..32)
                .map(|_| h.alloc(&mut prng, 24).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn all_sixteen_pads_appear_quickly() {
        let mut prng = ReservedPrng::from_seed(3);
        let mut h = HeapAllocator::new(BASE, 1 << 26, 4, false);
        let mut seen = [false; 16];
        for _ in 0..1000 {
            let a = h.alloc(&mut prng, 8).unwrap();
            // extent is 8 + 15*8, base is extent-aligned from BASE
            let pad = (a - BASE) % (8 + 15 * 8);
            seen[(pad / 8) as usize] = true;
        }
        assert!(seen.iter().all(|s| *s), "missing pad values: {seen:?}");
    }

    #[test]
    fn alignment_preserved() {
        let mut prng = ReservedPrng::from_seed(4);
        let mut h = HeapAllocator::new(BASE, 1 << 20, 4, false);
        for size in [1, 7, 8, 9, 24, 100] {
            let a = h.alloc(&mut prng, size).unwrap();
            assert_eq!(a % 8, 0);
        }
    }

    #[test]
    fn no_reuse_by_default_reuse_when_enabled() {
        let mut prng = ReservedPrng::from_seed(5);
        let mut h = HeapAllocator::new(BASE, 1 << 20, 0, false);
        let a = h.alloc(&mut prng, 8).unwrap();
        h.free(a).unwrap();
        let b = h.alloc(&mut prng, 8).unwrap();
        assert_ne!(a, b);

        let mut h = HeapAllocator::new(BASE, 1 << 20, 0, true);
        let a = h.alloc(&mut prng, 8).unwrap();
        h.free(a).unwrap();
        let b = h.alloc(&mut prng, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn double_free_rejected() {
        let mut prng = ReservedPrng::from_seed(6);
        let mut h = HeapAllocator::new(BASE, 1 << 20, 0, true);
        let a = h.alloc(&mut prng, 8).unwrap();
        h.free(a).unwrap();
        assert!(matches!(h.free(a), Err(AllocError::BadFree { .. })));
    }

    #[test]
    fn frame_pad_range() {
        let mut prng = ReservedPrng::from_seed(7);
        assert_eq!(frame_pad(&mut prng, 0), 0);
        for _ in 0..500 {
            let p = frame_pad(&mut prng, 4);
            assert_eq!(p % 8, 0);
            assert!(p <= 120);
        }
    }
}
