//! Reserved-register randomness source.
//!
//! An xorshift64* generator. The state is held in the VM's reserved register
//! file, never in VM-addressable memory, so the attacker can neither read nor
//! influence the stream. Seeding goes through one round of splitmix64 so that
//! small CLI seeds (0, 1, 2, ...) land in unrelated parts of the state space.

#[derive(Debug, Clone)]
pub struct ReservedPrng {
    state: u64,
}

impl ReservedPrng {
    pub fn from_seed(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        // xorshift has a fixed point at 0
        ReservedPrng {
            state: if z == 0 { 0x9e37_79b9_7f4a_7c15 } else { z },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    /// Draw a value in `[0, 2^bits)`, taking the high bits of the output
    /// (the multiplier mixes the low bits into the high half).
    pub fn draw_bits(&mut self, bits: u32) -> u64 {
        if bits == 0 {
            return 0;
        }
        assert!(bits <= 64);
        self.next_u64() >> (64 - bits)
    }

    pub fn bytes_16(&mut self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..8].copy_from_slice(&self.next_u64().to_le_bytes());
        out[8..].copy_from_slice(&self.next_u64().to_le_bytes());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_fixed_seed() {
        let mut a = ReservedPrng::from_seed(42);
        let mut b = ReservedPrng::from_seed(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = ReservedPrng::from_seed(1);
        let mut b = ReservedPrng::from_seed(2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn zero_seed_is_usable() {
        let mut p = ReservedPrng::from_seed(0);
        let x = p.next_u64();
        let y = p.next_u64();
        assert_ne!(x, 0);
        assert_ne!(x, y);
    }

    #[test]
    fn draw_bits_stays_in_range() {
        let mut p = ReservedPrng::from_seed(7);
        for _ in 0..1000 {
            assert!(p.draw_bits(4) < 16);
        }
        assert_eq!(p.draw_bits(0), 0);
    }
}
