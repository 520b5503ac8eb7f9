use std::hash::Hasher;

use siphasher::sip::SipHasher13;

/// Double hashing from two seeded 64-bit SipHash values:
/// `index_i(x) = (h1(x) + i * h2(x)) mod m`. Identical on every instance that
/// shares the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DoubleHasher {
    seed: u64,
}

impl DoubleHasher {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn base(&self, x: &[u8]) -> (u64, u64) {
        let mut h1 = SipHasher13::new_with_keys(self.seed, 0x9E37_79B9_7F4A_7C15);
        h1.write(x);
        let mut h2 = SipHasher13::new_with_keys(self.seed ^ 0xC2B2_AE3D_27D4_EB4F, 0x1656_67B1_9E37_79F9);
        h2.write(x);
        // Odd step so successive indices differ when m is a power of two.
        (h1.finish(), h2.finish() | 1)
    }

    pub fn index(&self, x: &[u8], i: u32, modulus: usize) -> usize {
        let (h1, h2) = self.base(x);
        (h1.wrapping_add((i as u64).wrapping_mul(h2)) % modulus as u64) as usize
    }

    pub fn indices(&self, x: &[u8], count: u32, modulus: usize) -> impl Iterator<Item = usize> {
        let (h1, h2) = self.base(x);
        (0..count as u64).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2)) % modulus as u64) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_dependent() {
        let a = DoubleHasher::new(1);
        let b = DoubleHasher::new(2);
        let ia: Vec<_> = a.indices(b"flow", 4, 1000).collect();
        assert_eq!(ia, a.indices(b"flow", 4, 1000).collect::<Vec<_>>());
        assert_ne!(ia, b.indices(b"flow", 4, 1000).collect::<Vec<_>>());
        for (i, idx) in ia.iter().enumerate() {
            assert_eq!(*idx, a.index(b"flow", i as u32, 1000));
            assert!(*idx < 1000);
        }
    }

    #[test]
    fn indices_spread_over_range() {
        let h = DoubleHasher::new(7);
        let mut hits = vec![0u32; 64];
        for k in 0u32..6400 {
            hits[h.index(&k.to_be_bytes(), 0, 64)] += 1;
        }
        assert!(hits.iter().all(|&c| c > 50 && c < 150), "{hits:?}");
    }
}
