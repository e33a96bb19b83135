/// Fixed-size Bloom filter with `h` probes derived by double hashing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    bits: Vec<u64>,
    m: usize,
    h: u32,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut x: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        x ^= u64::from(*b);
        x = x.wrapping_mul(0x0100_0000_01b3);
    }
    x
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl BloomFilter {
    pub const DEFAULT_M: usize = 2048;
    pub const DEFAULT_H: u32 = 4;

    /// `m` is rounded up to at least one bit, `h` to at least one probe.
    pub fn new(m: usize, h: u32) -> Self {
        let m = m.max(1);
        BloomFilter { bits: vec![0; m.div_ceil(64)], m, h: h.max(1) }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h(&self) -> u32 {
        self.h
    }

    fn probes(&self, item: &[u8]) -> impl Iterator<Item = usize> + '_ {
        let base = fnv1a(item);
        let a = mix(base);
        let b = mix(base ^ 0x9e37_79b9_7f4a_7c15) | 1;
        (0..u64::from(self.h)).map(move |i| (a.wrapping_add(i.wrapping_mul(b)) % self.m as u64) as usize)
    }

    pub fn insert(&mut self, item: &[u8]) {
        let idx: Vec<usize> = self.probes(item).collect();
        for i in idx {
            self.bits[i / 64] |= 1 << (i % 64);
        }
    }

    pub fn contains(&self, item: &[u8]) -> bool {
        self.probes(item).all(|i| self.bits[i / 64] & (1 << (i % 64)) != 0)
    }

    pub fn clear(&mut self) {
        self.bits.iter_mut().for_each(|w| *w = 0);
    }

    pub fn ones(&self) -> u32 {
        self.bits.iter().map(|w| w.count_ones()).sum()
    }

    /// Analytic false-positive rate after `n` insertions.
    pub fn expected_fpr(&self, n: usize) -> f64 {
        let h = f64::from(self.h);
        (1.0 - (-h * n as f64 / self.m as f64).exp()).powf(h)
    }
}

impl Default for BloomFilter {
    fn default() -> Self {
        BloomFilter::new(Self::DEFAULT_M, Self::DEFAULT_H)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_filter_contains_nothing() {
        let f = BloomFilter::default();
        assert!(!f.contains(b"x"));
        assert_eq!(f.ones(), 0);
    }

    #[test]
    fn analytic_rate_at_default_size() {
        let f = BloomFilter::default();
        let p = f.expected_fpr(100);
        assert!(p > 0.0005 && p < 0.002, "{p}");
    }

    proptest! {
        #[test]
        fn no_false_negatives(items in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..24), 0..200)) {
            let mut f = BloomFilter::default();
            for i in &items {
                f.insert(i);
            }
            for i in &items {
                prop_assert!(f.contains(i));
            }
        }
    }
}
