//! Seeded pseudo-random numbers.
//!
//! Everything stochastic in the crate (parameter init, shuffling, augmentation,
//! the synthetic dataset) draws from this one generator so that a given seed
//! produces bit-identical runs on every platform. It is the xorshift64* pattern:
//! three shift-xors followed by a multiplicative scramble.

/// 64-bit xorshift* generator. Not cryptographic; plenty for init/shuffling.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    /// Seed 0 would lock xorshift at 0 forever, so it is remapped.
    pub fn new(seed: u64) -> Self {
        Rng { state: if seed == 0 { 0x9e37_79b9_7f4a_7c15 } else { seed } }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is immaterial for shuffle/jitter duty at these ranges.
        (self.next_u64() % n as u64) as usize
    }

    pub fn flip(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call; the spare
    /// is deliberately not cached so the call sequence stays easy to reason
    /// about when replaying seeds.
    pub fn normal(&mut self) -> f64 {
        // Guard the log: next_f64 may return exactly 0.
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Derive an independent stream, e.g. one per epoch. Mixing with splitmix64
    /// keeps nearby keys from producing correlated streams.
    pub fn fork(&self, key: u64) -> Rng {
        let mut z = self.state ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        Rng::new(z ^ (z >> 31))
    }
}
