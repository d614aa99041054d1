//! Deterministic, splittable RNG (xoshiro256++ seeded via splitmix64).
//!
//! All stochastic streams in the crate derive from a master seed through
//! `Rng::derive(master, STREAM, index)`. This keeps every consumer (data,
//! masks, init, batching) reproducible and independent of evaluation order,
//! so parallelism can never change results.

/// Stream tags for deriving independent substreams from one master seed.
pub mod stream {
    pub const DATA: u64 = 0x01;
    pub const TEXTURE: u64 = 0x02;
    pub const CAPTION: u64 = 0x03;
    pub const MASK: u64 = 0x04;
    pub const INIT: u64 = 0x05;
    pub const BATCH: u64 = 0x06;
    pub const EVAL: u64 = 0x07;
    pub const EXPORT: u64 = 0x08;
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut st = seed;
        Rng {
            s: [
                splitmix64(&mut st),
                splitmix64(&mut st),
                splitmix64(&mut st),
                splitmix64(&mut st),
            ],
        }
    }

    /// Derive an independent stream from (master seed, stream tag, index).
    pub fn derive(master: u64, tag: u64, index: u64) -> Self {
        let mut st = master;
        let a = splitmix64(&mut st);
        let mut st2 = a ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
        let b = splitmix64(&mut st2);
        let mut st3 = b ^ index.wrapping_mul(0xD1B54A32D192ED03);
        Rng::new(splitmix64(&mut st3))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let r = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        r
    }

    /// Uniform f64 in [0, 1) with 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be > 0.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free bounded sampling via 128-bit multiply; bias < 2^-64.
        let x = self.next_u64() as u128;
        ((x * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (deterministic two-draw form).
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i + 1);
            slice.swap(i, j);
        }
    }

    /// Choose k distinct values from 0..n (partial Fisher-Yates), sorted output.
    pub fn choose_k(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        let mut out = idx[..k].to_vec();
        out.sort_unstable();
        out
    }
}
