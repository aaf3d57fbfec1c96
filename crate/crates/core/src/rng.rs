//! Deterministic counter-based randomness.
//!
//! Every stochastic component in the crate draws from streams derived from
//! `(seed, domain tag, counters...)`, so results are reproducible regardless
//! of iteration order or thread count, and resumable from a step index alone.

/// splitmix64 finalizer. Good avalanche, cheap, stable across platforms.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a list of counters into a single stream seed.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(seed ^ 0x6a09_e667_f3bc_c908);
    for &p in parts {
        s = splitmix64(s ^ p);
    }
    s
}

/// A single uniform draw in [0, 1) keyed entirely by its counters.
pub fn unit_at(seed: u64, parts: &[u64]) -> f64 {
    u64_to_unit(splitmix64(mix(seed, parts)))
}

#[inline]
fn u64_to_unit(x: u64) -> f64 {
    // 53 mantissa bits
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential deterministic RNG over a splitmix64 state.
#[derive(Debug, Clone)]
pub struct DetRng {
    state: u64,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng {
            state: splitmix64(seed),
        }
    }

    /// Sub-stream keyed by counters; independent of draw order elsewhere.
    pub fn stream(seed: u64, parts: &[u64]) -> Self {
        DetRng {
            state: mix(seed, parts),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        u64_to_unit(self.next_u64())
    }

    /// Uniform integer in [0, n) via widening multiply.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via the polar method (sqrt/ln only).
    pub fn next_gaussian(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Normal(0, std) truncated to two standard deviations by resampling.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.next_gaussian();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_index(i + 1);
            xs.swap(i, j);
        }
    }
}
