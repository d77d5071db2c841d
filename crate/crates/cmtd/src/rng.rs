//! Seeded pseudo-random generator used everywhere a reproducible stream is
//! required (weight init, dropout masks, subset sampling, attack targets).
//!
//! The generator is the splitmix64 sequence: state advances by the odd
//! constant `0x9e3779b97f4a7c15` and the output is the finalizer
//!
//! ```text
//! z  = state
//! z ^= z >> 30; z *= 0xbf58476d1ce4e5b9
//! z ^= z >> 27; z *= 0x94d049bb133111eb
//! z ^= z >> 31
//! ```
//!
//! The sequence is fixed here (rather than delegated to an external RNG
//! crate) so that subsets, initializations and reports are bit-identical
//! across platforms and toolchain upgrades.

/// Splitmix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derives an independent stream from a base seed and a stream index.
    /// Used to give each batch element / node / epoch its own generator.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut mixer = Self::new(seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15));
        // burn one output so derive(s, 0) differs from new(s)
        let _ = mixer.next_u64();
        mixer
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform double in [0, 1), using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // multiply-shift; bias is negligible for the desk-scale ranges used here
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
