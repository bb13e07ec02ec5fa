//! Seeded random sampling.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): a counter-based
//! stream where the state advances by the 64-bit golden gamma and each
//! output is a finalizer hash of the counter. It is frozen here so that
//! identical seeds give bit-identical streams on every platform: the only
//! operations involved are wrapping 64-bit integer arithmetic and exact
//! `u64 -> f64` scaling.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Values drawn "uniform on (0,1)" are clamped into this closed interval
/// before any logarithm is taken, so Gumbel samples are always finite.
const OPEN01_EPS: f64 = 1e-12;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seeded random number generator (SplitMix64).
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Deterministic substream derivation: the seed and each tag are folded
    /// through the SplitMix64 finalizer. Used to give e.g. every
    /// (seed, epoch, instance) triple its own independent stream.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut s = mix64(seed ^ GOLDEN_GAMMA);
        for &t in tags {
            s = mix64(s ^ t.wrapping_mul(GOLDEN_GAMMA));
        }
        Self { state: s }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform on [0, 1): 53 random mantissa bits scaled exactly.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on (0, 1), clamped into `[1e-12, 1 - 1e-12]`.
    pub fn next_open01(&mut self) -> f64 {
        self.next_f64().clamp(OPEN01_EPS, 1.0 - OPEN01_EPS)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal draw via Box-Muller on two uniform deviates.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in `0..n`.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}

/// `-log(-log(u))`: maps a uniform deviate to a standard Gumbel sample.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// One standard Gumbel(0,1) draw.
pub fn sample_gumbel(rng: &mut SeededRng) -> f64 {
    gumbel_from_uniform(rng.next_open01())
}
