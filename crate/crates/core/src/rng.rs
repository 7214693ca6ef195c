//! SplitMix64 stream used for weight generation, corpus sampling, and noise
//! hashing. Hand-rolled so the byte-level output is pinned by this crate and
//! cannot drift with an external crate's implementation details.

/// SplitMix64 generator (Steele, Lea, Sebastiano Vigna's constants).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix(self.state)
    }

    /// Uniform in the half-open interval (0, 1]; never returns 0 so it is
    /// safe as a log argument.
    pub fn next_unit_open(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) / (1u64 << 53) as f64
    }

    /// Uniform in [-1, 1).
    pub fn next_signed_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64) / (1u64 << 52) as f64 - 1.0
    }

    /// Standard normal via Box-Muller (cosine branch). Consumes exactly two
    /// draws per sample; the sine half is discarded so the stream position
    /// is a pure function of the sample count.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_unit_open();
        let u2 = self.next_unit_open();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, bound) by 128-bit multiply; bound must be > 0.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}

#[inline]
fn mix(z: u64) -> u64 {
    let z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One-shot stateless mix of a key tuple, for per-coordinate noise hashing.
pub fn hash_mix(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64; // arbitrary odd constant
    for &p in parts {
        h = mix(h ^ p).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
    mix(h)
}
