//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, tag, index, counter)`, so the
//! order in which streams are consumed (or the thread that consumes them)
//! never changes the values.
//!
//! Algorithm:
//!
//! 1. `tag_hash = fnv1a64(tag bytes)`
//! 2. `key = mix(mix(mix(seed + GOLDEN) ^ tag_hash) ^ (index * INDEX_MUL))`
//! 3. `word(counter) = mix(key + (counter + 1) * GOLDEN)`
//!
//! where `mix` is the SplitMix64 finalizer, `GOLDEN = 0x9E3779B97F4A7C15`,
//! `INDEX_MUL = 0xD1B54A32D192ED03` and all arithmetic wraps modulo 2^64.
//! A uniform in (0, 1) is `((word >> 11) + 0.5) * 2^-53`. A standard normal
//! consumes two consecutive words `(2m, 2m + 1)` and returns the cosine
//! branch of Box-Muller, `sqrt(-2 ln u1) * cos(2 pi u2)`.

use std::f64::consts::PI;

pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
pub const INDEX_MUL: u64 = 0xD1B5_4A32_D192_ED03;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 output finalizer.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// One independent stream identified by `(seed, tag, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn new(seed: u64, tag: &str, index: u64) -> Self {
        let k = mix(seed.wrapping_add(GOLDEN));
        let k = mix(k ^ fnv1a64(tag.as_bytes()));
        let k = mix(k ^ index.wrapping_mul(INDEX_MUL));
        Stream { key: k }
    }

    #[inline]
    pub fn word(&self, counter: u64) -> u64 {
        mix(self
            .key
            .wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform draw strictly inside (0, 1).
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        ((self.word(counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// The `m`-th standard normal draw of this stream.
    pub fn normal(&self, m: u64) -> f64 {
        let u1 = self.uniform(2 * m);
        let u2 = self.uniform(2 * m + 1);
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    /// Uniform integer in `0..bound` by multiply-shift on the full word.
    pub fn below(&self, counter: u64, bound: u64) -> u64 {
        assert!(bound > 0);
        ((u128::from(self.word(counter)) * u128::from(bound)) >> 64) as u64
    }
}
