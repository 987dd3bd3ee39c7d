//! Platform-independent hashing and pseudo-random generation.
//!
//! Everything synthetic in this crate (token vectors, world generation, answer
//! noise, the template-question chooser) is derived from these two primitives so
//! that a fixed seed reproduces bit-identical output on every platform:
//!
//! - [`fnv1a64`]: 64-bit FNV-1a (offset basis `0xcbf29ce484222325`, prime
//!   `0x100000001b3`).
//! - [`SplitMix64`]: Steele/Lea/Flood SplitMix64 generator.
//!
//! Only integer arithmetic and IEEE-754 multiplication by powers of two are used
//! to produce floats, so no libm function can introduce platform drift.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice.
#[must_use]
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

/// Continue an FNV-1a hash from a previous state.
#[must_use]
pub fn fnv1a64_extend(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= u64::from(b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

/// FNV-1a over a sequence of parts, each terminated by a `0xff` byte so that
/// `["ab", "c"]` and `["a", "bc"]` hash differently.
#[must_use]
pub fn fnv1a64_parts<'a, I>(parts: I) -> u64
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut state = FNV_OFFSET;
    for part in parts {
        state = fnv1a64_extend(state, part);
        state = fnv1a64_extend(state, &[0xff]);
    }
    state
}

/// Seeded token hash: FNV-1a over the little-endian seed bytes followed by the
/// UTF-8 token bytes.
#[must_use]
pub fn seeded_token_hash(seed: u64, token: &str) -> u64 {
    let state = fnv1a64(&seed.to_le_bytes());
    fnv1a64_extend(state, token.as_bytes())
}

/// SplitMix64 pseudo-random generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    #[must_use]
    pub const fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform float in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        // 2^-53, exact.
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in `[0, bound)`. `bound` must be non-zero.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below requires a non-zero bound");
        // Rejection sampling keeps the distribution exactly uniform.
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
