//! Seeded RNG sub-streams.
//!
//! Every randomized stage derives its own ChaCha8 stream from
//! `(root seed, purpose tag, index)`. Streams are independent, so adding a
//! consumer or reordering stages never perturbs the draws of another stage.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Environment variable consulted when a command is run without `--seed`.
pub const SEED_ENV: &str = "DUOVOCE_SEED";

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream keyed by a root seed, a purpose tag, and an index.
pub fn substream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut h = seed;
    for b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(*b));
    }
    h = splitmix64(h ^ index);
    ChaCha8Rng::seed_from_u64(h)
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = (uniform(rng)).max(1e-300);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform integer in `[0, n)`.
pub fn below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    debug_assert!(n > 0);
    // Modulo bias is below 2^-40 for the range sizes used here.
    rng.next_u64() % n
}
