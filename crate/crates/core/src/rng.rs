//! Seeded randomness shared by every module.
//!
//! All streams are SplitMix64. Bounded integers and unit floats are derived
//! with the explicit rules below (not `rand`'s range sampling) so index
//! sequences can be reproduced outside Rust from the seed alone.

use rand::{RngCore, SeedableRng};
pub use rand_xoshiro::SplitMix64;

pub fn splitmix(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Uniform integer in `0..n` by rejection: draws `x` until
/// `x <= u64::MAX - (2^64 mod n)`, then returns `x mod n`.
pub fn below(rng: &mut SplitMix64, n: u64) -> u64 {
    assert!(n > 0, "below(0)");
    let rem = (u64::MAX % n + 1) % n;
    let limit = u64::MAX - rem;
    loop {
        let x = rng.next_u64();
        if x <= limit {
            return x % n;
        }
    }
}

/// Uniform float in `[0, 1)` from the top 53 bits.
pub fn unit_f64(rng: &mut SplitMix64) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fisher-Yates, walking from the last element down.
pub fn shuffle<T>(rng: &mut SplitMix64, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}
