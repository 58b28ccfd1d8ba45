//! Seed plumbing.
//!
//! Every random choice in the workbench flows from an explicit u64 seed
//! through ChaCha8, which produces the same stream on every platform. Distinct
//! consumers (init, shuffling epochs, splits, sub-experiments) get their own
//! streams via `derive`, so reordering one consumer never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby (seed, stream) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable sub-seed for stream `stream` of `base`.
pub fn derive(base: u64, stream: u64) -> u64 {
    mix(base ^ mix(stream))
}

/// Deterministic generator for the given seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal via Box-Muller; consumes exactly two uniforms per call so
/// draw order stays reproducible.
pub fn randn(r: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = loop {
        let u = r.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

const SHUFFLE_TAG: u64 = 0x7368_7566_666c_6531; // "shuffle1"

/// Generator for epoch-scoped decisions (batch shuffling): any epoch's order
/// is recomputable without replaying earlier epochs.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    rng(derive(seed, SHUFFLE_TAG ^ epoch as u64))
}
