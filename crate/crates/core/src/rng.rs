//! Deterministic, purpose-tagged random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from
//! `(root seed, purpose tag, a, b)`. Streams never share a counter, so e.g.
//! disabling mask noise cannot shift the batch-shuffling sequence, and clients
//! can run in parallel without coordination.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod stream {
    /// Initialization of the global shared parameters.
    pub const GLOBAL_INIT: u64 = 1;
    /// Initialization of one client's private modules (a = client id).
    pub const PRIVATE_INIT: u64 = 2;
    /// Training-sample synthesis (a = client id, b = sample index).
    pub const TRAIN_SAMPLE: u64 = 3;
    /// Test-sample synthesis (a = domain id, b = sample index).
    pub const TEST_SAMPLE: u64 = 4;
    /// Per-round minibatch shuffling (a = client id, b = round).
    pub const SHUFFLE: u64 = 5;
    /// Per-round mask-noise sampling (a = client id, b = round).
    pub const MASK_NOISE: u64 = 6;
    /// Per-round client selection (a = round).
    pub const SELECT: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `(root, tag, a, b)` into a single stream seed.
pub fn derive_seed(root: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut s = splitmix64(root ^ 0x6a09_e667_f3bc_c908);
    s = splitmix64(s ^ tag.wrapping_mul(0xbb67_ae85_84ca_a73b));
    s = splitmix64(s ^ a.wrapping_mul(0x3c6e_f372_fe94_f82b));
    splitmix64(s ^ b.wrapping_mul(0xa54f_f53a_5f1d_36f1))
}

/// Deterministic stream for the given purpose.
pub fn stream_rng(root: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, a, b))
}

/// Uniform draw in the open interval (0, 1).
pub fn uniform_open(rng: &mut impl Rng) -> f64 {
    // gen::<f64>() is in [0, 1); nudge zero up to keep logs finite downstream.
    let u: f64 = rng.gen();
    u.max(f64::MIN_POSITIVE)
}

/// Standard normal draw via Box-Muller.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    use num_traits::Float;
    let u1 = uniform_open(rng);
    let u2: f64 = rng.gen();
    Float::sqrt(-2.0 * Float::ln(u1)) * Float::cos(2.0 * core::f64::consts::PI * u2)
}
