//! Explicit, splittable randomness.
//!
//! There is no global generator. A [`SeedKey`] is a plain value; every
//! consumer derives its own ChaCha stream from `(seed, purpose, index)`, so a
//! given draw depends only on where it sits in the run and never on what was
//! drawn before it. This is what makes mid-stream resume exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purposes. Distinct purposes never share a ChaCha key.
pub mod purpose {
    pub const SOURCE_WORLD: u64 = 1;
    pub const SOURCE_DATA: u64 = 2;
    pub const PARAM_INIT: u64 = 3;
    pub const PRETRAIN_SHUFFLE: u64 = 4;
    pub const DOMAIN_PARAMS: u64 = 5;
    pub const STREAM_BATCH: u64 = 6;
    pub const EVAL_SPLIT: u64 = 7;
    pub const REPLAY: u64 = 8;
    pub const RESERVOIR: u64 = 9;
    pub const SOURCE_HELDOUT: u64 = 10;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedKey(pub u64);

impl SeedKey {
    /// ChaCha8 stream for `(self, purpose, index)`.
    pub fn derive(self, purpose: u64, index: u64) -> ChaCha8Rng {
        let mut state = self.0 ^ purpose.wrapping_mul(0xA076_1D64_78BD_642F);
        let mut seed = [0u8; 32];
        for (k, chunk) in seed.chunks_exact_mut(8).enumerate() {
            state = state.wrapping_add(index.rotate_left(17 * k as u32 + 1));
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(purpose);
        rng
    }

    /// A child key, for nesting (e.g. one key per domain id).
    pub fn child(self, purpose: u64, index: u64) -> SeedKey {
        let mut state = self.0 ^ purpose.rotate_left(29) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        SeedKey(splitmix64(&mut state))
    }
}

/// One standard normal draw by Box-Muller, consuming two uniforms.
///
/// Uses libm directly: samplers that pick std or libm math depending on
/// enabled features would make stream bytes depend on the dependency graph.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // (0, 1]: never ln(0).
    let u1 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
