//! Deterministic seed derivation so every random draw is a pure function of
//! the master seed and the draw's role.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `tags` into `master`. Distinct tag sequences give unrelated seeds.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(master), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// Stable numeric tag for a role name.
pub fn tag(name: &str) -> u64 {
    name.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

pub fn rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tags))
}
