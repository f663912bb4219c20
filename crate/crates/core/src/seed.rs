//! Named random sub-streams derived from one root seed.
//!
//! Every random decision in a run draws from `stream(root, label, index)`, so
//! e.g. the crops of map 3 do not depend on how many maps precede it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit key of `(root, label, index)`.
pub fn derive(root: u64, label: &str, index: u64) -> u64 {
    let mut h = splitmix(root);
    for b in label.bytes() {
        h = splitmix(h ^ b as u64);
    }
    splitmix(h ^ splitmix(index))
}

pub fn stream(root: u64, label: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label, index))
}
