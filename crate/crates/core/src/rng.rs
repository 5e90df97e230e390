//! Deterministic generator forking from a scenario seed and call identifiers.

use rand_chacha::ChaCha12Rng;
use rand_core::SeedableRng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix_str(h: u64, s: &str) -> u64 {
    s.bytes().fold(splitmix(h ^ 0xA5), |acc, b| splitmix(acc ^ u64::from(b)))
}

/// Generator for one call site; the same (seed, labels) always yields the same stream.
pub fn fork(seed: u64, labels: &[&str], counter: u64) -> ChaCha12Rng {
    let mut h = splitmix(seed);
    for l in labels {
        h = mix_str(h, l);
    }
    h = splitmix(h ^ counter);
    ChaCha12Rng::seed_from_u64(h)
}
