use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

/// Per-parameter seed: FNV-1a over the name, mixed with the model seed, so
/// that initial values depend only on `(seed, name)`.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// `U[−√(gain/fan_in), √(gain/fan_in)]`.
pub fn fan_in_uniform<T: Real>(shape: &[usize], fan_in: usize, gain: f64, seed: u64, name: &str) -> Tensor<T> {
    let bound = (gain / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    Tensor::uniform(shape, -bound, bound, &mut rng)
}
