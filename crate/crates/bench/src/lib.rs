//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecmap_core::numcore::Tensor2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}
