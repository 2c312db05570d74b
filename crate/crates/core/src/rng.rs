use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Independent deterministic stream `stream` derived from `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform sample in `[lo, hi)` (or `lo` when the interval is empty).
pub fn uniform<T: Scalar>(rng: &mut impl Rng, lo: T, hi: T) -> T {
    let x: f64 = rng.random();
    lo + (hi - lo) * T::lit(x)
}

pub(crate) mod streams {
    pub const DELAYS: u64 = 1;
    pub const CLOCKS: u64 = 2;
    pub const JITTER: u64 = 3;
    pub const FAULTS: u64 = 4;
    pub const PERTURB: u64 = 5;
    pub const CORRUPT: u64 = 6;
}
