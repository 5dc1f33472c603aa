//! Seeded, splittable random streams.
//!
//! Every random draw in the crate goes through [`stream`], which keys a
//! ChaCha8 generator by `(seed, stream id)`. Two different stream ids never
//! share output, so per-trial or per-purpose streams stay reproducible no
//! matter in which order they are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn normal_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Stream ids reserved for the library's own draws.
pub(crate) mod ids {
    pub const INITIAL_BLOCK: u64 = 1;
    pub const PROBE: u64 = 2;
    pub const DEFLATION: u64 = 3;
    pub const FIT_TRAIN: u64 = 4;
    pub const FIT_HELDOUT: u64 = 5;
    pub const TRAINER: u64 = 6;
    pub const GAP: u64 = 7;
    pub const HARNESS: u64 = 8;

    /// A distinct stream per fresh probe, indexed by `counter`.
    pub fn probe(counter: u64) -> u64 {
        PROBE | (counter << 16)
    }

    /// A distinct stream per independent trial of an experiment.
    pub fn trial(base: u64, index: u64) -> u64 {
        base | (index << 16)
    }
}
