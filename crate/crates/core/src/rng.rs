//! Deterministic RNG streams derived from a root seed and a purpose tag.
//!
//! Every consumer of randomness (stream building, per-experience training,
//! Fisher sampling, replay generation, scoring) draws from its own stream so
//! that enabling one mechanism never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

pub type Rng = ChaCha8Rng;

pub fn derive_rng(seed: u64, tag: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    use rand::RngCore;
    derive_rng(seed, tag, index).next_u64()
}

pub fn standard_normal<A: Scalar>(rng: &mut Rng, rows: usize, cols: usize) -> ndarray::Array2<A> {
    ndarray::Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        A::from_f64_lossy(v)
    })
}
