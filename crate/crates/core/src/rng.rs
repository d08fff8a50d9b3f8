//! Named, indexed random streams derived from one seed.
//!
//! Every consumer of randomness asks for a stream by `(seed, label, index)`,
//! so stages do not perturb each other and per-chain / per-step streams are
//! independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Seed for a named sub-stage of `seed`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// Independent generator for stream `index` of `label` under `seed`.
pub fn stream(seed: u64, label: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    rng.set_stream(index);
    rng
}

pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
