//! Named seed derivation: every random consumer gets its own stream derived
//! from the master seed and a label, so adding a consumer never shifts others.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn rng_for(master: u64, label: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seeded uniform permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed));
    idx
}

/// `round(fraction * n)` with halves rounded away from zero, validating
/// `fraction` in `(0, 1]`.
pub fn fraction_count(n: usize, fraction: f64) -> crate::Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(crate::error::arg(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    Ok((fraction * n as f64).round() as usize)
}
