//! Shared fixtures for the criterion benches.

use ppml_core::paillier::{generate_keypair, PrivateKey, PublicKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn keypair(bits: u32) -> (PublicKey, PrivateKey) {
    generate_keypair(bits, &mut rng(bits as u64)).expect("keygen")
}

/// Uniform weights in [-1, 1).
pub fn weights(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}
