//! Seed derivation and counter-style substreams.
//!
//! Every random object in the crate (a codeword, a synthesis draw, a Monte
//! Carlo chunk) gets its own ChaCha20 stream keyed by a SHA-256 digest of the
//! master seed, a domain tag and the object's indices. Results therefore do
//! not depend on evaluation order or thread count.

use num_bigint::BigUint;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

fn hasher(seed: u64, tag: &str) -> Sha256 {
    let mut h = Sha256::new();
    h.update(b"gtsynth/v1");
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h
}

/// Substream for `(seed, tag, indices)`.
pub fn substream(seed: u64, tag: &str, indices: &[u64]) -> StreamRng {
    let mut h = hasher(seed, tag);
    for i in indices {
        h.update(i.to_le_bytes());
    }
    StreamRng::from_seed(h.finalize().into())
}

/// Substream keyed by a layer and an arbitrary-precision index.
pub fn substream_big(seed: u64, tag: &str, layer: usize, index: &BigUint) -> StreamRng {
    let mut h = hasher(seed, tag);
    h.update((layer as u64).to_le_bytes());
    let bytes = index.to_bytes_le();
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(&bytes);
    StreamRng::from_seed(h.finalize().into())
}

/// Uniform integer in `[0, bound)`. Panics if `bound` is zero.
pub fn uniform_below<R: Rng + ?Sized>(rng: &mut R, bound: &BigUint) -> BigUint {
    assert!(bound.bits() > 0, "uniform_below: empty range");
    if let Ok(b) = u64::try_from(bound) {
        return BigUint::from(rng.random_range(0..b));
    }
    // Rejection sampling on the smallest covering power of two.
    let bits = bound.bits();
    let nbytes = bits.div_ceil(8) as usize;
    let spare = (nbytes as u64) * 8 - bits;
    let mut buf = vec![0u8; nbytes];
    loop {
        rng.fill_bytes(&mut buf);
        buf[nbytes - 1] &= 0xffu8 >> spare;
        let x = BigUint::from_bytes_le(&buf);
        if &x < bound {
            return x;
        }
    }
}
