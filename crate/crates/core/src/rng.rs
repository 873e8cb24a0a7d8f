//! Seeded random streams.
//!
//! Every stochastic step in the pipeline draws from a ChaCha stream seeded
//! either directly or derived via [`derive_stream`], so results are
//! reproducible regardless of execution order or parallelism.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Build an RNG from a bare seed.
pub fn seed_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from (global seed, sample id, stage tag).
///
/// The derivation hashes all three inputs, so streams for different samples
/// or stages never collide and do not depend on iteration order.
pub fn derive_stream(global_seed: u64, sample_id: &str, stage: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update([0xff]);
    hasher.update(sample_id.as_bytes());
    hasher.update([0xfe]);
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Fisher-Yates shuffle with the crate RNG. `rand::seq` shuffles work too;
/// this pins the draw sequence so fixtures can replay it.
pub fn shuffle<T>(items: &mut [T], rng: &mut Rng) {
    use rand::Rng as _;
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Sample `n` distinct indices from `0..k`, returned in ascending order.
///
/// Draws a full Fisher-Yates shuffle of `0..k` and keeps the first `n`
/// entries. Query-formulation fixtures replay this transcript.
pub fn sample_distinct(k: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..k).collect();
    shuffle(&mut idx, rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx
}
