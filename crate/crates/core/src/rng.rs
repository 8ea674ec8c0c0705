//! Counter-based random streams.
//!
//! Every consumer derives its own ChaCha stream from a tuple of counters
//! (global seed, step, layer, group, ...), so any draw can be replayed from
//! its coordinates alone and no generator state needs to be threaded around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for different purposes apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Noise = 4,
    Data = 5,
    Bench = 6,
}

/// A fresh generator for `(stream, seed, counters...)`. Up to three counters.
pub fn derive(stream: Stream, seed: u64, counters: &[u64]) -> ChaCha8Rng {
    assert!(counters.len() <= 3, "at most three counters");
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    for (i, c) in counters.iter().enumerate() {
        key[8 * (i + 1)..8 * (i + 2)].copy_from_slice(&c.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream as u64);
    rng
}
