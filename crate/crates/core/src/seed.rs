//! Seed splitting.
//!
//! Every random stream in a run is derived from one 64-bit master seed. A
//! stream is identified by `(master, tag, client, round)`; the four words are
//! folded through the SplitMix64 finalizer, so streams are independent of the
//! order in which they are requested. This is what lets client-local training
//! run in parallel without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Module tags. Values are part of the reproducibility contract; never
/// renumber them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Data = 1,
    Split = 2,
    Profile = 3,
    Fading = 4,
    Train = 5,
    Select = 6,
    LatencyNoise = 7,
    Init = 8,
    Bound = 9,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a stream seed from the master seed and the stream coordinates.
pub fn derive(master: u64, tag: StreamTag, client: u64, round: u64) -> u64 {
    let mut h = mix(master.wrapping_add(GOLDEN));
    for word in [tag as u64, client, round] {
        h = mix(h ^ word.wrapping_add(GOLDEN).wrapping_add(h << 6).wrapping_add(h >> 2));
    }
    h
}

pub fn stream(master: u64, tag: StreamTag, client: u64, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, client, round))
}
