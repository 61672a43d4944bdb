//! Counter-based seed fan-out.
//!
//! Every random decision in a run draws from its own stream, keyed by a
//! purpose tag and a tuple of counters. Streams never depend on the order in
//! which other streams were consumed, so serial and parallel execution agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Topology = 2,
    Partition = 3,
    Starts = 4,
    ChainLengths = 5,
    Walk = 6,
    Batch = 7,
    HopQuant = 8,
    AggQuant = 9,
    Aggregate = 10,
    Aggregators = 11,
    Dataset = 12,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `hash64(master, purpose, counters...)`.
pub fn hash64(master: u64, purpose: Purpose, counters: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ (purpose as u64).wrapping_mul(GOLDEN));
    for &c in counters {
        h = splitmix64(h ^ c);
    }
    h
}

/// Deterministic stream for `(master, purpose, counters)`.
pub fn seed_stream(master: u64, purpose: Purpose, counters: &[u64]) -> Stream {
    Stream::seed_from_u64(hash64(master, purpose, counters))
}
