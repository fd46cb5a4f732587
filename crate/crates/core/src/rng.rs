//! Reproducible random streams.
//!
//! Every draw comes from a ChaCha8 stream addressed by
//! `(seed, replicate, study, kind)`: the seed keys the cipher, the replicate
//! selects the ChaCha stream id, and `(study, kind)` select a disjoint window
//! of the block counter. Each window holds `2^32` words, far more than any
//! study consumes. Results therefore never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DrawKind {
    Design = 0,
    Variance = 1,
    Effects = 2,
    Responses = 3,
    Partition = 4,
    Subsample = 5,
    Pilots = 6,
}

const WINDOW_BITS: u32 = 32;
const KIND_BITS: u32 = 4;
const MAX_STUDY: u64 = 1 << 24;

/// Stream for one `(seed, replicate, study, kind)` address.
pub fn stream(seed: u64, replicate: u64, study: u64, kind: DrawKind) -> ChaCha8Rng {
    assert!(
        study < MAX_STUDY,
        "study index {study} exceeds the stream layout"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    let window = ((study as u128) << KIND_BITS) | kind as u128;
    rng.set_word_pos(window << WINDOW_BITS);
    rng
}

/// Stream for draws that belong to a replicate as a whole.
pub fn replicate_stream(seed: u64, replicate: u64, kind: DrawKind) -> ChaCha8Rng {
    stream(seed, replicate, MAX_STUDY - 1, kind)
}

/// Replicate id reserved for draws shared by all replicates.
pub const SHARED: u64 = u64::MAX;
