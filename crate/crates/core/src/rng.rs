//! Deterministic random number streams.
//!
//! All randomness in the crate flows through ChaCha8 so that a (seed,
//! stream) pair pins a reproducible sequence. Independent consumers (scene
//! generation per image index, parameter init, batch shuffling) get
//! independent streams instead of sharing one cursor.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids for the trainer-side consumers.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;

/// An independent ChaCha8 stream derived from `seed`.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Serializable snapshot of a ChaCha8 stream position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
