//! Reproducible random streams.
//!
//! Every chain (or coupled replica) owns streams derived from
//! `(master_seed, chain_id, purpose)`. ChaCha is counter based, so a stream
//! is fully determined by its key and stream number and independent of how
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Separate purposes never share state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Gaussian = 0,
    Minibatch = 1,
    Data = 2,
    Diagnostics = 3,
}

const PURPOSES: u64 = 4;

pub fn derive_stream(master_seed: u64, chain_id: u64, purpose: StreamPurpose) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(chain_id.wrapping_mul(PURPOSES).wrapping_add(purpose as u64));
    rng
}

/// The Gaussian and minibatch streams driving one chain.
///
/// Coupled chains share a single `ChainStreams`, consumed in lockstep.
#[derive(Debug, Clone)]
pub struct ChainStreams {
    pub gaussian: StreamRng,
    pub minibatch: StreamRng,
}

impl ChainStreams {
    pub fn new(master_seed: u64, chain_id: u64) -> Self {
        Self {
            gaussian: derive_stream(master_seed, chain_id, StreamPurpose::Gaussian),
            minibatch: derive_stream(master_seed, chain_id, StreamPurpose::Minibatch),
        }
    }
}
