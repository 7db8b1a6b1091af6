//! Counter-based random streams keyed on `(seed, node, iteration, purpose)`.
//!
//! Every draw in the simulator comes from a stream derived here, so results
//! do not depend on the order in which nodes are stepped.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Shuffle,
    ThresholdSample,
    Init,
    Dataset,
    Bench,
    Other(u32),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Shuffle => 1,
            Purpose::ThresholdSample => 2,
            Purpose::Init => 3,
            Purpose::Dataset => 4,
            Purpose::Bench => 5,
            Purpose::Other(x) => (1 << 32) | u64::from(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub node: u64,
    pub iteration: u64,
    pub purpose: Purpose,
}

/// A deterministic random stream. The ChaCha key is the little-endian
/// concatenation of seed, node, iteration and purpose tag, which makes the
/// mapping from stream id to key injective.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }
}

pub fn derive_stream(seed: u64, node: u64, iteration: u64, purpose: Purpose) -> RngStream {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&node.to_le_bytes());
    key[16..24].copy_from_slice(&iteration.to_le_bytes());
    key[24..].copy_from_slice(&purpose.tag().to_le_bytes());
    RngStream {
        seed,
        id: StreamId {
            node,
            iteration,
            purpose,
        },
        inner: ChaCha12Rng::from_seed(key),
    }
}

/// `n` independent standard normal draws.
pub fn standard_normals(rng: &mut RngStream, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
