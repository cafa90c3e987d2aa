//! Deterministic random number generation with named substreams.
//!
//! Every random draw in the crate goes through a ChaCha stream keyed by
//! (master seed, stream id), so consumers of different streams cannot
//! perturb each other and identical seeds reproduce runs bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamId {
    RepresentersPos,
    RepresentersNeg,
    Centers,
    Evaluation,
    SourceData,
    TargetData,
}

impl StreamId {
    fn index(self) -> u64 {
        match self {
            StreamId::RepresentersPos => 1,
            StreamId::RepresentersNeg => 2,
            StreamId::Centers => 3,
            StreamId::Evaluation => 4,
            StreamId::SourceData => 5,
            StreamId::TargetData => 6,
        }
    }
}

/// Fresh generator positioned at the start of the named substream.
pub fn substream(seed: u64, id: StreamId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id.index());
    rng
}
