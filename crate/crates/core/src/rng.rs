//! Named, seeded random streams.
//!
//! Every source of randomness in a run is keyed by `(run seed, stream, step, index)`
//! so that, for example, switching the acquisition strategy never perturbs which
//! prompts are drawn from the pool or which evaluation completions are sampled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    PoolSampling,
    Generation,
    EntropyMc,
    OrderRandomization,
    Shuffling,
    Evaluation,
    EvaluationBaseline,
    Init,
    Data,
}

impl Stream {
    pub const ALL: [Stream; 9] = [
        Stream::PoolSampling,
        Stream::Generation,
        Stream::EntropyMc,
        Stream::OrderRandomization,
        Stream::Shuffling,
        Stream::Evaluation,
        Stream::EvaluationBaseline,
        Stream::Init,
        Stream::Data,
    ];

    fn tag(self) -> u64 {
        match self {
            Stream::PoolSampling => 0x706f_6f6c,
            Stream::Generation => 0x6765_6e65,
            Stream::EntropyMc => 0x656e_7472,
            Stream::OrderRandomization => 0x6f72_6465,
            Stream::Shuffling => 0x7368_7566,
            Stream::Evaluation => 0x6576_616c,
            Stream::EvaluationBaseline => 0x6261_7365,
            Stream::Init => 0x696e_6974,
            Stream::Data => 0x6461_7461,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a run seed with a stream tag, a step and an item index into a 64-bit seed.
pub fn derive_seed(seed: u64, stream: Stream, step: u64, index: u64) -> u64 {
    let mut h = splitmix64(seed ^ stream.tag().rotate_left(32));
    h = splitmix64(h ^ step);
    splitmix64(h ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

pub fn stream_rng(seed: u64, stream: Stream, step: u64, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stream, step, index))
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
