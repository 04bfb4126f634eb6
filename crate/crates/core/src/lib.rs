//! Dual-domain LoRA fine-tuning of a toy encoder-decoder transcriber with an
//! encoder consistency loss between paired vocal and mixture inputs.

pub mod decoding;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synthdata;
pub mod training;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    ModelInit = 1,
    AdapterInit = 2,
    Shuffle = 3,
    DomainCoin = 4,
    Dropout = 5,
    Text = 6,
    Render = 7,
    Embedding = 8,
    Direction = 9,
}

/// ChaCha8 generator for `(seed, stream)`; identical on every platform.
pub fn seeded_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
