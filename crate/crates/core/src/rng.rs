//! Named random sub-streams.
//!
//! Every random draw in an experiment comes from a stream addressed by a
//! path such as `curate/42/item/17`. Streams are independent of each other
//! and of evaluation order, so results do not depend on worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream for an arbitrary path.
pub fn stream(path: &str) -> Rng {
    let digest = Sha256::digest(path.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    Rng::from_seed(seed)
}

/// Stream `{scope}/{seed}/{kind}/{index}`.
pub fn item_stream(scope: &str, seed: u64, kind: &str, index: usize) -> Rng {
    stream(&format!("{scope}/{seed}/{kind}/{index}"))
}
