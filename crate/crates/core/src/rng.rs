//! Named random substreams derived from one global seed.
//!
//! Each consumer (data, init, loop sampling, JSRR directions, batching) gets
//! its own stream so that ablations share everything except the varied factor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const LOOP_SAMPLING: &str = "loop-sampling";
pub const JSRR_DIRECTION: &str = "jsrr-direction";
pub const BATCHING: &str = "batching";
pub const EVAL: &str = "eval";

/// Stream `name` of `seed`.
pub fn substream(seed: u64, name: &str) -> Rng {
    indexed(seed, name, None)
}

/// Stream `name` of `seed` for one training step. Per-step streams make
/// resumed runs reproduce uninterrupted ones.
pub fn step_stream(seed: u64, name: &str, step: u64) -> Rng {
    indexed(seed, name, Some(step))
}

fn indexed(seed: u64, name: &str, step: Option<u64>) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    if let Some(step) = step {
        h.update([0xff]);
        h.update(step.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}
