//! Dense-matrix differentiable computation: primitives with explicit backward
//! rules, parameter storage, Adam, finite-difference checking and checkpoints.

mod checkpoint;
mod gradcheck;
mod matrix;
pub mod ops;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    to_json_string, Checkpoint, Sig17Formatter, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, Coords, GradCheckReport};
pub use matrix::Matrix;
pub use ops::ReluRule;
pub use params::{glorot_uniform, glorot_with_fans, AdamConfig, AdamState, Param, ParamStore};

pub type Rng = ChaCha8Rng;

/// Counter-based RNG: independent stream `stream` under key `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a base seed with a list of tags (splitmix64 finalizer per step).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = splitmix(z ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
