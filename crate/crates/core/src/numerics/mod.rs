//! Dense tensors, reverse-mode differentiation and gradient checking.

mod graph;
mod gradcheck;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, NodeId, LAYER_NORM_EPS};
pub use tensor::{log_sigmoid, sigmoid, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate's one PRNG: ChaCha8, whose output stream is fixed across
/// platforms and releases.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent seed for a named sub-stream.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    // FNV-1a over the label, folded into the parent seed with splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
