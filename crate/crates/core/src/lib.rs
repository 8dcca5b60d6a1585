//! Self-supervised blind image denoising with a blind-spot network and a
//! noise extractor trained jointly on noisy images only.

pub mod conv;
pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod pd;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Shape, Tensor};

/// The seeded generator every random draw in the crate goes through.
pub type Rng = rand_chacha::ChaCha8Rng;

/// A deterministic generator for `seed`.
pub fn seeded(seed: u64) -> Rng {
    rand::SeedableRng::seed_from_u64(seed)
}
