//! Text-anchored multimodal fusion for emotional mimicry intensity regression.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors and a reverse-mode differentiation graph
//! - [`nn`]: parameter storage, linear layers, masked attention, MLP head
//! - [`model`]: the fusion network, robustness mechanisms, ablation variants
//!   and checkpoints
//! - [`data`]: feature records, planted synthetic data, collation
//! - [`optim`]: AdamW, warmup/cosine schedule, clipping, early stopping and
//!   the training loop
//! - [`metrics`]: MSE objective and Pearson evaluation
//! - [`oracle`]: slow independent references used by the test suites

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};

/// Seedable RNG used everywhere a run must be reproducible.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a seed and an independent stream id.
pub fn seeded_rng(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
