//! Flow-based distributional reinforcement learning.
//!
//! Return distributions of state-action pairs are modelled as one-dimensional
//! normalizing flows whose core transform is a Gaussian-mixture CDF, rescaled
//! to a learned symmetric range. Bootstrap targets are built by composing the
//! next-state flow with the affine map `y -> r + gamma * y`, aligned with the
//! prediction on a shared grid through kernel density estimation, and compared
//! with either the exact Cramér distance or a PDF-only surrogate of it.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the
//! command-line driver and logging live in the `nfdrl` companion crate.

#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod agent;
pub mod envs;
mod error;
pub mod flow;
pub mod grad;
pub mod loss;
pub mod oracles;
pub mod special;
pub mod stats;
pub mod target;

pub use error::{Error, Result};

/// Random stream used throughout the crate. Seeded streams make every run
/// reproducible bit-for-bit.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build a seeded random stream; `stream` selects an independent sub-stream.
pub fn seeded_rng(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
