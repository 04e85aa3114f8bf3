//! Adversarial training with multi-branch batch norm and learned feature fusion.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: f64 tensors with a reverse-mode tape.
//! - [`nn`]: multi-branch batch normalization, the weight generator and the
//!   residual backbone that hosts them.
//! - [`attack`]: FGSM, iterative FGSM, PGD, an L-inf margin (C&W) attack and
//!   the adaptive attack that also targets the weight generator.
//! - [`train`]: stage-I multi-branch adversarial training and stage-II
//!   weight-generator training.
//! - [`data`]: MNIST/CIFAR-10 loaders, batching and checkpoints.
//! - [`eval`]: accuracy grids, feature-statistics probes, fusion curves,
//!   black-box transfer and K ablations.

pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod tensor;
#[cfg(test)]
mod testutil;
pub mod train;

pub use error::{Error, Result};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a run seed with a path of tags into an independent stream seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}
