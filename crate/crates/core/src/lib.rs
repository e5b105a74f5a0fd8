//! Two-stage uncertainty-guided refinement network for localizing splices
//! in scientific images, with the synthetic data generator, attack bench and
//! evaluation harness around it.

pub mod attack;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod sparse;
pub mod stage1;
pub mod tensor;
pub mod uema;
pub mod uggc;
pub mod urn;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// Child seed for `tag`, independent of iteration order.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(tag.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
