//! Robustness and language-drift auditing for small image classifiers and
//! text completion models.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod imageops;
pub mod lingua;
pub mod model;
pub mod report;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
