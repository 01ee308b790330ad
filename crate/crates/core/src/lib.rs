//! Personalized multi-turn response selection: corpus construction,
//! persona statistics, the hybrid matching network, training and ranking
//! evaluation.

pub mod corpus;
pub mod eval;
pub mod model;
pub mod nn;
pub mod persona;
pub mod synth;
pub mod train;

use sha2::{Digest, Sha256};

/// Hex SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
