//! Stable hashing for seeds and identifiers.

use sha2::{Digest, Sha256};

/// First eight bytes of SHA-256, big-endian. Stable across platforms and
/// releases, unlike `std::hash`.
pub fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("32-byte digest"))
}

/// Per-item seed: the run seed XOR the stable hash of the item id.
pub fn derive_seed(run_seed: u64, item_id: &str) -> u64 {
    run_seed ^ stable_hash(item_id)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
