//! Stable hashing used to derive per-record seeds and content digests.

use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from a parent seed and a string key.
///
/// Stable across platforms and releases (first 8 bytes of SHA-256).
pub fn hash64(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Same as [`hash64`] keyed by an integer index.
pub fn hash64_index(seed: u64, index: u64) -> u64 {
    hash64(seed, &index.to_string())
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
