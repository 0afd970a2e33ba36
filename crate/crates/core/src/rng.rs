//! Named, reproducible random streams.
//!
//! Every random draw in the crate descends from one root seed. A sub-stream is
//! identified by a label and an index, so the draws a component sees do not
//! depend on how many draws other components made or in what order work ran.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `(root, label, index)`.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// A ChaCha8 generator for the named sub-stream.
pub fn stream(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, index))
}

/// Hex SHA-256 of a byte string; used to fingerprint configs.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_indices_separate_streams() {
        let a = derive_seed(7, "event", 0);
        assert_eq!(a, derive_seed(7, "event", 0));
        assert_ne!(a, derive_seed(7, "event", 1));
        assert_ne!(a, derive_seed(7, "spec", 0));
        assert_ne!(a, derive_seed(8, "event", 0));
        // length prefix keeps ("ab", ..) and ("a", ..) apart
        assert_ne!(derive_seed(1, "ab", 0), derive_seed(1, "a", 0));
    }
}
