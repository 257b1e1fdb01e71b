//! Labeled seed derivation: one master seed fans out to every stage.

use sha2::{Digest, Sha256};

/// Derives a stage seed from `master` and a label such as
/// `"resolve/cache"`. Distinct labels give unrelated streams.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
