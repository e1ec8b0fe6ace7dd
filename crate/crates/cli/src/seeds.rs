use sha2::{Digest, Sha256};

/// Seed for the sub-stream named `label`.
///
/// Computed as the first 8 bytes, read little-endian, of
/// `SHA-256(master as 8 little-endian bytes || label as UTF-8)`.
pub fn derive_seeds(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
