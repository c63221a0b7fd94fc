//! Derivation of independent sub-seeds from a master seed.

use sha2::{Digest, Sha256};

/// Hashes a domain label and a list of integers into a 64-bit seed.
pub fn derive_seed(domain: &str, parts: &[u64]) -> u64 {
    let digest = hash_parts(domain, parts);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Same as [`derive_seed`] but yields 128 bits.
pub fn derive_seed128(domain: &str, parts: &[u64]) -> u128 {
    let digest = hash_parts(domain, parts);
    u128::from_le_bytes(digest[..16].try_into().expect("16 bytes"))
}

fn hash_parts(domain: &str, parts: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    hasher.finalize().into()
}
