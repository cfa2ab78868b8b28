use sha2::{Digest, Sha256};

pub(crate) type Digest32 = [u8; 32];

pub(crate) fn sha256(bytes: &[u8]) -> Digest32 {
    Sha256::digest(bytes).into()
}

/// Hashes the concatenation of `parts` without materialising it.
pub(crate) fn sha256_parts(parts: &[&[u8]]) -> Digest32 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    hasher.finalize().into()
}
