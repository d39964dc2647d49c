//! Seeded random streams.
//!
//! Every stochastic step draws from its own stream, keyed by the root seed and
//! a tuple of labels (record id, channel id, stage). Streams do not depend on
//! processing order, so parallel and sequential runs agree bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(root: u64, labels: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let digest = h.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

pub fn stream(root: u64, labels: &[&str]) -> StreamRng {
    StreamRng::from_seed(derive_seed(root, labels))
}

/// Hex SHA-256 of a byte slice, used for input hashes in run manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_keyed_and_reproducible() {
        let a: u64 = stream(1, &["r1", "c1"]).random();
        let b: u64 = stream(1, &["r1", "c1"]).random();
        let c: u64 = stream(1, &["r1", "c2"]).random();
        let d: u64 = stream(2, &["r1", "c1"]).random();
        // label boundaries matter
        let e: u64 = stream(1, &["r1c", "1"]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(a, e);
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
