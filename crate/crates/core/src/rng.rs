//! Seeded random streams.
//!
//! Every consumer of randomness names its stream (`query_id` plus a purpose
//! tag), so per-query work draws the same numbers no matter which worker runs
//! it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub global_seed: u64,
    pub stream_id: String,
}

impl RngStream {
    pub fn new(global_seed: u64, stream_id: impl Into<String>) -> Self {
        RngStream {
            global_seed,
            stream_id: stream_id.into(),
        }
    }

    pub fn rng(&self) -> StreamRng {
        derive_rng(self.global_seed, &self.stream_id)
    }
}

/// ChaCha20 keyed by SHA-256 of `(global_seed, stream_id)`.
pub fn derive_rng(global_seed: u64, stream_id: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(b"esi-rng-v1");
    hasher.update(global_seed.to_le_bytes());
    hasher.update((stream_id.len() as u64).to_le_bytes());
    hasher.update(stream_id.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

/// Builds a stream id from parts separated by `/`.
pub fn stream_id(parts: &[&str]) -> String {
    parts.join("/")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn draws(seed: u64, id: &str, n: usize) -> Vec<u64> {
        let mut rng = derive_rng(seed, id);
        (0..n).map(|_| rng.next_u64()).collect()
    }

    #[test]
    fn same_key_same_draws() {
        assert_eq!(draws(7, "q1/soc", 100), draws(7, "q1/soc", 100));
        assert_eq!(RngStream::new(7, "q1/soc").rng().next_u64(), draws(7, "q1/soc", 1)[0]);
    }

    // Two independent 64-bit streams agree at a given index with probability
    // 2^-64, so any coincidence across 100 draws means the streams are linked.
    #[test]
    fn different_stream_ids_differ() {
        let a = draws(7, "a", 100);
        let b = draws(7, "b", 100);
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
    }

    #[test]
    fn different_seeds_differ() {
        let a = draws(1, "q", 100);
        let b = draws(2, "q", 100);
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
    }

    #[test]
    fn stream_ids_are_not_concatenation_ambiguous() {
        assert_ne!(draws(0, "ab", 4), draws(0, "a/b", 4));
        assert_eq!(stream_id(&["q7", "trial", "3"]), "q7/trial/3");
    }

    // Known-answer pin: any change to the key derivation breaks reproducibility
    // of previously written artifacts.
    #[test]
    fn derivation_is_pinned() {
        // First keystream word of ChaCha20 under the SHA-256 key, computed
        // with an independent ChaCha20 implementation.
        assert_eq!(draws(42, "pin", 1)[0], 0xbb95_7f17_2cee_5080);
        let bits: u32 = draws(42, "pin", 64).iter().map(|x| x.count_ones()).sum();
        // 4096 fair bits: mean 2048, sd 32
        assert!((bits as i64 - 2048).abs() < 6 * 32);
    }
}
