//! Reproducible random streams keyed by `(seed, label)`.
//!
//! The key is hashed with SHA-256 into a ChaCha20 seed, so two streams with
//! different labels are independent and a stream never depends on how many
//! draws some other stream has made.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomStream {
    pub seed: u64,
    pub label: String,
}

impl RandomStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        RandomStream {
            seed,
            label: label.into(),
        }
    }

    /// Derives a child stream; the labels are joined with `/`.
    pub fn child(&self, label: &str) -> Self {
        RandomStream {
            seed: self.seed,
            label: format!("{}/{}", self.label, label),
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut hasher = Sha256::new();
        hasher.update(b"soc-ude/stream/v1");
        hasher.update(self.seed.to_le_bytes());
        hasher.update((self.label.len() as u64).to_le_bytes());
        hasher.update(self.label.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha20Rng::from_seed(key)
    }
}

/// `n` standard-normal samples from `stream`, always starting at the head of
/// the stream.
pub fn gaussian_draws(stream: &RandomStream, n: usize) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `n` samples from U(-a, a).
pub fn uniform_draws(stream: &RandomStream, n: usize, a: f64) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..n).map(|_| rng.random_range(-a..=a)).collect()
}
