//! Hashing and seeded random-stream helpers shared by every stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of a sequence of length-delimited parts.
///
/// Each part is prefixed with its byte length so `["ab", "c"]` and
/// `["a", "bc"]` hash differently.
pub fn digest_parts<I, P>(parts: I) -> String
where
    I: IntoIterator<Item = P>,
    P: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for part in parts {
        let bytes = part.as_ref();
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    hex::encode(hasher.finalize())
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A ChaCha stream keyed by the top-level seed and a path of names.
///
/// Streams for different keys are independent, so per-respondent or
/// per-stage draws never depend on iteration order.
pub fn substream(seed: u64, keys: &[&str]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for key in keys {
        hasher.update((key.len() as u64).to_le_bytes());
        hasher.update(key.as_bytes());
    }
    let out: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(out)
}

/// Lowercased word tokens; underscores stay inside tokens.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}
