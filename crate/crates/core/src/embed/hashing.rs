use sha2::{Digest, Sha256};

use super::{Backbone, EmbeddingVector};
use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const SIGN_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(FNV_PRIME);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    // splitmix64 finalizer spreads FNV's weak low bits before the modulo.
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Signed feature hashing of lowercased character n-grams.
#[derive(Debug, Clone)]
pub struct HashNgramBackbone {
    ngram_min: usize,
    ngram_max: usize,
    dim: usize,
    seed: u64,
}

impl HashNgramBackbone {
    pub fn new(ngram_min: usize, ngram_max: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("backbone dim must be at least 2, got {dim}")));
        }
        if ngram_min == 0 || ngram_min > ngram_max {
            return Err(Error::Config(format!(
                "invalid n-gram range [{ngram_min}, {ngram_max}]"
            )));
        }
        Ok(Self {
            ngram_min,
            ngram_max,
            dim,
            seed,
        })
    }

    /// Bucket index and sign for one n-gram.
    pub fn slot(&self, gram: &str) -> (usize, f64) {
        let bucket = (fnv1a(self.seed, gram.as_bytes()) % self.dim as u64) as usize;
        let sign = if fnv1a(self.seed ^ SIGN_SALT, gram.as_bytes()) >> 63 == 0 {
            1.0
        } else {
            -1.0
        };
        (bucket, sign)
    }

    /// Unnormalized signed counts. Texts shorter than `ngram_min` hash as a single gram.
    pub fn counts(&self, text: &str) -> Vec<f64> {
        let lowered = text.to_lowercase();
        let chars: Vec<char> = lowered.chars().collect();
        let mut out = vec![0.0; self.dim];
        if chars.is_empty() {
            return out;
        }
        if chars.len() < self.ngram_min {
            let (b, s) = self.slot(&lowered);
            out[b] += s;
            return out;
        }
        let mut gram = String::new();
        for n in self.ngram_min..=self.ngram_max.min(chars.len()) {
            for window in chars.windows(n) {
                gram.clear();
                gram.extend(window);
                let (b, s) = self.slot(&gram);
                out[b] += s;
            }
        }
        out
    }
}

impl Backbone for HashNgramBackbone {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        let desc = format!(
            "hash_ngram/v1/min={}/max={}/dim={}/seed={}",
            self.ngram_min, self.ngram_max, self.dim, self.seed
        );
        hex::encode(Sha256::digest(desc.as_bytes()))
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| EmbeddingVector::new(self.counts(t))).collect())
    }

    fn max_in_flight(&self) -> usize {
        rayon::current_num_threads()
    }
}
