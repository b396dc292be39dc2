//! Sequence embeddings: a frozen backbone composed with a trainable linear
//! projection head, `encode(s) = normalize(W · backbone(s))`.

mod hashing;
mod remote;
mod store;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use hashing::HashNgramBackbone;
pub use remote::RemoteBackbone;
pub use store::{embed_corpus, EmbeddingStore};

use crate::corpus::LogSequence;
use crate::error::{Error, Result};

/// Dense real vector. Unit norm after [`Encoder::encode`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Scales to unit length; zero or non-finite vectors are degenerate.
    pub fn normalized(mut self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate(format!("cannot normalize vector with norm {n}")));
        }
        self.0.iter_mut().for_each(|x| *x /= n);
        Ok(self)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    cosine(u.values(), v.values())
}

pub(crate) fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidInput(format!("dimension mismatch: {} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

fn default_ngram_min() -> usize {
    3
}
fn default_ngram_max() -> usize {
    5
}
fn default_dim() -> usize {
    384
}
fn default_timeout() -> f64 {
    30.0
}
fn default_in_flight() -> usize {
    4
}

/// Backbone configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    HashNgram {
        #[serde(default = "default_ngram_min")]
        ngram_min: usize,
        #[serde(default = "default_ngram_max")]
        ngram_max: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    Remote {
        endpoint: String,
        model: String,
        dim: usize,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::HashNgram {
            ngram_min: default_ngram_min(),
            ngram_max: default_ngram_max(),
            dim: default_dim(),
            seed: 0,
        }
    }
}

impl BackboneSpec {
    pub fn dim(&self) -> usize {
        match self {
            BackboneSpec::HashNgram { dim, .. } | BackboneSpec::Remote { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Backbone>> {
        Ok(match self {
            BackboneSpec::HashNgram {
                ngram_min,
                ngram_max,
                dim,
                seed,
            } => Arc::new(HashNgramBackbone::new(*ngram_min, *ngram_max, *dim, *seed)?),
            BackboneSpec::Remote {
                endpoint,
                model,
                dim,
                timeout_secs,
                max_in_flight,
            } => Arc::new(RemoteBackbone::new(endpoint, model, *dim, *timeout_secs, *max_in_flight)?),
        })
    }
}

/// Frozen text embedder.
pub trait Backbone: Send + Sync {
    fn dim(&self) -> usize;

    /// Stable identity of the embedding function, used for cache validity.
    fn fingerprint(&self) -> String;

    /// Raw (not necessarily normalized) embeddings, one per text.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    /// Upper bound on concurrent `embed_texts` calls.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Backbone embedding of a sequence, L2-normalized.
pub fn embed_backbone(sequence: &LogSequence, backbone: &dyn Backbone) -> Result<EmbeddingVector> {
    let mut out = backbone.embed_texts(&[sequence.joined_text()])?;
    let v = out
        .pop()
        .ok_or_else(|| Error::Transport {
            message: "backbone returned no embedding".into(),
            retryable: false,
        })?;
    v.normalized()
        .map_err(|_| Error::Degenerate(format!("sequence {:?} embeds to the zero vector", sequence.id)))
}

/// Trainable `d_out × d_in` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl ProjectionHead {
    pub fn from_rows(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || weights.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "projection head needs {rows}x{cols} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("projection head has non-finite weights".into()));
        }
        Ok(Self { rows, cols, weights })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            rows: dim,
            cols: dim,
            weights,
        }
    }

    /// Identity plus i.i.d. `N(0, noise_std²)` entries.
    pub fn identity_with_noise<R: Rng>(dim: usize, noise_std: f64, rng: &mut R) -> Result<Self> {
        let mut head = Self::identity(dim);
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std)
                .map_err(|e| Error::Config(format!("invalid head noise {noise_std}: {e}")))?;
            head.weights.iter_mut().for_each(|w| *w += rng.sample(normal));
        }
        Ok(head)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            weights: self.weights.iter().map(|w| w * c).collect(),
        }
    }

    /// `W · x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.weights.chunks_exact(self.cols).map(|row| dot(row, x)).collect()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for w in &self.weights {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let raw: ProjectionHead = serde_json::from_str(&text)?;
        Self::from_rows(raw.rows, raw.cols, raw.weights)
    }
}

/// Backbone followed by the projection head.
#[derive(Clone)]
pub struct Encoder {
    backbone: Arc<dyn Backbone>,
    head: ProjectionHead,
}

impl fmt::Debug for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Encoder")
            .field("backbone", &self.backbone.fingerprint())
            .field("head", &format_args!("{}x{}", self.head.rows, self.head.cols))
            .finish()
    }
}

impl Encoder {
    pub fn new(backbone: Arc<dyn Backbone>, head: ProjectionHead) -> Result<Self> {
        if head.cols != backbone.dim() {
            return Err(Error::InvalidInput(format!(
                "head expects {} inputs but backbone produces {}",
                head.cols,
                backbone.dim()
            )));
        }
        Ok(Self { backbone, head })
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    pub fn head(&self) -> &ProjectionHead {
        &self.head
    }

    pub fn with_head(&self, head: ProjectionHead) -> Result<Self> {
        Self::new(self.backbone.clone(), head)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.backbone.fingerprint().as_bytes());
        h.update(b"|");
        h.update(self.head.fingerprint().as_bytes());
        hex::encode(h.finalize())
    }

    /// Projects a precomputed backbone vector and normalizes.
    pub fn project(&self, backbone_vec: &EmbeddingVector) -> Result<EmbeddingVector> {
        if backbone_vec.dim() != self.head.cols {
            return Err(Error::InvalidInput(format!(
                "expected a {}-dim backbone vector, got {}",
                self.head.cols,
                backbone_vec.dim()
            )));
        }
        EmbeddingVector::new(self.head.apply(backbone_vec.values()))
            .normalized()
            .map_err(|_| Error::Degenerate("projection maps the input to the zero vector".into()))
    }

    pub fn encode(&self, sequence: &LogSequence) -> Result<EmbeddingVector> {
        let x = embed_backbone(sequence, self.backbone.as_ref())?;
        self.project(&x)
    }
}
