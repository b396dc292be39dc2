use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingVector, Encoder};
use crate::binio::{read_file, Reader, Writer};
use crate::corpus::Corpus;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"LOGICL-EMB\x01";
const BATCH: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    d: usize,
    count: usize,
}

/// Sequence id → vector, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    fingerprint: String,
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(fingerprint: String, dim: usize, entries: Vec<(String, EmbeddingVector)>) -> Result<Self> {
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (id, v)) in entries.into_iter().enumerate() {
            if v.dim() != dim {
                return Err(Error::InvalidInput(format!("vector {id:?} has dim {} not {dim}", v.dim())));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate id {id:?} in embedding store")));
            }
            ids.push(id);
            vectors.push(v);
        }
        Ok(Self {
            fingerprint,
            dim,
            ids,
            vectors,
            index,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.index.get(id).map(|&i| &self.vectors[i])
    }

    pub fn require(&self, id: &str) -> Result<&EmbeddingVector> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.ids.iter().map(String::as_str).zip(&self.vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(MAGIC);
        w.header(&Header {
            fingerprint: self.fingerprint.clone(),
            d: self.dim,
            count: self.ids.len(),
        })?;
        for (id, v) in self.iter() {
            w.str(id);
            for &x in v.values() {
                w.f64(x);
            }
        }
        w.persist(path)
    }

    /// Loads a store, rejecting it when its fingerprint differs from `expected`.
    pub fn load(path: &Path, expected: Option<&str>) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = Reader::new(path, &data, MAGIC)?;
        let header: Header = r.header()?;
        if let Some(expected) = expected {
            if header.fingerprint != expected {
                return Err(Error::CacheInvalid(format!(
                    "{}: fingerprint {} does not match {}",
                    path.display(),
                    header.fingerprint,
                    expected
                )));
            }
        }
        let mut entries = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let id = r.str()?;
            let values = (0..header.d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.push((id, EmbeddingVector::new(values)));
        }
        if !r.at_end() {
            return Err(r.corrupt_at(r.offset(), "trailing bytes after last vector"));
        }
        Self::new(header.fingerprint, header.d, entries)
    }
}

/// Cache key for `corpus` under `encoder`: encoder fingerprint plus corpus digest.
pub(crate) fn store_fingerprint(corpus: &Corpus, encoder: &Encoder) -> String {
    let mut h = Sha256::new();
    h.update(encoder.fingerprint().as_bytes());
    for seq in corpus.sequences() {
        h.update(seq.id.as_bytes());
        h.update([0]);
        h.update(seq.joined_text().as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Encodes every sequence, reusing `cache_path` when its fingerprint matches.
pub fn embed_corpus(corpus: &Corpus, encoder: &Encoder, cache_path: Option<&Path>) -> Result<EmbeddingStore> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("nothing to embed".into()));
    }
    let fingerprint = store_fingerprint(corpus, encoder);
    if let Some(path) = cache_path.filter(|p| p.exists()) {
        match EmbeddingStore::load(path, Some(&fingerprint)) {
            Ok(store) => {
                log::info!("embedding cache hit: {}", path.display());
                return Ok(store);
            }
            Err(Error::CacheInvalid(msg)) => log::info!("recomputing embeddings: {msg}"),
            Err(e) => return Err(e),
        }
    }

    let backbone = encoder.backbone();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(backbone.max_in_flight().max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let seqs = corpus.sequences();
    let chunks: Vec<Vec<EmbeddingVector>> = pool.install(|| {
        seqs.par_chunks(BATCH)
            .map(|chunk| {
                let texts: Vec<String> = chunk.iter().map(|s| s.joined_text()).collect();
                let raw = backbone.embed_texts(&texts)?;
                raw.into_iter()
                    .zip(chunk)
                    .map(|(v, s)| {
                        let x = v.normalized().map_err(|_| {
                            Error::Degenerate(format!("sequence {:?} embeds to the zero vector", s.id))
                        })?;
                        encoder.project(&x)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let entries = seqs
        .iter()
        .map(|s| s.id.clone())
        .zip(chunks.into_iter().flatten())
        .collect();
    let store = EmbeddingStore::new(fingerprint, encoder.head().rows(), entries)?;
    if let Some(path) = cache_path {
        store.save(path)?;
    }
    Ok(store)
}
