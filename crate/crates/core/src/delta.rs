//! Sparse matrix of one-shot demonstration utility scores.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::corpus::{Corpus, Label, LogSequence};
use crate::embed::{embed_corpus, EmbeddingStore, Encoder};
use crate::error::{Error, Result};
use crate::oracle::{build_prompt_with, Oracle, DEFAULT_INSTRUCTION};
use crate::retrieve::{mmr_select_excluding, MmrParams, RetrievalIndex};

const MAGIC: &[u8] = b"LOGICL-DELTA\x01";

/// Reduction in absolute prediction error when the demonstration is added.
pub fn compute_delta(p0: f64, p1: f64, label: Label) -> Result<f64> {
    for (name, p) in [("p0", p0), ("p1", p1)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("{name} = {p} outside [0, 1]")));
        }
    }
    let l = label.as_f64();
    Ok((p0 - l).abs() - (p1 - l).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub query_id: String,
    pub demo_id: String,
    pub p0: f64,
    pub p1: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaMeta {
    pub n: usize,
    pub k_candidates: usize,
    pub mmr_lambda: f64,
    pub oracle_fingerprint: String,
    pub encoder_fingerprint: String,
}

/// Set when a loaded matrix was built with a different oracle or encoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FingerprintWarnings {
    pub oracle_mismatch: bool,
    pub encoder_mismatch: bool,
}

impl FingerprintWarnings {
    pub fn any(&self) -> bool {
        self.oracle_mismatch || self.encoder_mismatch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    meta: DeltaMeta,
    rows: BTreeMap<String, Vec<DeltaRecord>>,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    #[serde(flatten)]
    meta: DeltaMeta,
    complete: bool,
    rows: usize,
}

impl DeltaMatrix {
    pub fn new(meta: DeltaMeta, rows: BTreeMap<String, Vec<DeltaRecord>>) -> Result<Self> {
        for (q, row) in &rows {
            if row.len() > meta.k_candidates {
                return Err(Error::InvalidInput(format!(
                    "row {q:?} has {} entries, more than k_candidates = {}",
                    row.len(),
                    meta.k_candidates
                )));
            }
            let mut seen = HashSet::new();
            for r in row {
                if &r.query_id != q || r.demo_id == *q {
                    return Err(Error::InvalidInput(format!("bad entry ({}, {}) in row {q:?}", r.query_id, r.demo_id)));
                }
                if !seen.insert(r.demo_id.as_str()) {
                    return Err(Error::InvalidInput(format!("duplicate demo {:?} in row {q:?}", r.demo_id)));
                }
            }
        }
        Ok(Self { meta, rows })
    }

    pub fn meta(&self) -> &DeltaMeta {
        &self.meta
    }

    /// Rows keyed and ordered by query id.
    pub fn rows(&self) -> &BTreeMap<String, Vec<DeltaRecord>> {
        &self.rows
    }

    pub fn row(&self, query_id: &str) -> &[DeltaRecord] {
        self.rows.get(query_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Entry value; unmeasured pairs are 0.
    pub fn get(&self, query_id: &str, demo_id: &str) -> f64 {
        self.row(query_id)
            .iter()
            .find(|r| r.demo_id == demo_id)
            .map_or(0.0, |r| r.delta)
    }

    pub fn records(&self) -> impl Iterator<Item = &DeltaRecord> {
        self.rows.values().flatten()
    }

    pub fn entry_count(&self) -> usize {
        self.rows.values().map(Vec::len).sum()
    }

    /// Pairs whose demonstration helped (δ > 0).
    pub fn positive_pairs(&self) -> Vec<(&str, &str, f64)> {
        self.pairs(|d| d > 0.0)
    }

    /// Pairs whose demonstration hurt (δ < 0).
    pub fn negative_pairs(&self) -> Vec<(&str, &str, f64)> {
        self.pairs(|d| d < 0.0)
    }

    fn pairs(&self, keep: impl Fn(f64) -> bool) -> Vec<(&str, &str, f64)> {
        self.records()
            .filter(|r| keep(r.delta))
            .map(|r| (r.query_id.as_str(), r.demo_id.as_str(), r.delta))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_matrix(path, &self.meta, &self.rows, true)
    }

    /// Loads a completed matrix, comparing its fingerprints against the
    /// expected ones. Mismatches are reported, not rejected.
    pub fn load(path: &Path, oracle_fp: Option<&str>, encoder_fp: Option<&str>) -> Result<(Self, FingerprintWarnings)> {
        let (meta, rows, complete) = read_matrix(path)?;
        if !complete {
            return Err(Error::InvalidInput(format!(
                "{} is an unfinished checkpoint; resume the build first",
                path.display()
            )));
        }
        let warnings = FingerprintWarnings {
            oracle_mismatch: oracle_fp.is_some_and(|fp| fp != meta.oracle_fingerprint),
            encoder_mismatch: encoder_fp.is_some_and(|fp| fp != meta.encoder_fingerprint),
        };
        if warnings.oracle_mismatch {
            log::warn!("{}: built with a different oracle", path.display());
        }
        if warnings.encoder_mismatch {
            log::warn!("{}: built with a different encoder", path.display());
        }
        Ok((Self::new(meta, rows)?, warnings))
    }
}

fn write_matrix(path: &Path, meta: &DeltaMeta, rows: &BTreeMap<String, Vec<DeltaRecord>>, complete: bool) -> Result<()> {
    let mut w = Writer::new(MAGIC);
    w.header(&FileHeader {
        meta: meta.clone(),
        complete,
        rows: rows.len(),
    })?;
    for (q, row) in rows {
        w.str(q);
        w.u32(row.len() as u32);
        for r in row {
            w.str(&r.demo_id);
            w.f64(r.p0);
            w.f64(r.p1);
            w.f64(r.delta);
        }
    }
    w.persist(path)
}

type MatrixParts = (DeltaMeta, BTreeMap<String, Vec<DeltaRecord>>, bool);

fn read_matrix(path: &Path) -> Result<MatrixParts> {
    let data = read_file(path)?;
    let mut r = Reader::new(path, &data, MAGIC)?;
    let header: FileHeader = r.header()?;
    let mut rows = BTreeMap::new();
    for _ in 0..header.rows {
        let at = r.offset();
        let query_id = r.str()?;
        let count = r.u32()? as usize;
        let mut row = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let demo_id = r.str()?;
            let p0 = r.f64()?;
            let p1 = r.f64()?;
            let delta = r.f64()?;
            row.push(DeltaRecord {
                query_id: query_id.clone(),
                demo_id,
                p0,
                p1,
                delta,
            });
        }
        if rows.insert(query_id, row).is_some() {
            return Err(r.corrupt_at(at, "duplicate row"));
        }
    }
    if !r.at_end() {
        return Err(r.corrupt_at(r.offset(), "trailing bytes after last row"));
    }
    Ok((header.meta, rows, header.complete))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaBuildConfig {
    pub k_candidates: usize,
    pub mmr_lambda: f64,
    /// Persist progress after this many queries.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Continue from `checkpoint_path` when it exists.
    pub resume: bool,
    pub instruction: Option<String>,
}

impl Default for DeltaBuildConfig {
    fn default() -> Self {
        Self {
            k_candidates: 128,
            mmr_lambda: 0.7,
            checkpoint_every: 100,
            checkpoint_path: None,
            resume: false,
            instruction: None,
        }
    }
}

/// Embeds `train` with `encoder`, then builds the matrix.
pub fn build_delta_matrix(
    train: &Corpus,
    encoder: &Encoder,
    oracle: &dyn Oracle,
    cfg: &DeltaBuildConfig,
) -> Result<DeltaMatrix> {
    let store = embed_corpus(train, encoder, None)?;
    build_delta_matrix_from_store(train, &store, &encoder.fingerprint(), oracle, cfg)
}

/// Builds the matrix from precomputed training embeddings.
///
/// Every query costs one zero-shot call plus one call per MMR candidate drawn
/// from the rest of the training set.
pub fn build_delta_matrix_from_store(
    train: &Corpus,
    store: &EmbeddingStore,
    encoder_fingerprint: &str,
    oracle: &dyn Oracle,
    cfg: &DeltaBuildConfig,
) -> Result<DeltaMatrix> {
    if train.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "delta matrix needs at least 2 training sequences, got {}",
            train.len()
        )));
    }
    if cfg.k_candidates == 0 || cfg.checkpoint_every == 0 {
        return Err(Error::Config("k_candidates and checkpoint_every must be positive".into()));
    }
    let params = MmrParams::new(cfg.mmr_lambda, cfg.k_candidates.min(train.len() - 1))?;
    let keep: HashSet<&str> = train.sequences().iter().map(|s| s.id.as_str()).collect();
    let index = RetrievalIndex::from_store_subset(store, &keep)?;
    if index.len() != train.len() {
        return Err(Error::InvalidInput("embedding store does not cover the training corpus".into()));
    }
    let by_id: HashMap<&str, &LogSequence> = train.sequences().iter().map(|s| (s.id.as_str(), s)).collect();
    let meta = DeltaMeta {
        n: train.len(),
        k_candidates: cfg.k_candidates,
        mmr_lambda: cfg.mmr_lambda,
        oracle_fingerprint: oracle.fingerprint(),
        encoder_fingerprint: encoder_fingerprint.to_string(),
    };

    let mut rows = BTreeMap::new();
    if let (true, Some(path)) = (cfg.resume, cfg.checkpoint_path.as_deref()) {
        if path.exists() {
            let (saved, saved_rows, _) = read_matrix(path)?;
            if saved != meta {
                return Err(Error::InvalidInput(format!(
                    "checkpoint {} was made with different inputs",
                    path.display()
                )));
            }
            log::info!("resuming delta build: {} of {} rows done", saved_rows.len(), meta.n);
            rows = saved_rows;
        }
    }

    let instruction = cfg.instruction.as_deref().unwrap_or(DEFAULT_INSTRUCTION);
    let pending: Vec<&str> = by_id
        .keys()
        .copied()
        .filter(|q| !rows.contains_key(*q))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(oracle.max_in_flight().max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    // After the first failure no new query starts; rows already in flight
    // finish and are kept.
    let abort = AtomicBool::new(false);
    for chunk in pending.chunks(cfg.checkpoint_every) {
        let results: Vec<Option<Result<Vec<DeltaRecord>>>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|q| {
                    if abort.load(Ordering::Relaxed) {
                        return None;
                    }
                    let row = (|| {
                        let query = by_id[q];
                        let vector = store.require(q)?;
                        let exclude = HashSet::from([*q]);
                        let candidates = mmr_select_excluding(vector, &index, params, &exclude)?;
                        query_row(query, &candidates, &by_id, oracle, instruction)
                    })();
                    if row.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    Some(row)
                })
                .collect()
        });
        let mut failure = None;
        for (q, result) in chunk.iter().zip(results) {
            match result {
                Some(Ok(row)) => {
                    rows.insert(q.to_string(), row);
                }
                Some(Err(e)) => {
                    failure.get_or_insert(e);
                }
                None => {}
            }
        }
        if let Some(path) = cfg.checkpoint_path.as_deref() {
            write_matrix(path, &meta, &rows, false)?;
        }
        if let Some(e) = failure {
            return Err(e);
        }
    }
    DeltaMatrix::new(meta, rows)
}

fn query_row(
    query: &LogSequence,
    candidates: &[String],
    by_id: &HashMap<&str, &LogSequence>,
    oracle: &dyn Oracle,
    instruction: &str,
) -> Result<Vec<DeltaRecord>> {
    let p0 = oracle.query(&build_prompt_with(instruction, &[], query, false))?.probability;
    candidates
        .iter()
        .map(|d| {
            let demo = by_id[d.as_str()];
            let prompt = build_prompt_with(instruction, &[(demo.clone(), demo.label)], query, false);
            let p1 = oracle.query(&prompt)?.probability;
            Ok(DeltaRecord {
                query_id: query.id.clone(),
                demo_id: d.clone(),
                p0,
                p1,
                delta: compute_delta(p0, p1, query.label)?,
            })
        })
        .collect()
}

/// Demos from the anchors' rows ranked by summed delta, anchors excluded.
/// Ties break by id.
pub fn row_top_j(matrix: &DeltaMatrix, anchor_ids: &[&str], j: usize) -> Vec<(String, f64)> {
    let anchors: HashSet<&str> = anchor_ids.iter().copied().collect();
    let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
    for a in &anchors {
        for r in matrix.row(a) {
            if !anchors.contains(r.demo_id.as_str()) {
                *totals.entry(r.demo_id.as_str()).or_insert(0.0) += r.delta;
            }
        }
    }
    let mut ranked: Vec<(&str, f64)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(j);
    ranked.into_iter().map(|(id, s)| (id.to_string(), s)).collect()
}
