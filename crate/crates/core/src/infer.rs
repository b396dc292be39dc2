//! Dual-source demonstration retrieval and ICL prediction.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Violation;
use crate::corpus::{Corpus, Label, LogSequence};
use crate::delta::{row_top_j, DeltaMatrix};
use crate::embed::{EmbeddingStore, EmbeddingVector, Encoder};
use crate::error::{Error, Result};
use crate::oracle::{build_prompt_with, Oracle, DEFAULT_INSTRUCTION};
use crate::retrieve::{top_k_similar, RetrievalIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Similarity anchors.
    pub top_i: usize,
    /// Delta-guided expansions.
    pub top_j: usize,
    /// Predictions with `p >= threshold` are anomalous.
    pub threshold: f64,
    pub cot_enabled: bool,
    /// Count failed predictions as normal instead of excluding them.
    pub failed_as_normal: bool,
    /// Abort detection when more than this fraction of oracle calls fail.
    pub max_failure_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            top_i: 4,
            top_j: 4,
            threshold: 0.5,
            cot_enabled: false,
            failed_as_normal: false,
            max_failure_ratio: 1.0,
            instruction: None,
        }
    }
}

impl InferenceConfig {
    pub fn k_total(&self) -> usize {
        self.top_i + self.top_j
    }

    pub fn violations(&self, prefix: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.top_i < 1 {
            out.push(Violation {
                path: format!("{prefix}.top_i"),
                message: "must be at least 1".into(),
            });
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            out.push(Violation {
                path: format!("{prefix}.threshold"),
                message: format!("must lie in the open interval (0, 1), got {}", self.threshold),
            });
        }
        if !(0.0..=1.0).contains(&self.max_failure_ratio) {
            out.push(Violation {
                path: format!("{prefix}.max_failure_ratio"),
                message: format!("must lie in [0, 1], got {}", self.max_failure_ratio),
            });
        }
        out
    }

    pub fn decide(&self, probability: f64) -> Label {
        if probability >= self.threshold {
            Label::Anomalous
        } else {
            Label::Normal
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionSource {
    Delta,
    /// Backfilled by similarity because the delta rows ran short.
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub id: String,
    /// Summed delta, or cosine similarity for backfilled entries.
    pub score: f64,
    pub source: ExpansionSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Nearest neighbours with their cosine similarity, descending.
    pub anchors: Vec<(String, f64)>,
    pub expansions: Vec<Expansion>,
}

impl Selection {
    /// Prompt order: anchors, then expansions.
    pub fn ordered_ids(&self) -> Vec<&str> {
        self.anchors
            .iter()
            .map(|(id, _)| id.as_str())
            .chain(self.expansions.iter().map(|e| e.id.as_str()))
            .collect()
    }
}

/// Top-i similarity anchors plus up to top-j delta expansions, backfilled by
/// similarity so that `k_total` demonstrations are returned when available.
pub fn select_demonstrations(
    test_vec: &EmbeddingVector,
    index: &RetrievalIndex,
    matrix: &DeltaMatrix,
    cfg: &InferenceConfig,
) -> Result<Selection> {
    if index.is_empty() {
        return Err(Error::EmptyCorpus("retrieval index is empty".into()));
    }
    if cfg.top_i == 0 {
        return Err(Error::InvalidInput("top_i must be at least 1".into()));
    }
    let ranked = top_k_similar(test_vec, index, index.len())?;
    let anchors: Vec<(String, f64)> = ranked.iter().take(cfg.top_i).cloned().collect();
    let mut expansions = Vec::with_capacity(cfg.top_j);
    if cfg.top_j > 0 {
        let anchor_ids: Vec<&str> = anchors.iter().map(|(id, _)| id.as_str()).collect();
        expansions.extend(
            row_top_j(matrix, &anchor_ids, usize::MAX)
                .into_iter()
                .filter(|(id, _)| index.position(id).is_some())
                .take(cfg.top_j)
                .map(|(id, score)| Expansion {
                    id,
                    score,
                    source: ExpansionSource::Delta,
                }),
        );
        let taken: HashSet<String> = expansions.iter().map(|e| e.id.clone()).collect();
        let backfill: Vec<Expansion> = ranked[anchors.len()..]
            .iter()
            .filter(|(id, _)| !taken.contains(id))
            .take(cfg.top_j - expansions.len())
            .map(|(id, s)| Expansion {
                id: id.clone(),
                score: *s,
                source: ExpansionSource::Similarity,
            })
            .collect();
        expansions.extend(backfill);
    }
    Ok(Selection { anchors, expansions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sequence_id: String,
    /// Absent when the oracle call failed.
    pub probability: Option<f64>,
    pub decision: Option<u8>,
    pub anchors: Vec<String>,
    pub expansions: Vec<String>,
    pub reasoning: Option<String>,
    pub error: Option<String>,
}

impl Prediction {
    pub fn failed(&self) -> bool {
        self.probability.is_none()
    }
}

/// Everything detection reads; immutable while predictions run.
pub struct Detector<'a> {
    encoder: &'a Encoder,
    train: HashMap<&'a str, &'a LogSequence>,
    index: RetrievalIndex,
    matrix: &'a DeltaMatrix,
    oracle: &'a dyn Oracle,
    cfg: InferenceConfig,
}

impl<'a> Detector<'a> {
    /// `train_vectors` must hold the training corpus under `encoder`.
    pub fn new(
        encoder: &'a Encoder,
        train: &'a Corpus,
        train_vectors: &EmbeddingStore,
        matrix: &'a DeltaMatrix,
        oracle: &'a dyn Oracle,
        cfg: InferenceConfig,
    ) -> Result<Self> {
        let violations = cfg.violations("infer");
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let keep: HashSet<&str> = train.sequences().iter().map(|s| s.id.as_str()).collect();
        let index = RetrievalIndex::from_store_subset(train_vectors, &keep)?;
        if index.len() != train.len() {
            return Err(Error::InvalidInput("training embeddings do not cover the training corpus".into()));
        }
        Ok(Self {
            encoder,
            train: train.sequences().iter().map(|s| (s.id.as_str(), s)).collect(),
            index,
            matrix,
            oracle,
            cfg,
        })
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.cfg
    }

    pub fn select(&self, test_vec: &EmbeddingVector) -> Result<Selection> {
        select_demonstrations(test_vec, &self.index, self.matrix, &self.cfg)
    }

    /// Encodes, retrieves, prompts and thresholds one sequence.
    pub fn detect(&self, seq: &LogSequence) -> Result<Prediction> {
        let v = self.encoder.encode(seq)?;
        self.detect_encoded(seq, &v)
    }

    /// Like `detect`, with the test vector already computed. Oracle failures
    /// produce a failed prediction rather than an error.
    pub fn detect_encoded(&self, seq: &LogSequence, test_vec: &EmbeddingVector) -> Result<Prediction> {
        let selection = self.select(test_vec)?;
        let demos: Vec<(LogSequence, Label)> = selection
            .ordered_ids()
            .into_iter()
            .map(|id| {
                let s = self.train[id];
                (s.clone(), s.label)
            })
            .collect();
        let instruction = self.cfg.instruction.as_deref().unwrap_or(DEFAULT_INSTRUCTION);
        let prompt = build_prompt_with(instruction, &demos, seq, self.cfg.cot_enabled);
        let mut prediction = Prediction {
            sequence_id: seq.id.clone(),
            probability: None,
            decision: None,
            anchors: selection.anchors.iter().map(|(id, _)| id.clone()).collect(),
            expansions: selection.expansions.iter().map(|e| e.id.clone()).collect(),
            reasoning: None,
            error: None,
        };
        match self.oracle.query(&prompt) {
            Ok(r) => {
                prediction.probability = Some(r.probability);
                prediction.decision = Some(self.cfg.decide(r.probability).as_u8());
                prediction.reasoning = r.reasoning;
            }
            Err(e) => {
                log::warn!("{}: oracle failed: {e}", seq.id);
                prediction.error = Some(e.to_string());
            }
        }
        Ok(prediction)
    }

    /// Predictions in input order. Oracle calls run concurrently up to the
    /// oracle's in-flight bound.
    pub fn detect_batch(&self, test: &Corpus, test_vectors: &EmbeddingStore) -> Result<Vec<Prediction>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.oracle.max_in_flight().max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let out: Vec<Prediction> = pool.install(|| {
            test.sequences()
                .par_iter()
                .map(|seq| self.detect_encoded(seq, test_vectors.require(&seq.id)?))
                .collect::<Result<_>>()
        })?;
        let failed = out.iter().filter(|p| p.failed()).count();
        if !out.is_empty() && failed as f64 / out.len() as f64 > self.cfg.max_failure_ratio {
            let first = out.iter().find_map(|p| p.error.clone()).unwrap_or_default();
            return Err(Error::Transport {
                message: format!("{failed} of {} predictions failed; first error: {first}", out.len()),
                retryable: false,
            });
        }
        Ok(out)
    }
}
