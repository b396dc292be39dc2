//! Detection metrics, alignment exports and the run report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label};
use crate::delta::DeltaMatrix;
use crate::embed::{cosine, EmbeddingStore};
use crate::error::{Error, Result};
use crate::infer::Prediction;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// Failed predictions left out of the confusion matrix.
    pub failed: usize,
    /// Failed predictions scored as normal instead.
    pub failed_as_normal: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when tp + fp = 0 and precision was defined as 0.
    pub precision_undefined: bool,
    /// Set when tp + fn = 0 and recall was defined as 0.
    pub recall_undefined: bool,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision_undefined = tp + fp == 0;
        let recall_undefined = tp + fn_ == 0;
        let precision = if precision_undefined { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if recall_undefined { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        // Same value as 2PR/(P+R), but one division of integers rounds once.
        let f1 = if tp > 0 {
            (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            tn,
            failed: 0,
            failed_as_normal: 0,
            precision,
            recall,
            f1,
            precision_undefined,
            recall_undefined,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn + self.failed
    }
}

/// Confusion counts over id-aligned predictions and test sequences.
pub fn compute_metrics(predictions: &[Prediction], test: &Corpus, failed_as_normal: bool) -> Result<Metrics> {
    if predictions.len() != test.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} test sequences",
            predictions.len(),
            test.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn, mut failed, mut defaulted) = (0, 0, 0, 0, 0, 0);
    for (p, s) in predictions.iter().zip(test.sequences()) {
        if p.sequence_id != s.id {
            return Err(Error::InvalidInput(format!(
                "prediction {:?} is aligned with sequence {:?}",
                p.sequence_id, s.id
            )));
        }
        let predicted = match p.decision {
            Some(d) => Label::from_u8(d).ok_or_else(|| Error::InvalidInput(format!("decision {d} for {:?}", s.id)))?,
            None if failed_as_normal => {
                defaulted += 1;
                Label::Normal
            }
            None => {
                failed += 1;
                continue;
            }
        };
        match (predicted, s.label) {
            (Label::Anomalous, Label::Anomalous) => tp += 1,
            (Label::Anomalous, Label::Normal) => fp += 1,
            (Label::Normal, Label::Anomalous) => fn_ += 1,
            (Label::Normal, Label::Normal) => tn += 1,
        }
    }
    let mut m = Metrics::from_counts(tp, fp, fn_, tn);
    m.failed = failed;
    m.failed_as_normal = defaulted;
    Ok(m)
}

fn write_grid(path: &Path, target_ids: &[String], source_ids: &[String], cell: impl Fn(&str, &str) -> Result<f64>) -> Result<()> {
    let io = |e: csv::Error| Error::io(format!("write {}", path.display()), e.into());
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let header = std::iter::once("target_id").chain(source_ids.iter().map(String::as_str));
    w.write_record(header).map_err(io)?;
    for t in target_ids {
        let mut row = Vec::with_capacity(source_ids.len() + 1);
        row.push(t.clone());
        for s in source_ids {
            row.push(cell(t, s)?.to_string());
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Writes paired target × source grids: cosine similarity and delta
/// (0 where the matrix holds no entry). Both share row and column order.
pub fn export_alignment_matrices(
    source_ids: &[String],
    target_ids: &[String],
    store: &EmbeddingStore,
    matrix: &DeltaMatrix,
    similarity_path: &Path,
    delta_path: &Path,
) -> Result<()> {
    for id in source_ids.iter().chain(target_ids) {
        store.require(id)?;
    }
    write_grid(similarity_path, target_ids, source_ids, |t, s| {
        cosine(store.require(t)?.values(), store.require(s)?.values())
    })?;
    write_grid(delta_path, target_ids, source_ids, |t, s| Ok(matrix.get(t, s)))
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// The single JSON document describing a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub metrics: Metrics,
    /// Hex SHA-256 of the config file bytes.
    pub config_hash: String,
    /// Effective configuration after overrides.
    pub config: serde_json::Value,
    /// Overrides applied on top of the file, as `path=value (source)`.
    pub overrides: Vec<String>,
    pub fingerprints: serde_json::Map<String, serde_json::Value>,
    pub summary: serde_json::Map<String, serde_json::Value>,
    /// Stage wall-clock seconds; empty unless explicitly requested, so that
    /// reports from identical runs compare byte for byte.
    pub timing: std::collections::BTreeMap<String, f64>,
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    if report.timing.values().any(|t| !(*t >= 0.0)) {
        return Err(Error::InvalidInput("negative or non-finite timing".into()));
    }
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}
