//! Stage orchestration over a state directory.
//!
//! Each stage reads the artifacts of earlier stages, writes its own, and
//! leaves a stamp holding a digest of everything it consumed. A rerun with an
//! unchanged stamp is a no-op.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, Grouping, PipelineConfig, RawSource};
use crate::corpus::{
    chronological_split, group_by_session, group_by_window, load_corpus_jsonl, load_raw_lines,
    load_session_labels, save_corpus_jsonl, Corpus, LabelConvention, Preprocessor,
};
use crate::delta::{build_delta_matrix_from_store, DeltaBuildConfig, DeltaMatrix};
use crate::embed::{embed_corpus, EmbeddingStore, Encoder, ProjectionHead};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, export_alignment_matrices, write_report, Report, REPORT_SCHEMA_VERSION};
use crate::infer::{Detector, Prediction, Selection};
use crate::oracle::Oracle;
use crate::synthetic;
use crate::train::{train_head, write_trace_csv, TraceRow, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    Embed,
    BuildDelta,
    Train,
    Detect,
    Eval,
    All,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::Prepare,
        Stage::Embed,
        Stage::BuildDelta,
        Stage::Train,
        Stage::Detect,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Embed => "embed",
            Stage::BuildDelta => "build-delta",
            Stage::Train => "train",
            Stage::Detect => "detect",
            Stage::Eval => "eval",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .iter()
            .chain([&Stage::All])
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

/// File locations inside a state directory.
#[derive(Debug, Clone)]
pub struct StateLayout {
    pub root: PathBuf,
}

impl StateLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn train_corpus(&self) -> PathBuf {
        self.at("corpus/train.jsonl")
    }
    pub fn test_corpus(&self) -> PathBuf {
        self.at("corpus/test.jsonl")
    }
    pub fn train_backbone(&self) -> PathBuf {
        self.at("embed/train.emb")
    }
    pub fn test_backbone(&self) -> PathBuf {
        self.at("embed/test.emb")
    }
    pub fn train_trained(&self) -> PathBuf {
        self.at("embed/train.trained.emb")
    }
    pub fn test_trained(&self) -> PathBuf {
        self.at("embed/test.trained.emb")
    }
    pub fn delta_matrix(&self) -> PathBuf {
        self.at("delta/matrix.bin")
    }
    pub fn delta_checkpoint(&self) -> PathBuf {
        self.at("delta/matrix.ckpt")
    }
    pub fn head(&self) -> PathBuf {
        self.at("model/head.json")
    }
    pub fn trace_json(&self) -> PathBuf {
        self.at("model/trace.json")
    }
    pub fn loss_trace(&self) -> PathBuf {
        self.at("train/loss_trace.csv")
    }
    pub fn predictions(&self) -> PathBuf {
        self.at("detect/predictions.jsonl")
    }
    pub fn alignment_similarity(&self) -> PathBuf {
        self.at("eval/alignment_similarity.csv")
    }
    pub fn alignment_delta(&self) -> PathBuf {
        self.at("eval/alignment_delta.csv")
    }
    fn stamp(&self, stage: Stage) -> PathBuf {
        self.at(&format!("stamps/{}.json", stage.name()))
    }
    fn timing(&self) -> PathBuf {
        self.at("stamps/timing.json")
    }
}

#[derive(Serialize, Deserialize, PartialEq)]
struct Stamp {
    fingerprint: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn digest(value: &Value) -> String {
    sha_hex(value.to_string().as_bytes())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    }
    Ok(())
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            artifact: path.display().to_string(),
            stage: stage.name().to_string(),
        })
    }
}

/// A validated configuration bound to its state directory.
pub struct Pipeline {
    cfg: PipelineConfig,
    config_hash: String,
    overrides: Vec<String>,
    layout: StateLayout,
    oracle: OnceLock<Arc<dyn Oracle>>,
    timing: std::sync::Mutex<BTreeMap<String, f64>>,
}

impl Pipeline {
    /// `config_bytes` are the raw file contents, hashed into the report.
    pub fn new(cfg: PipelineConfig, config_bytes: &[u8], overrides: Vec<String>) -> Result<Self> {
        cfg.validate()?;
        let layout = StateLayout::new(cfg.state_dir());
        Ok(Self {
            config_hash: sha_hex(config_bytes),
            cfg,
            overrides,
            layout,
            oracle: OnceLock::new(),
            timing: Default::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    fn oracle(&self) -> Result<&Arc<dyn Oracle>> {
        if let Some(o) = self.oracle.get() {
            return Ok(o);
        }
        let built = self.cfg.oracle_spec().build()?;
        Ok(self.oracle.get_or_init(|| built))
    }

    fn base_encoder(&self) -> Result<Encoder> {
        let backbone = self.cfg.encoder.backbone.build()?;
        let dim = backbone.dim();
        Encoder::new(backbone, ProjectionHead::identity(dim))
    }

    fn trained_encoder(&self) -> Result<Encoder> {
        require(&self.layout.head(), Stage::Train)?;
        self.base_encoder()?.with_head(ProjectionHead::load(&self.layout.head())?)
    }

    fn fresh(&self, stage: Stage, fingerprint: &str, outputs: &[PathBuf]) -> bool {
        let Ok(text) = std::fs::read_to_string(self.layout.stamp(stage)) else {
            return false;
        };
        let same = serde_json::from_str::<Stamp>(&text).is_ok_and(|s| s.fingerprint == fingerprint);
        same && outputs.iter().all(|p| p.exists())
    }

    fn write_stamp(&self, stage: Stage, fingerprint: &str) -> Result<()> {
        let path = self.layout.stamp(stage);
        ensure_parent(&path)?;
        let text = serde_json::to_string(&Stamp {
            fingerprint: fingerprint.to_string(),
        })?;
        std::fs::write(&path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    /// Runs one stage, or every stage in order for [`Stage::All`].
    pub fn run_stage(&self, stage: Stage) -> Result<StageStatus> {
        if stage == Stage::All {
            let mut status = StageStatus::UpToDate;
            for s in Stage::ORDER {
                if self.run_stage(s)? == StageStatus::Ran {
                    status = StageStatus::Ran;
                }
            }
            return Ok(status);
        }
        let started = Instant::now();
        let status = match stage {
            Stage::Prepare => self.prepare(),
            Stage::Embed => self.embed(),
            Stage::BuildDelta => self.build_delta(),
            Stage::Train => self.train(),
            Stage::Detect => self.detect(),
            Stage::Eval => self.eval(),
            Stage::All => unreachable!(),
        }?;
        let secs = started.elapsed().as_secs_f64();
        log::info!("{stage}: {status:?} in {secs:.2}s");
        if self.cfg.output.report_wall_clock && stage != Stage::Eval {
            self.record_timing(stage, secs)?;
        }
        Ok(status)
    }

    fn record_timing(&self, stage: Stage, secs: f64) -> Result<()> {
        let path = self.layout.timing();
        let mut all: BTreeMap<String, f64> = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        all.insert(stage.name().to_string(), secs);
        self.timing.lock().expect("timing lock").insert(stage.name().to_string(), secs);
        ensure_parent(&path)?;
        std::fs::write(&path, serde_json::to_string(&all)?).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    fn dataset_fingerprint(&self) -> Result<String> {
        let mut files = Vec::new();
        match &self.cfg.dataset {
            DatasetConfig::Jsonl { train, test } => {
                files.push(self.cfg.resolve(train));
                files.push(self.cfg.resolve(test));
            }
            DatasetConfig::Raw { sources } => {
                for s in sources {
                    files.push(self.cfg.resolve(&s.path));
                    if let LabelConvention::SessionFile { path } = s.effective_labels() {
                        files.push(self.cfg.resolve(&path));
                    }
                }
            }
            DatasetConfig::Synthetic { .. } => {}
        }
        let hashes = files.iter().map(|p| file_sha(p)).collect::<Result<Vec<_>>>()?;
        Ok(digest(&json!({
            "dataset": serde_json::to_value(&self.cfg.dataset)?,
            "files": hashes,
        })))
    }

    fn prepare(&self) -> Result<StageStatus> {
        let fp = self.dataset_fingerprint()?;
        let outputs = [self.layout.train_corpus(), self.layout.test_corpus()];
        if self.fresh(Stage::Prepare, &fp, &outputs) {
            return Ok(StageStatus::UpToDate);
        }
        let (train, test) = match &self.cfg.dataset {
            DatasetConfig::Jsonl { train, test } => (
                load_corpus_jsonl(&self.cfg.resolve(train))?,
                load_corpus_jsonl(&self.cfg.resolve(test))?,
            ),
            DatasetConfig::Synthetic { spec } => {
                let c = synthetic::generate(spec)?;
                (c.train, c.test)
            }
            DatasetConfig::Raw { sources } => {
                let mut trains = Vec::new();
                let mut tests = Vec::new();
                for src in sources {
                    let (tr, te) = self.load_raw_source(src)?;
                    trains.push(tr);
                    tests.push(te);
                }
                let t: Vec<&Corpus> = trains.iter().collect();
                let s: Vec<&Corpus> = tests.iter().collect();
                (Corpus::concat(&t)?, Corpus::concat(&s)?)
            }
        };
        if train.len() < 2 {
            return Err(Error::EmptyCorpus(format!("training split has {} sequences", train.len())));
        }
        ensure_parent(&outputs[0])?;
        save_corpus_jsonl(&train, &outputs[0])?;
        save_corpus_jsonl(&test, &outputs[1])?;
        log::info!("prepared {} training and {} test sequences", train.len(), test.len());
        self.write_stamp(Stage::Prepare, &fp)?;
        Ok(StageStatus::Ran)
    }

    fn load_raw_source(&self, src: &RawSource) -> Result<(Corpus, Corpus)> {
        let rules = Preprocessor::compile(&src.rules)?;
        let labels = src.effective_labels();
        let lines = load_raw_lines(&self.cfg.resolve(&src.path), &labels, &rules)?;
        let grouping = src
            .effective_grouping()
            .ok_or_else(|| Error::Config(format!("source {}: no grouping", src.domain)))?;
        let mut sequences = match grouping {
            Grouping::Window {
                window_size,
                drop_partial,
            } => group_by_window(&lines, window_size, &src.domain, drop_partial)?,
            Grouping::Session { key_pattern } => {
                let re = Regex::new(&key_pattern).map_err(|e| Error::Config(e.to_string()))?;
                group_by_session(&lines, &re, &src.domain)?.sequences
            }
        };
        if let LabelConvention::SessionFile { path } = &labels {
            let table = load_session_labels(&self.cfg.resolve(path))?;
            let mut unlabeled = 0usize;
            for seq in &mut sequences {
                match table.get(&seq.id) {
                    Some(l) => seq.label = *l,
                    None => unlabeled += 1,
                }
            }
            if unlabeled > 0 {
                log::warn!("{}: {unlabeled} sessions missing from the label file, kept as normal", src.domain);
            }
        }
        let corpus = Corpus::new(sequences)?;
        let train = src.train_count.min(corpus.len());
        let test = src.test_count.min(corpus.len() - train);
        if train + test < src.train_count + src.test_count {
            log::warn!(
                "{}: asked for {}+{} sequences, only {} available",
                src.domain,
                src.train_count,
                src.test_count,
                corpus.len()
            );
        }
        chronological_split(&corpus, train, test)
    }

    fn load_corpora(&self) -> Result<(Corpus, Corpus)> {
        require(&self.layout.train_corpus(), Stage::Prepare)?;
        require(&self.layout.test_corpus(), Stage::Prepare)?;
        Ok((
            load_corpus_jsonl(&self.layout.train_corpus())?,
            load_corpus_jsonl(&self.layout.test_corpus())?,
        ))
    }

    fn embed(&self) -> Result<StageStatus> {
        let (train, test) = self.load_corpora()?;
        let encoder = self.base_encoder()?;
        ensure_parent(&self.layout.train_backbone())?;
        let before = [self.layout.train_backbone(), self.layout.test_backbone()].map(|p| file_sha(&p).ok());
        embed_corpus(&train, &encoder, Some(&self.layout.train_backbone()))?;
        if !test.is_empty() {
            embed_corpus(&test, &encoder, Some(&self.layout.test_backbone()))?;
        }
        let after = [self.layout.train_backbone(), self.layout.test_backbone()].map(|p| file_sha(&p).ok());
        Ok(if before == after {
            StageStatus::UpToDate
        } else {
            StageStatus::Ran
        })
    }

    fn train_store(&self, train: &Corpus) -> Result<EmbeddingStore> {
        require(&self.layout.train_backbone(), Stage::Embed)?;
        embed_corpus(train, &self.base_encoder()?, Some(&self.layout.train_backbone()))
    }

    fn delta_build_config(&self) -> DeltaBuildConfig {
        DeltaBuildConfig {
            k_candidates: self.cfg.delta.k_candidates,
            mmr_lambda: self.cfg.retrieve.mmr_lambda,
            checkpoint_every: self.cfg.delta.checkpoint_every,
            checkpoint_path: Some(self.layout.delta_checkpoint()),
            resume: self.cfg.delta.resume,
            instruction: self.cfg.infer.instruction.clone(),
        }
    }

    fn build_delta(&self) -> Result<StageStatus> {
        let (train, _) = self.load_corpora()?;
        let store = self.train_store(&train)?;
        let oracle = self.oracle()?;
        let fp = digest(&json!({
            "train": file_sha(&self.layout.train_corpus())?,
            "store": store.fingerprint(),
            "oracle": oracle.fingerprint(),
            "k": self.cfg.delta.k_candidates,
            "lambda": self.cfg.retrieve.mmr_lambda,
            "instruction": self.cfg.infer.instruction,
        }));
        if self.fresh(Stage::BuildDelta, &fp, &[self.layout.delta_matrix()]) {
            return Ok(StageStatus::UpToDate);
        }
        let cfg = self.delta_build_config();
        ensure_parent(&self.layout.delta_matrix())?;
        let ckpt = self.layout.delta_checkpoint();
        if ckpt.exists() && !cfg.resume {
            std::fs::remove_file(&ckpt).map_err(|e| Error::io(format!("remove {}", ckpt.display()), e))?;
        }
        let matrix = match build_delta_matrix_from_store(&train, &store, store.fingerprint(), oracle.as_ref(), &cfg) {
            Err(Error::InvalidInput(msg)) if msg.contains("checkpoint") => {
                log::warn!("{msg}; discarding the stale checkpoint");
                std::fs::remove_file(&ckpt).map_err(|e| Error::io(format!("remove {}", ckpt.display()), e))?;
                build_delta_matrix_from_store(&train, &store, store.fingerprint(), oracle.as_ref(), &cfg)?
            }
            other => other?,
        };
        matrix.save(&self.layout.delta_matrix())?;
        if ckpt.exists() {
            std::fs::remove_file(&ckpt).map_err(|e| Error::io(format!("remove {}", ckpt.display()), e))?;
        }
        log::info!(
            "delta matrix: {} entries, {} helpful, {} harmful",
            matrix.entry_count(),
            matrix.positive_pairs().len(),
            matrix.negative_pairs().len()
        );
        self.write_stamp(Stage::BuildDelta, &fp)?;
        Ok(StageStatus::Ran)
    }

    fn load_matrix(&self) -> Result<DeltaMatrix> {
        require(&self.layout.delta_matrix(), Stage::BuildDelta)?;
        let (matrix, warnings) = DeltaMatrix::load(&self.layout.delta_matrix(), None, None)?;
        debug_assert!(!warnings.any());
        Ok(matrix)
    }

    fn target_domain(&self, train: &Corpus) -> Option<String> {
        self.cfg.train.config.target_domain.clone().or_else(|| match &self.cfg.dataset {
            DatasetConfig::Synthetic { .. } if train.domains().contains(synthetic::TARGET_DOMAIN) => {
                Some(synthetic::TARGET_DOMAIN.to_string())
            }
            _ => None,
        })
    }

    fn train(&self) -> Result<StageStatus> {
        let (train, _) = self.load_corpora()?;
        require(&self.layout.train_backbone(), Stage::Embed)?;
        let matrix_path = self.layout.delta_matrix();
        require(&matrix_path, Stage::BuildDelta)?;
        let store = self.train_store(&train)?;
        let mut cfg = self.cfg.train_config();
        cfg.target_domain = self.target_domain(&train);
        let fp = digest(&json!({
            "train": file_sha(&self.layout.train_corpus())?,
            "store": store.fingerprint(),
            "matrix": file_sha(&matrix_path)?,
            "config": serde_json::to_value(&cfg)?,
            "weights": serde_json::to_value(self.cfg.train.weights)?,
        }));
        let outputs = [self.layout.head(), self.layout.loss_trace(), self.layout.trace_json()];
        if self.fresh(Stage::Train, &fp, &outputs) {
            return Ok(StageStatus::UpToDate);
        }
        let matrix = self.load_matrix()?;
        let set = TrainingSet::from_corpus(&train, &store, cfg.target_domain.as_deref())?;
        let init = ProjectionHead::identity(store.dim());
        let outcome = train_head(&set, &matrix, init, &self.cfg.train.weights, &cfg)?;
        for p in &outputs {
            ensure_parent(p)?;
        }
        outcome.head.save(&self.layout.head())?;
        write_trace_csv(&outcome.trace, &self.layout.loss_trace())?;
        let trace = serde_json::to_string_pretty(&outcome.trace)?;
        std::fs::write(self.layout.trace_json(), trace)
            .map_err(|e| Error::io(format!("write {}", self.layout.trace_json().display()), e))?;
        if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
            log::info!("loss {} -> {}", first.losses.l_total, last.losses.l_total);
        }
        self.write_stamp(Stage::Train, &fp)?;
        Ok(StageStatus::Ran)
    }

    /// Trained-encoder embeddings, cached by fingerprint.
    fn trained_store(&self, encoder: &Encoder, corpus: &Corpus, path: &Path) -> Result<EmbeddingStore> {
        ensure_parent(path)?;
        embed_corpus(corpus, encoder, Some(path))
    }

    fn detect(&self) -> Result<StageStatus> {
        let (train, test) = self.load_corpora()?;
        if test.is_empty() {
            return Err(Error::EmptyCorpus("test split is empty; nothing to detect".into()));
        }
        let encoder = self.trained_encoder()?;
        require(&self.layout.delta_matrix(), Stage::BuildDelta)?;
        let oracle = self.oracle()?;
        let fp = digest(&json!({
            "train": file_sha(&self.layout.train_corpus())?,
            "test": file_sha(&self.layout.test_corpus())?,
            "encoder": encoder.fingerprint(),
            "matrix": file_sha(&self.layout.delta_matrix())?,
            "oracle": oracle.fingerprint(),
            "infer": serde_json::to_value(&self.cfg.infer)?,
        }));
        if self.fresh(Stage::Detect, &fp, &[self.layout.predictions()]) {
            return Ok(StageStatus::UpToDate);
        }
        let matrix = self.load_matrix()?;
        let train_vecs = self.trained_store(&encoder, &train, &self.layout.train_trained())?;
        let test_vecs = self.trained_store(&encoder, &test, &self.layout.test_trained())?;
        let detector = Detector::new(&encoder, &train, &train_vecs, &matrix, oracle.as_ref(), self.cfg.infer.clone())?;
        let predictions = detector.detect_batch(&test, &test_vecs)?;
        write_predictions(&predictions, &self.layout.predictions())?;
        let failed = predictions.iter().filter(|p| p.failed()).count();
        log::info!("{} predictions, {failed} failed", predictions.len());
        self.write_stamp(Stage::Detect, &fp)?;
        Ok(StageStatus::Ran)
    }

    fn eval(&self) -> Result<StageStatus> {
        let (train, test) = self.load_corpora()?;
        require(&self.layout.predictions(), Stage::Detect)?;
        let predictions = read_predictions(&self.layout.predictions())?;
        let metrics = compute_metrics(&predictions, &test, self.cfg.infer.failed_as_normal)?;
        let encoder = self.trained_encoder()?;
        let matrix = self.load_matrix()?;
        let oracle = self.oracle()?;

        let target = self.target_domain(&train);
        if self.cfg.output.export_alignment {
            if let Some(t) = &target {
                let train_vecs = self.trained_store(&encoder, &train, &self.layout.train_trained())?;
                let limit = self.cfg.output.alignment_limit;
                let pick = |want_target: bool| -> Vec<String> {
                    train
                        .sequences()
                        .iter()
                        .filter(|s| (s.domain == *t) == want_target)
                        .take(limit)
                        .map(|s| s.id.clone())
                        .collect()
                };
                let (src, tgt) = (pick(false), pick(true));
                if !src.is_empty() && !tgt.is_empty() {
                    ensure_parent(&self.layout.alignment_similarity())?;
                    export_alignment_matrices(
                        &src,
                        &tgt,
                        &train_vecs,
                        &matrix,
                        &self.layout.alignment_similarity(),
                        &self.layout.alignment_delta(),
                    )?;
                }
            }
        }

        let trace: Vec<TraceRow> = match std::fs::read_to_string(self.layout.trace_json()) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => Vec::new(),
        };
        let mut fingerprints = Map::new();
        fingerprints.insert("oracle".into(), oracle.fingerprint().into());
        fingerprints.insert("encoder".into(), encoder.fingerprint().into());
        fingerprints.insert("delta_matrix".into(), file_sha(&self.layout.delta_matrix())?.into());
        fingerprints.insert("train_corpus".into(), file_sha(&self.layout.train_corpus())?.into());
        fingerprints.insert("test_corpus".into(), file_sha(&self.layout.test_corpus())?.into());

        let mut summary = Map::new();
        summary.insert("train_sequences".into(), train.len().into());
        summary.insert("test_sequences".into(), test.len().into());
        summary.insert("train_domains".into(), json!(train.domains()));
        summary.insert("target_domain".into(), json!(target));
        summary.insert("delta_entries".into(), matrix.entry_count().into());
        summary.insert("delta_helpful_pairs".into(), matrix.positive_pairs().len().into());
        summary.insert("delta_harmful_pairs".into(), matrix.negative_pairs().len().into());
        summary.insert("oracle_calls_delta".into(), (matrix.meta().n + matrix.entry_count()).into());
        if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
            summary.insert("epochs".into(), last.epoch.into());
            summary.insert("loss_initial".into(), serde_json::to_value(first.losses)?);
            summary.insert("loss_final".into(), serde_json::to_value(last.losses)?);
            summary.insert("helpful_pair_cosine_initial".into(), json!(first.positive_pair_cosine));
            summary.insert("helpful_pair_cosine_final".into(), json!(last.positive_pair_cosine));
        }
        summary.insert(
            "delta_expansions_used".into(),
            predictions.iter().map(|p| p.expansions.len()).sum::<usize>().into(),
        );

        let timing = if self.cfg.output.report_wall_clock {
            let mut t: BTreeMap<String, f64> = std::fs::read_to_string(self.layout.timing())
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok())
                .unwrap_or_default();
            t.extend(self.timing.lock().expect("timing lock").clone());
            t
        } else {
            BTreeMap::new()
        };
        let report = Report {
            schema_version: REPORT_SCHEMA_VERSION,
            metrics,
            config_hash: self.config_hash.clone(),
            config: serde_json::to_value(&self.cfg)?,
            overrides: self.overrides.clone(),
            fingerprints,
            summary,
            timing,
        };
        write_report(&report, &self.cfg.report_path())?;
        log::info!(
            "precision {:.4} recall {:.4} f1 {:.4}",
            report.metrics.precision,
            report.metrics.recall,
            report.metrics.f1
        );
        Ok(StageStatus::Ran)
    }

    /// Demonstrations the detector would use for one prepared sequence.
    pub fn retrieve(&self, id: &str) -> Result<Selection> {
        let (train, test) = self.load_corpora()?;
        let encoder = self.trained_encoder()?;
        let matrix = self.load_matrix()?;
        let seq = test
            .get(id)
            .or_else(|| train.get(id))
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let train_vecs = self.trained_store(&encoder, &train, &self.layout.train_trained())?;
        let oracle = self.oracle()?;
        let detector = Detector::new(&encoder, &train, &train_vecs, &matrix, oracle.as_ref(), self.cfg.infer.clone())?;
        detector.select(&encoder.encode(seq)?)
    }
}

pub fn write_predictions(predictions: &[Prediction], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for p in predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
