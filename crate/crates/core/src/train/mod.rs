//! Projection-head training against domain alignment (MMD), label
//! contrast (SupCon) and delta-guided pair losses.

mod losses;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{median_bandwidth, DeltaTerms, IndexedPair};

use losses::{delta_eval, mmd_eval, supcon_eval, DeltaParams};

use crate::config::Violation;
use crate::corpus::{Corpus, Label};
use crate::delta::DeltaMatrix;
use crate::embed::{dot, embed_corpus, norm, EmbeddingStore, Encoder, ProjectionHead};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mmd: f64,
    pub lambda_supcon: f64,
    pub lambda_delta: f64,
    pub lambda_delta_neg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mmd: 0.1,
            lambda_supcon: 1.0,
            lambda_delta: 1.0,
            lambda_delta_neg: 1.0,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda_mmd: 0.0,
        lambda_supcon: 0.0,
        lambda_delta: 0.0,
        lambda_delta_neg: 0.0,
    };

    pub fn violations(&self, prefix: &str) -> Vec<Violation> {
        [
            ("lambda_mmd", self.lambda_mmd),
            ("lambda_supcon", self.lambda_supcon),
            ("lambda_delta", self.lambda_delta),
            ("lambda_delta_neg", self.lambda_delta_neg),
        ]
        .into_iter()
        .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
        .map(|(name, v)| Violation {
            path: format!("{prefix}.{name}"),
            message: format!("must be finite and >= 0, got {v}"),
        })
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled batch, recomputed per batch.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub theta: f64,
    pub epsilon: f64,
    pub sim_floor: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub kernel_bandwidth: Bandwidth,
    /// Optimise MMD² instead of MMD.
    pub mmd_squared: bool,
    /// One extra delta-only step over every pair at the end of each epoch.
    pub full_pair_pass: bool,
    /// Members per domain used for the per-epoch loss trace.
    pub trace_eval_limit: usize,
    /// Domain treated as target; everything else is source.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_domain: Option<String>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            theta: 0.1,
            epsilon: 1e-8,
            sim_floor: 1e-4,
            learning_rate: 1e-2,
            epochs: 20,
            batch_source: 16,
            batch_target: 16,
            kernel_bandwidth: Bandwidth::Median,
            mmd_squared: false,
            full_pair_pass: false,
            trace_eval_limit: 1024,
            target_domain: None,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self, prefix: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut check = |ok: bool, name: &str, msg: String| {
            if !ok {
                out.push(Violation {
                    path: format!("{prefix}.{name}"),
                    message: msg,
                });
            }
        };
        check(self.tau > 0.0 && self.tau.is_finite(), "tau", format!("must be > 0, got {}", self.tau));
        check(self.theta >= 0.0 && self.theta.is_finite(), "theta", format!("must be >= 0, got {}", self.theta));
        check(
            self.epsilon >= 0.0 && self.epsilon.is_finite(),
            "epsilon",
            format!("must be >= 0, got {}", self.epsilon),
        );
        check(
            self.sim_floor > 0.0 && self.sim_floor < 1.0,
            "sim_floor",
            format!("must lie in (0, 1), got {}", self.sim_floor),
        );
        check(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            format!("must be >= 0, got {}", self.learning_rate),
        );
        check(self.epochs >= 1, "epochs", "must be at least 1".into());
        check(self.batch_source >= 1, "batch_source", "must be at least 1".into());
        check(self.batch_target >= 1, "batch_target", "must be at least 1".into());
        check(self.trace_eval_limit >= 1, "trace_eval_limit", "must be at least 1".into());
        if let Bandwidth::Fixed(s) = self.kernel_bandwidth {
            check(s > 0.0 && s.is_finite(), "kernel_bandwidth", format!("fixed sigma must be > 0, got {s}"));
        }
        out
    }

    fn delta_params(&self, weights: &LossWeights) -> DeltaParams {
        DeltaParams {
            tau: self.tau,
            theta: self.theta,
            sim_floor: self.sim_floor,
            lambda_neg: weights.lambda_delta_neg,
        }
    }
}

fn normalize_all(vecs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    vecs.iter()
        .map(|v| {
            let n = norm(v);
            if n == 0.0 || !n.is_finite() {
                Err(Error::Degenerate("zero or non-finite embedding".into()))
            } else {
                Ok(v.iter().map(|x| x / n).collect())
            }
        })
        .collect()
}

fn as_refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Biased Gaussian-kernel MMD between two sets of raw vectors.
pub fn mmd_loss(source: &[Vec<f64>], target: &[Vec<f64>], sigma: f64) -> Result<f64> {
    Ok(mmd_eval(&as_refs(source), &as_refs(target), sigma, false, false)?.value)
}

/// Supervised contrastive loss with cosine similarities.
pub fn supcon_loss(vecs: &[Vec<f64>], labels: &[Label], tau: f64, epsilon: f64) -> Result<f64> {
    let unit = normalize_all(vecs)?;
    Ok(supcon_eval(&as_refs(&unit), labels, tau, epsilon, false)?.0)
}

/// Delta pairs split by the sign of δ; δ = 0 pairs are left out.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSets {
    pub positives: Vec<(String, String, f64)>,
    pub negatives: Vec<(String, String, f64)>,
}

impl PairSets {
    pub fn from_matrix(matrix: &DeltaMatrix) -> Self {
        let own = |v: Vec<(&str, &str, f64)>| v.into_iter().map(|(q, d, x)| (q.to_string(), d.to_string(), x)).collect();
        Self {
            positives: own(matrix.positive_pairs()),
            negatives: own(matrix.negative_pairs()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaLoss {
    pub positive: f64,
    pub negative: f64,
    /// `positive + lambda_delta_neg * negative`
    pub total: f64,
}

/// Delta pair loss over id-addressed embeddings, with cosine similarities.
pub fn delta_loss(
    pairs: &PairSets,
    embeddings: &HashMap<String, Vec<f64>>,
    tau: f64,
    theta: f64,
    lambda_delta_neg: f64,
    sim_floor: f64,
) -> Result<DeltaLoss> {
    if pairs.positives.iter().any(|p| !(p.2 > 0.0)) || pairs.negatives.iter().any(|p| !(p.2 < 0.0)) {
        return Err(Error::InvalidInput("pair set holds a delta with the wrong sign".into()));
    }
    let mut ids: Vec<&str> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut index = |id: &str| -> Result<usize> {
        if let Some(&i) = slot.get(id) {
            return Ok(i);
        }
        let (key, _) = embeddings.get_key_value(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        slot.insert(key, ids.len());
        ids.push(key);
        Ok(ids.len() - 1)
    };
    let mut resolve = |set: &[(String, String, f64)]| -> Result<Vec<IndexedPair>> {
        set.iter()
            .map(|(q, d, delta)| {
                Ok(IndexedPair {
                    i: index(q)?,
                    j: index(d)?,
                    delta: *delta,
                })
            })
            .collect()
    };
    let pos = resolve(&pairs.positives)?;
    let neg = resolve(&pairs.negatives)?;
    let raw: Vec<Vec<f64>> = ids.iter().map(|id| embeddings[*id].clone()).collect();
    let unit = normalize_all(&raw)?;
    let params = DeltaParams {
        tau,
        theta,
        sim_floor,
        lambda_neg: lambda_delta_neg,
    };
    let (terms, _) = delta_eval(&as_refs(&unit), &pos, &neg, params, false)?;
    Ok(DeltaLoss {
        positive: terms.positive,
        negative: terms.negative,
        total: terms.positive + lambda_delta_neg * terms.negative,
    })
}

/// Batch members as backbone vectors plus the delta pairs among them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub is_source: Vec<bool>,
    pub positives: Vec<IndexedPair>,
    pub negatives: Vec<IndexedPair>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.inputs.len();
        if self.labels.len() != n || self.is_source.len() != n {
            return Err(Error::InvalidInput("batch inputs, labels and domains differ in length".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mmd: f64,
    pub l_supcon: f64,
    pub l_delta_pos: f64,
    pub l_delta_neg: f64,
    pub l_total: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "mmd={} supcon={} delta_pos={} delta_neg={} total={}",
            self.l_mmd, self.l_supcon, self.l_delta_pos, self.l_delta_neg, self.l_total
        )
    }
}

struct Projected {
    z_norm: Vec<f64>,
    v: Vec<Vec<f64>>,
}

fn project(head: &ProjectionHead, inputs: &[Vec<f64>]) -> Result<Projected> {
    let mut z_norm = Vec::with_capacity(inputs.len());
    let mut v = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        if x.len() != head.cols() {
            return Err(Error::InvalidInput(format!(
                "batch member {i} has dim {}, head expects {}",
                x.len(),
                head.cols()
            )));
        }
        let z = head.apply(x);
        let n = norm(&z);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate(format!("projection of batch member {i} is zero")));
        }
        v.push(z.iter().map(|c| c / n).collect());
        z_norm.push(n);
    }
    Ok(Projected { z_norm, v })
}

/// Kernel bandwidth for `batch` under `head`.
pub fn resolve_bandwidth(head: &ProjectionHead, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    match cfg.kernel_bandwidth {
        Bandwidth::Fixed(s) => Ok(s),
        Bandwidth::Median => Ok(median_bandwidth(&as_refs(&project(head, &batch.inputs)?.v))),
    }
}

fn evaluate(
    head: &ProjectionHead,
    batch: &Batch,
    weights: &LossWeights,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    batch.check()?;
    let p = project(head, &batch.inputs)?;
    let n = batch.len();
    let dim = head.rows();
    let mut out = LossBreakdown::default();
    let mut gv = vec![vec![0.0; dim]; n];

    let src: Vec<usize> = (0..n).filter(|&i| batch.is_source[i]).collect();
    let tgt: Vec<usize> = (0..n).filter(|&i| !batch.is_source[i]).collect();
    if weights.lambda_mmd != 0.0 && !src.is_empty() && !tgt.is_empty() {
        let sigma = match cfg.kernel_bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Median => median_bandwidth(&as_refs(&p.v)),
        };
        let s: Vec<&[f64]> = src.iter().map(|&i| p.v[i].as_slice()).collect();
        let t: Vec<&[f64]> = tgt.iter().map(|&i| p.v[i].as_slice()).collect();
        let m = mmd_eval(&s, &t, sigma, cfg.mmd_squared, want_grad)?;
        out.l_mmd = m.value;
        if want_grad {
            for (&i, g) in src.iter().zip(&m.grad_source) {
                add_scaled(&mut gv[i], weights.lambda_mmd, g);
            }
            for (&i, g) in tgt.iter().zip(&m.grad_target) {
                add_scaled(&mut gv[i], weights.lambda_mmd, g);
            }
        }
    }
    // A batch with no same-label pair has no SupCon anchor; the term is skipped.
    let has_anchor = (0..n).any(|i| (i + 1..n).any(|j| batch.labels[i] == batch.labels[j]));
    if weights.lambda_supcon != 0.0 && has_anchor {
        let (value, g) = supcon_eval(&as_refs(&p.v), &batch.labels, cfg.tau, cfg.epsilon, want_grad)?;
        out.l_supcon = value;
        if want_grad {
            for (acc, gi) in gv.iter_mut().zip(&g) {
                add_scaled(acc, weights.lambda_supcon, gi);
            }
        }
    }
    if weights.lambda_delta != 0.0 {
        let (terms, g) = delta_eval(
            &as_refs(&p.v),
            &batch.positives,
            &batch.negatives,
            cfg.delta_params(weights),
            want_grad,
        )?;
        out.l_delta_pos = terms.positive;
        out.l_delta_neg = terms.negative;
        if want_grad {
            for (acc, gi) in gv.iter_mut().zip(&g) {
                add_scaled(acc, weights.lambda_delta, gi);
            }
        }
    }
    out.l_total = weights.lambda_mmd * out.l_mmd
        + weights.lambda_supcon * out.l_supcon
        + weights.lambda_delta * (out.l_delta_pos + weights.lambda_delta_neg * out.l_delta_neg);

    let mut grad = Vec::new();
    if want_grad {
        grad = vec![0.0; dim * head.cols()];
        for i in 0..n {
            // v = z/|z|  ⇒  dL/dz = (g − (v·g) v) / |z|
            let g = &gv[i];
            let v = &p.v[i];
            let vg = dot(v, g);
            let x = &batch.inputs[i];
            for r in 0..dim {
                let dz = (g[r] - vg * v[r]) / p.z_norm[i];
                if dz != 0.0 {
                    let row = &mut grad[r * head.cols()..(r + 1) * head.cols()];
                    for (w, xc) in row.iter_mut().zip(x) {
                        *w += dz * xc;
                    }
                }
            }
        }
    }
    Ok((out, grad))
}

fn add_scaled(acc: &mut [f64], c: f64, g: &[f64]) {
    for (a, x) in acc.iter_mut().zip(g) {
        *a += c * x;
    }
}

/// Weighted objective with each term reported unweighted. Terms whose weight
/// is zero are not evaluated and report 0.
pub fn total_loss(head: &ProjectionHead, batch: &Batch, weights: &LossWeights, cfg: &TrainConfig) -> Result<LossBreakdown> {
    Ok(evaluate(head, batch, weights, cfg, false)?.0)
}

/// dL/dW, row-major like the head's weights. A median bandwidth is held
/// constant while differentiating.
pub fn grad_total_loss(head: &ProjectionHead, batch: &Batch, weights: &LossWeights, cfg: &TrainConfig) -> Result<Vec<f64>> {
    Ok(evaluate(head, batch, weights, cfg, true)?.1)
}

/// Largest per-coordinate `|a − f| / max(|a|, |f|, 1e-8)` between an analytic
/// gradient and central differences of `f` with step `h`.
pub fn finite_diff_max_rel_error(
    point: &[f64],
    analytic: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    if point.len() != analytic.len() || !(h > 0.0) {
        return Err(Error::InvalidInput("finite-difference check needs matching shapes and h > 0".into()));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for c in 0..x.len() {
        let orig = x[c];
        x[c] = orig + h;
        let up = f(&x)?;
        x[c] = orig - h;
        let down = f(&x)?;
        x[c] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[c];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks `grad_total_loss` against central differences of `total_loss`.
/// A median bandwidth is frozen at its value for `head` first.
pub fn finite_diff_check(head: &ProjectionHead, batch: &Batch, weights: &LossWeights, cfg: &TrainConfig, h: f64) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.kernel_bandwidth = Bandwidth::Fixed(resolve_bandwidth(head, batch, &cfg)?);
    let analytic = grad_total_loss(head, batch, weights, &cfg)?;
    finite_diff_max_rel_error(head.weights(), &analytic, h, |w| {
        let probe = ProjectionHead::from_rows(head.rows(), head.cols(), w.to_vec())?;
        Ok(total_loss(&probe, batch, weights, &cfg)?.l_total)
    })
}

/// Training members: ids, backbone vectors, labels and domain side.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub is_source: Vec<bool>,
}

impl TrainingSet {
    /// Pairs corpus sequences with their backbone vectors from `store`.
    pub fn from_corpus(corpus: &Corpus, store: &EmbeddingStore, target_domain: Option<&str>) -> Result<Self> {
        let target = match target_domain {
            Some(t) => Some(t.to_string()),
            None if corpus.domains().len() <= 1 => None,
            None => {
                return Err(Error::Config(format!(
                    "training corpus spans domains {:?}; set train.target_domain",
                    corpus.domains()
                )))
            }
        };
        let mut set = TrainingSet::default();
        for seq in corpus.sequences() {
            set.ids.push(seq.id.clone());
            set.inputs.push(store.require(&seq.id)?.values().to_vec());
            set.labels.push(seq.label);
            set.is_source.push(target.as_deref() != Some(seq.domain.as_str()));
        }
        Ok(set)
    }

    fn subset(&self, members: &[usize], all_pairs: &ResolvedPairs) -> Batch {
        let mut local = vec![usize::MAX; self.ids.len()];
        for (slot, &m) in members.iter().enumerate() {
            local[m] = slot;
        }
        let pick = |pairs: &[IndexedPair]| {
            pairs
                .iter()
                .filter(|p| local[p.i] != usize::MAX && local[p.j] != usize::MAX)
                .map(|p| IndexedPair {
                    i: local[p.i],
                    j: local[p.j],
                    delta: p.delta,
                })
                .collect()
        };
        Batch {
            inputs: members.iter().map(|&m| self.inputs[m].clone()).collect(),
            labels: members.iter().map(|&m| self.labels[m]).collect(),
            is_source: members.iter().map(|&m| self.is_source[m]).collect(),
            positives: pick(&all_pairs.positives),
            negatives: pick(&all_pairs.negatives),
        }
    }
}

struct ResolvedPairs {
    positives: Vec<IndexedPair>,
    negatives: Vec<IndexedPair>,
}

fn resolve_pairs(set: &TrainingSet, matrix: &DeltaMatrix) -> Result<ResolvedPairs> {
    let index: HashMap<&str, usize> = set.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let conv = |pairs: Vec<(&str, &str, f64)>| -> Result<Vec<IndexedPair>> {
        pairs
            .into_iter()
            .map(|(q, d, delta)| {
                let i = *index.get(q).ok_or_else(|| Error::UnknownId(format!("delta query {q:?} not in training corpus")))?;
                let j = *index.get(d).ok_or_else(|| Error::UnknownId(format!("delta demo {d:?} not in training corpus")))?;
                Ok(IndexedPair { i, j, delta })
            })
            .collect()
    };
    Ok(ResolvedPairs {
        positives: conv(matrix.positive_pairs())?,
        negatives: conv(matrix.negative_pairs())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// Mean cosine over every helpful (δ > 0) pair; absent when there are none.
    pub positive_pair_cosine: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    /// Row 0 is the untrained head, then one row per epoch.
    pub trace: Vec<TraceRow>,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("epoch,l_mmd,l_supcon,l_delta_pos,l_delta_neg,l_total\n");
    for r in trace {
        let l = &r.losses;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, l.l_mmd, l.l_supcon, l.l_delta_pos, l.l_delta_neg, l.l_total
        );
    }
    out
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    std::fs::write(path, trace_csv(trace)).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn positive_pair_cosine(head: &ProjectionHead, set: &TrainingSet, pairs: &ResolvedPairs) -> Result<Option<f64>> {
    if pairs.positives.is_empty() {
        return Ok(None);
    }
    let p = project(head, &set.inputs)?;
    let sum: f64 = pairs.positives.iter().map(|q| dot(&p.v[q.i], &p.v[q.j])).sum();
    Ok(Some(sum / pairs.positives.len() as f64))
}

/// Embeds the corpus with the encoder's backbone and trains its head.
pub fn train_encoder(
    corpus: &Corpus,
    matrix: &DeltaMatrix,
    encoder: &Encoder,
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let dim = encoder.backbone().dim();
    let raw = encoder.with_head(ProjectionHead::identity(dim))?;
    let store = embed_corpus(corpus, &raw, None)?;
    let set = TrainingSet::from_corpus(corpus, &store, cfg.target_domain.as_deref())?;
    train_head(&set, matrix, encoder.head().clone(), weights, cfg)
}

/// Plain gradient descent on the head. Deterministic for a fixed seed.
pub fn train_head(
    set: &TrainingSet,
    matrix: &DeltaMatrix,
    init: ProjectionHead,
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut violations = cfg.violations("train");
    violations.extend(weights.violations("train.weights"));
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    if set.ids.is_empty() {
        return Err(Error::EmptyCorpus("nothing to train on".into()));
    }
    let pairs = resolve_pairs(set, matrix)?;
    let source: Vec<usize> = (0..set.ids.len()).filter(|&i| set.is_source[i]).collect();
    let target: Vec<usize> = (0..set.ids.len()).filter(|&i| !set.is_source[i]).collect();

    let eval_members: Vec<usize> = source
        .iter()
        .take(cfg.trace_eval_limit)
        .chain(target.iter().take(cfg.trace_eval_limit))
        .copied()
        .collect();
    let eval_batch = set.subset(&eval_members, &pairs);
    let mut eval_cfg = cfg.clone();
    eval_cfg.kernel_bandwidth = Bandwidth::Fixed(resolve_bandwidth(&init, &eval_batch, cfg)?);
    let trace_row = |epoch: usize, head: &ProjectionHead| -> Result<TraceRow> {
        Ok(TraceRow {
            epoch,
            losses: total_loss(head, &eval_batch, weights, &eval_cfg)?,
            positive_pair_cosine: positive_pair_cosine(head, set, &pairs)?,
        })
    };

    let mut head = init;
    let mut trace = vec![trace_row(0, &head)?];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut src_order = source.clone();
    let mut tgt_order = target.clone();
    let n_batches = if source.is_empty() {
        target.len().div_ceil(cfg.batch_target)
    } else {
        source.len().div_ceil(cfg.batch_source)
    };
    let pair_members: Vec<usize> = {
        let mut seen = vec![false; set.ids.len()];
        for p in pairs.positives.iter().chain(&pairs.negatives) {
            seen[p.i] = true;
            seen[p.j] = true;
        }
        (0..set.ids.len()).filter(|&i| seen[i]).collect()
    };

    for epoch in 1..=cfg.epochs {
        src_order.shuffle(&mut rng);
        tgt_order.shuffle(&mut rng);
        for step in 0..n_batches {
            let mut members: Vec<usize> = Vec::with_capacity(cfg.batch_source + cfg.batch_target);
            if source.is_empty() {
                members.extend(tgt_order.iter().skip(step * cfg.batch_target).take(cfg.batch_target));
            } else {
                members.extend(src_order.iter().skip(step * cfg.batch_source).take(cfg.batch_source));
                let take = cfg.batch_target.min(tgt_order.len());
                members.extend((0..take).map(|t| tgt_order[(step * cfg.batch_target + t) % tgt_order.len()]));
            }
            let batch = set.subset(&members, &pairs);
            descend(&mut head, &batch, weights, cfg, epoch, step)?;
        }
        if cfg.full_pair_pass && !pair_members.is_empty() {
            let batch = set.subset(&pair_members, &pairs);
            let delta_only = LossWeights {
                lambda_mmd: 0.0,
                lambda_supcon: 0.0,
                ..*weights
            };
            descend(&mut head, &batch, &delta_only, cfg, epoch, n_batches)?;
        }
        let row = trace_row(epoch, &head)?;
        log::info!("epoch {epoch}: {}", row.losses);
        trace.push(row);
    }
    Ok(TrainOutcome { head, trace })
}

fn descend(
    head: &mut ProjectionHead,
    batch: &Batch,
    weights: &LossWeights,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<()> {
    let (losses, grad) = evaluate(head, batch, weights, cfg, true)?;
    if !losses.l_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            epoch,
            step,
            breakdown: losses.to_string(),
        });
    }
    for (w, g) in head.weights_mut().iter_mut().zip(&grad) {
        *w -= cfg.learning_rate * g;
    }
    Ok(())
}
