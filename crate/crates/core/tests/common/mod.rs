//! Brute-force evaluators written straight from the formulas, sharing no code
//! with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use logicl_core::corpus::Label;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn gaussian(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let mut d2 = 0.0;
    for i in 0..a.len() {
        d2 += (a[i] - b[i]).powi(2);
    }
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// ‖mean φ(h) − mean φ(b)‖_H as the quadratic form wᵀKw over the pooled
/// Gram matrix, with w = (1/Nh, …, −1/Nb, …).
pub fn mmd(h: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> f64 {
    let pooled: Vec<&Vec<f64>> = h.iter().chain(b).collect();
    let w: Vec<f64> = (0..pooled.len())
        .map(|i| if i < h.len() { 1.0 / h.len() as f64 } else { -1.0 / b.len() as f64 })
        .collect();
    let mut q = 0.0;
    for i in 0..pooled.len() {
        for j in 0..pooled.len() {
            q += w[i] * w[j] * gaussian(pooled[i], pooled[j], sigma);
        }
    }
    q.max(0.0).sqrt()
}

/// Supervised contrastive loss with cosine similarity. A(i) is the batch
/// without i; anchors with no positive are skipped and the mean is over the
/// anchors that remain.
pub fn supcon(v: &[Vec<f64>], labels: &[Label], tau: f64, eps: f64) -> f64 {
    let n = v.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let p: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if p.is_empty() {
            continue;
        }
        anchors += 1;
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (cosine(&v[i], &v[a]) / tau).exp();
            }
        }
        let mut sum = 0.0;
        for &q in &p {
            sum += (((cosine(&v[i], &v[q]) / tau).exp() + eps) / (denom + eps)).ln();
        }
        total += -sum / p.len() as f64;
    }
    total / anchors as f64
}

/// (L+, L−) over (i, j, δ) pairs with cosine similarity.
pub fn delta_terms(v: &[Vec<f64>], pos: &[(usize, usize, f64)], neg: &[(usize, usize, f64)], tau: f64, theta: f64) -> (f64, f64) {
    let mut lp = 0.0;
    for &(i, j, d) in pos {
        lp -= d * (cosine(&v[i], &v[j]) / tau).ln();
    }
    let mut ln = 0.0;
    for &(i, j, d) in neg {
        let w = d.abs() - theta;
        ln += if w > 0.0 { w } else { 0.0 } * (1.0 - cosine(&v[i], &v[j]));
    }
    (lp, ln)
}

/// Greedy MMR by exhaustive scoring of every remaining candidate at every
/// step; ties go to the lower index.
pub fn mmr(q: &[f64], docs: &[Vec<f64>], lambda: f64, k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < k.min(docs.len()) {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..docs.len() {
            if chosen.contains(&j) {
                continue;
            }
            let penalty = chosen
                .iter()
                .map(|&s| cosine(&docs[j], &docs[s]))
                .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
                .unwrap_or(0.0);
            let score = lambda * cosine(q, &docs[j]) - (1.0 - lambda) * penalty;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((j, score));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// Every index sorted by cosine to `q`, descending.
pub fn knn_order(q: &[f64], docs: &[Vec<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    idx.sort_by(|&a, &b| cosine(q, &docs[b]).partial_cmp(&cosine(q, &docs[a])).unwrap());
    idx
}

/// (precision, recall, F1) from counts, each 0 when its denominator is 0.
/// F1 = 2TP / (2TP + FP + FN).
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if tp == 0 { 0.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
    (p, r, f)
}

/// Vectors whose pairwise cosines equal `gram`, by Cholesky factorisation.
pub fn realize_gram(gram: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = gram.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = gram[i][j];
            for c in 0..j {
                s -= l[i][c] * l[j][c];
            }
            l[i][j] = if i == j {
                assert!(s > 0.0, "gram matrix is not positive definite");
                s.sqrt()
            } else {
                s / l[j][j]
            };
        }
    }
    l
}
