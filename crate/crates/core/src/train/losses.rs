//! Loss terms over unit-norm embeddings, each with its gradient with respect
//! to the embeddings. Similarities are plain dot products here; callers
//! normalise first.

use crate::corpus::Label;
use crate::embed::dot;
use crate::error::{Error, Result};

/// A (query, demonstration) pair addressed by batch position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexedPair {
    pub i: usize,
    pub j: usize,
    pub delta: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn axpy(out: &mut [f64], c: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += c * v;
    }
}

/// Median pairwise Euclidean distance over the pooled vectors. Falls back to
/// 1 when every pair coincides.
pub fn median_bandwidth(vecs: &[&[f64]]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(vecs.len() * vecs.len().saturating_sub(1) / 2);
    for a in 0..vecs.len() {
        for b in a + 1..vecs.len() {
            d.push(sq_dist(vecs[a], vecs[b]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let m = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

pub(crate) struct MmdEval {
    pub value: f64,
    /// dL/dv for source then target vectors.
    pub grad_source: Vec<Vec<f64>>,
    pub grad_target: Vec<Vec<f64>>,
}

/// Biased kernel MMD with a Gaussian kernel, as the RKHS norm or its square.
pub(crate) fn mmd_eval(source: &[&[f64]], target: &[&[f64]], sigma: f64, squared: bool, want_grad: bool) -> Result<MmdEval> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("MMD needs source and target vectors".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    let dim = source[0].len();
    if source.iter().chain(target).any(|v| v.len() != dim) {
        return Err(Error::InvalidInput("MMD vectors differ in dimension".into()));
    }
    let two_s2 = 2.0 * sigma * sigma;
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / two_s2).exp();
    let (ns, nt) = (source.len() as f64, target.len() as f64);

    let mut kss = 0.0;
    for a in source {
        for b in source {
            kss += k(a, b);
        }
    }
    let mut ktt = 0.0;
    for a in target {
        for b in target {
            ktt += k(a, b);
        }
    }
    // Summed in sorted order so that swapping the two sides is bit-exact.
    let mut cross: Vec<f64> = source.iter().flat_map(|a| target.iter().map(|b| k(a, b))).collect();
    cross.sort_by(f64::total_cmp);
    let kst: f64 = cross.iter().sum();
    let (a, b, c) = (kss / (ns * ns), ktt / (nt * nt), 2.0 * kst / (ns * nt));
    let mut m = a + b - c;
    // Below the rounding noise of the three sums the distributions are
    // indistinguishable; without this, sqrt turns 1e-16 into 1e-8.
    if m <= 16.0 * f64::EPSILON * (a + b + c) {
        m = 0.0;
    }
    let value = if squared { m.max(0.0) } else { m.max(0.0).sqrt() };

    let mut grad_source = vec![vec![0.0; dim]; source.len()];
    let mut grad_target = vec![vec![0.0; dim]; target.len()];
    let outer = if m > 0.0 {
        if squared {
            1.0
        } else {
            0.5 / value
        }
    } else {
        0.0
    };
    if want_grad && outer != 0.0 {
        let inv_s2 = 1.0 / (sigma * sigma);
        // d k(x, y) / dx = -k (x - y) / σ²
        let pull = |g: &mut [f64], x: &[f64], y: &[f64], coef: f64| {
            let c = -coef * k(x, y) * inv_s2;
            for ((gi, xi), yi) in g.iter_mut().zip(x).zip(y) {
                *gi += c * (xi - yi);
            }
        };
        for (a, x) in source.iter().enumerate() {
            for y in source {
                pull(&mut grad_source[a], x, y, outer * 2.0 / (ns * ns));
            }
            for y in target {
                pull(&mut grad_source[a], x, y, -outer * 2.0 / (ns * nt));
            }
        }
        for (b, x) in target.iter().enumerate() {
            for y in target {
                pull(&mut grad_target[b], x, y, outer * 2.0 / (nt * nt));
            }
            for y in source {
                pull(&mut grad_target[b], x, y, -outer * 2.0 / (ns * nt));
            }
        }
    }
    Ok(MmdEval {
        value,
        grad_source,
        grad_target,
    })
}

/// Supervised contrastive loss over unit vectors, with gradient.
///
/// Each anchor contrasts against every other batch member; anchors without a
/// same-label partner are skipped and the mean runs over the rest.
pub(crate) fn supcon_eval(vecs: &[&[f64]], labels: &[Label], tau: f64, eps: f64, want_grad: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = vecs.len();
    if n != labels.len() || n < 2 {
        return Err(Error::InvalidInput(format!(
            "SupCon needs at least 2 labelled vectors, got {n} vectors and {} labels",
            labels.len()
        )));
    }
    if !(tau > 0.0) || !(eps >= 0.0) {
        return Err(Error::InvalidInput("SupCon needs tau > 0 and epsilon >= 0".into()));
    }
    let dim = vecs[0].len();
    let mut grad = vec![vec![0.0; dim]; n];
    let mut total = 0.0;
    let mut anchors = 0usize;
    let mut dl_ds = vec![0.0; n];
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let logits: Vec<f64> = (0..n).map(|a| dot(vecs[i], vecs[a]) / tau).collect();
        let shift = (0..n).filter(|&a| a != i).map(|a| logits[a]).fold(f64::NEG_INFINITY, f64::max);
        // All exponentials are scaled by e^-shift; ε is scaled to match.
        let eps_s = eps * (-shift).exp();
        let u: Vec<f64> = logits.iter().map(|l| (l - shift).exp()).collect();
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| u[a]).sum::<f64>() + eps_s;
        let np = positives.len() as f64;
        let term: f64 = -positives.iter().map(|&p| ((u[p] + eps_s) / denom).ln()).sum::<f64>() / np;
        total += term;

        if want_grad {
            for a in 0..n {
                dl_ds[a] = if a == i { 0.0 } else { u[a] / (denom * tau) };
            }
            for &p in &positives {
                dl_ds[p] -= u[p] / ((u[p] + eps_s) * np * tau);
            }
            for a in 0..n {
                if a == i || dl_ds[a] == 0.0 {
                    continue;
                }
                let c = dl_ds[a];
                axpy(&mut grad[i], c, vecs[a]);
                axpy(&mut grad[a], c, vecs[i]);
            }
        }
    }
    if anchors == 0 {
        return Err(Error::InvalidInput("SupCon batch has no anchor with a same-label partner".into()));
    }
    let scale = 1.0 / anchors as f64;
    for g in &mut grad {
        for x in g.iter_mut() {
            *x *= scale;
        }
    }
    Ok((total * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DeltaTerms {
    pub positive: f64,
    pub negative: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DeltaParams {
    pub tau: f64,
    pub theta: f64,
    pub sim_floor: f64,
    pub lambda_neg: f64,
}

/// Attraction for helpful pairs, hinged repulsion for harmful ones.
/// The returned gradient is for `positive + lambda_neg * negative`.
pub(crate) fn delta_eval(
    vecs: &[&[f64]],
    positives: &[IndexedPair],
    negatives: &[IndexedPair],
    p: DeltaParams,
    want_grad: bool,
) -> Result<(DeltaTerms, Vec<Vec<f64>>)> {
    if !(p.tau > 0.0 && p.sim_floor > 0.0 && p.theta >= 0.0 && p.lambda_neg >= 0.0) {
        return Err(Error::InvalidInput("delta loss needs tau > 0, sim_floor > 0, theta >= 0".into()));
    }
    let n = vecs.len();
    let dim = vecs.first().map_or(0, |v| v.len());
    let check = |q: &IndexedPair| {
        if q.i >= n || q.j >= n {
            Err(Error::UnknownId(format!("pair ({}, {}) outside a batch of {n}", q.i, q.j)))
        } else {
            Ok(())
        }
    };
    let mut grad = vec![vec![0.0; if want_grad { dim } else { 0 }]; n];
    let mut terms = DeltaTerms::default();
    for q in positives {
        check(q)?;
        let s = dot(vecs[q.i], vecs[q.j]);
        terms.positive -= q.delta * (s.max(p.sim_floor) / p.tau).ln();
        if want_grad && s > p.sim_floor {
            let c = -q.delta / s;
            axpy(&mut grad[q.i], c, vecs[q.j]);
            axpy(&mut grad[q.j], c, vecs[q.i]);
        }
    }
    for q in negatives {
        check(q)?;
        let s = dot(vecs[q.i], vecs[q.j]);
        let w = (q.delta.abs() - p.theta).max(0.0);
        terms.negative += w * (1.0 - s);
        if want_grad && w > 0.0 {
            let c = -p.lambda_neg * w;
            axpy(&mut grad[q.i], c, vecs[q.j]);
            axpy(&mut grad[q.j], c, vecs[q.i]);
        }
    }
    Ok((terms, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn median_of_known_distances() {
        let pts = [vec![0.0, 0.0], vec![3.0, 4.0], vec![6.0, 8.0]];
        // distances 5, 10, 5
        assert_eq!(median_bandwidth(&refs(&pts)), 5.0);
        let pts = [vec![0.0], vec![1.0], vec![3.0], vec![7.0]];
        // 1 3 7 2 6 4 → sorted 1 2 3 4 6 7
        assert_eq!(median_bandwidth(&refs(&pts)), 3.5);
        assert_eq!(median_bandwidth(&refs(&[vec![1.0], vec![1.0]])), 1.0);
    }

    #[test]
    fn squared_mode_is_square() {
        let s = [vec![1.0, 0.0], vec![0.6, 0.8]];
        let t = [vec![0.0, 1.0]];
        let plain = mmd_eval(&refs(&s), &refs(&t), 0.7, false, false).unwrap().value;
        let sq = mmd_eval(&refs(&s), &refs(&t), 0.7, true, false).unwrap().value;
        assert!((plain * plain - sq).abs() < 1e-14);
    }

    #[test]
    fn bad_inputs() {
        let v = [vec![1.0, 0.0]];
        assert!(mmd_eval(&refs(&v), &[], 1.0, false, false).is_err());
        assert!(mmd_eval(&refs(&v), &refs(&v), 0.0, false, false).is_err());
        assert!(supcon_eval(&refs(&v), &[Label::Normal], 0.1, 0.0, false).is_err());
        let bad = IndexedPair { i: 0, j: 3, delta: 0.2 };
        let p = DeltaParams {
            tau: 0.1,
            theta: 0.1,
            sim_floor: 1e-4,
            lambda_neg: 1.0,
        };
        assert!(matches!(delta_eval(&refs(&v), &[bad], &[], p, false), Err(Error::UnknownId(_))));
    }
}
