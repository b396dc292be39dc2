//! Exact nearest-neighbour and maximal-marginal-relevance selection.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::embed::{dot, norm, EmbeddingStore, EmbeddingVector};
use crate::error::{Error, Result};

/// Immutable candidate pool scanned exhaustively.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl RetrievalIndex {
    pub fn new(entries: Vec<(String, EmbeddingVector)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut norms = Vec::with_capacity(entries.len());
        let dim = entries.first().map(|(_, v)| v.dim());
        for (id, v) in entries {
            if Some(v.dim()) != dim {
                return Err(Error::InvalidInput(format!("vector {id:?} has inconsistent dimension")));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::InvalidInput(format!("duplicate id {id:?} in index")));
            }
            let n = v.norm();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!("vector {id:?} has norm {n}")));
            }
            ids.push(id);
            norms.push(n);
            vectors.push(v.into_inner());
        }
        Ok(Self { ids, vectors, norms })
    }

    pub fn from_store(store: &EmbeddingStore) -> Result<Self> {
        Self::new(store.iter().map(|(id, v)| (id.to_string(), v.clone())).collect())
    }

    /// Index restricted to the given ids, in store order.
    pub fn from_store_subset(store: &EmbeddingStore, keep: &HashSet<&str>) -> Result<Self> {
        Self::new(
            store
                .iter()
                .filter(|(id, _)| keep.contains(id))
                .map(|(id, v)| (id.to_string(), v.clone()))
                .collect(),
        )
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

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn vector(&self, pos: usize) -> &[f64] {
        &self.vectors[pos]
    }

    fn sim_to(&self, query: &[f64], query_norm: f64, pos: usize) -> f64 {
        (dot(query, &self.vectors[pos]) / (query_norm * self.norms[pos])).clamp(-1.0, 1.0)
    }

    fn sim_between(&self, a: usize, b: usize) -> f64 {
        (dot(&self.vectors[a], &self.vectors[b]) / (self.norms[a] * self.norms[b])).clamp(-1.0, 1.0)
    }

    fn check_query(&self, query: &EmbeddingVector) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::InvalidInput("retrieval index is empty".into()));
        }
        if query.dim() != self.vectors[0].len() {
            return Err(Error::InvalidInput(format!(
                "query has dim {} but index has {}",
                query.dim(),
                self.vectors[0].len()
            )));
        }
        let n = norm(query.values());
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate("query vector has zero norm".into()));
        }
        Ok(n)
    }
}

fn default_lambda() -> f64 {
    0.7
}

/// Relevance/diversity trade-off and selection budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmrParams {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub k: usize,
}

impl MmrParams {
    pub fn new(lambda: f64, k: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidInput(format!("mmr lambda {lambda} outside [0, 1]")));
        }
        if k == 0 {
            return Err(Error::InvalidInput("mmr budget k must be at least 1".into()));
        }
        Ok(Self { lambda, k })
    }
}

/// The `k` most cosine-similar entries, descending; ties keep index order.
pub fn top_k_similar(query: &EmbeddingVector, index: &RetrievalIndex, k: usize) -> Result<Vec<(String, f64)>> {
    top_k_similar_excluding(query, index, k, &HashSet::new())
}

pub fn top_k_similar_excluding(
    query: &EmbeddingVector,
    index: &RetrievalIndex,
    k: usize,
    exclude: &HashSet<&str>,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let qn = index.check_query(query)?;
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .filter(|&i| !exclude.contains(index.ids[i].as_str()))
        .map(|i| (i, index.sim_to(query.values(), qn, i)))
        .collect();
    // Stable sort keeps insertion order among equal similarities.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    Ok(scored.into_iter().map(|(i, s)| (index.ids[i].clone(), s)).collect())
}

/// Greedy MMR. The diversity penalty is zero while nothing is selected.
pub fn mmr_select(query: &EmbeddingVector, index: &RetrievalIndex, params: MmrParams) -> Result<Vec<String>> {
    mmr_select_excluding(query, index, params, &HashSet::new())
}

pub fn mmr_select_excluding(
    query: &EmbeddingVector,
    index: &RetrievalIndex,
    params: MmrParams,
    exclude: &HashSet<&str>,
) -> Result<Vec<String>> {
    let params = MmrParams::new(params.lambda, params.k)?;
    let qn = index.check_query(query)?;
    let mut pool: Vec<usize> = (0..index.len())
        .filter(|&i| !exclude.contains(index.ids[i].as_str()))
        .collect();
    let relevance: Vec<f64> = pool.iter().map(|&i| index.sim_to(query.values(), qn, i)).collect();
    let mut relevance_of = vec![0.0; index.len()];
    for (&i, &r) in pool.iter().zip(&relevance) {
        relevance_of[i] = r;
    }
    // Running max similarity of each candidate to the selected set.
    let mut max_sim: Vec<Option<f64>> = vec![None; index.len()];
    let lambda = params.lambda;
    let mut selected = Vec::with_capacity(params.k.min(pool.len()));

    while selected.len() < params.k && !pool.is_empty() {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &i) in pool.iter().enumerate() {
            let penalty = max_sim[i].unwrap_or(0.0);
            let score = lambda * relevance_of[i] - (1.0 - lambda) * penalty;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((slot, score));
            }
        }
        let (slot, _) = best.expect("pool is non-empty");
        let picked = pool.remove(slot);
        selected.push(index.ids[picked].clone());
        for &i in &pool {
            let s = index.sim_between(i, picked);
            max_sim[i] = Some(max_sim[i].map_or(s, |m| m.max(s)));
        }
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::embed::cosine_similarity;

    fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (RetrievalIndex, Vec<EmbeddingVector>) {
        let vecs: Vec<EmbeddingVector> = (0..n)
            .map(|_| EmbeddingVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let index = RetrievalIndex::new(
            vecs.iter()
                .enumerate()
                .map(|(i, v)| (format!("d{i:03}"), v.clone()))
                .collect(),
        )
        .unwrap();
        (index, vecs)
    }

    /// Literal greedy MMR that recomputes every term from scratch at each step.
    fn naive_mmr(q: &EmbeddingVector, vecs: &[EmbeddingVector], lambda: f64, k: usize) -> Vec<usize> {
        let mut selected: Vec<usize> = Vec::new();
        while selected.len() < k.min(vecs.len()) {
            let mut best = None;
            let mut best_score = f64::NEG_INFINITY;
            for j in 0..vecs.len() {
                if selected.contains(&j) {
                    continue;
                }
                let rel = cosine_similarity(q, &vecs[j]).unwrap();
                let div = selected
                    .iter()
                    .map(|&s| cosine_similarity(&vecs[j], &vecs[s]).unwrap())
                    .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
                    .unwrap_or(0.0);
                let score = lambda * rel - (1.0 - lambda) * div;
                if score > best_score {
                    best_score = score;
                    best = Some(j);
                }
            }
            selected.push(best.unwrap());
        }
        selected
    }

    #[test]
    fn query_equal_to_stored_vector_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (index, vecs) = random_index(&mut rng, 10, 6);
        let hits = top_k_similar(&vecs[4], &index, 3).unwrap();
        assert_eq!(hits[0].0, "d004");
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
        let all = top_k_similar(&vecs[4], &index, 50).unwrap();
        assert_eq!(all.len(), 10);
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn empty_index_is_error() {
        let index = RetrievalIndex::new(vec![]).unwrap();
        let q = EmbeddingVector::new(vec![1.0, 0.0]);
        assert!(top_k_similar(&q, &index, 1).is_err());
        assert!(mmr_select(&q, &index, MmrParams::new(0.5, 1).unwrap()).is_err());
    }

    #[test]
    fn ties_keep_insertion_order() {
        let v = EmbeddingVector::new(vec![1.0, 0.0]);
        let index = RetrievalIndex::new(vec![
            ("b".into(), v.clone()),
            ("a".into(), v.clone()),
            ("c".into(), v.clone()),
        ])
        .unwrap();
        let ids: Vec<_> = top_k_similar(&v, &index, 3).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(ids, vec!["b", "a", "c"]);
    }

    /// Rows of the Cholesky factor of a Gram matrix realize its vectors.
    fn vectors_from_gram(gram: &[Vec<f64>]) -> Vec<EmbeddingVector> {
        let n = gram.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    l[i][j] = (gram[i][i] - s).sqrt();
                } else {
                    l[i][j] = (gram[i][j] - s) / l[j][j];
                }
            }
        }
        l.into_iter().map(EmbeddingVector::new).collect()
    }

    #[test]
    fn hand_derived_three_candidate_case() {
        let gram = vec![
            vec![1.0, 0.9, 0.85, 0.2],
            vec![0.9, 1.0, 0.95, 0.1],
            vec![0.85, 0.95, 1.0, 0.1],
            vec![0.2, 0.1, 0.1, 1.0],
        ];
        let v = vectors_from_gram(&gram);
        let index = RetrievalIndex::new(vec![
            ("d1".into(), v[1].clone()),
            ("d2".into(), v[2].clone()),
            ("d3".into(), v[3].clone()),
        ])
        .unwrap();
        let picked = mmr_select(&v[0], &index, MmrParams::new(0.5, 2).unwrap()).unwrap();
        assert_eq!(picked, vec!["d1", "d3"]);
        let oracle = naive_mmr(&v[0], &v[1..], 0.5, 2);
        assert_eq!(oracle, vec![0, 2]);
    }

    #[test]
    fn identical_candidates_with_zero_lambda() {
        let v = EmbeddingVector::new(vec![0.6, 0.8]);
        let index = RetrievalIndex::new((0..4).map(|i| (format!("x{i}"), v.clone())).collect()).unwrap();
        let q = EmbeddingVector::new(vec![1.0, 0.0]);
        let picked = mmr_select(&q, &index, MmrParams::new(0.0, 4).unwrap()).unwrap();
        assert_eq!(picked, vec!["x0", "x1", "x2", "x3"]);
    }

    #[test]
    fn exclusion_removes_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (index, vecs) = random_index(&mut rng, 8, 4);
        let exclude: HashSet<&str> = ["d002"].into_iter().collect();
        let picked = mmr_select_excluding(&vecs[2], &index, MmrParams::new(0.7, 8).unwrap(), &exclude).unwrap();
        assert_eq!(picked.len(), 7);
        assert!(!picked.iter().any(|id| id == "d002"));
    }

    #[test]
    fn invalid_params() {
        assert!(MmrParams::new(1.5, 3).is_err());
        assert!(MmrParams::new(0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn top_k_matches_exhaustive_sort(seed in 0u64..10_000, n in 1usize..=64, k in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (index, vecs) = random_index(&mut rng, n, 5);
            let q = EmbeddingVector::new((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
            let mut oracle: Vec<(usize, f64)> = vecs
                .iter()
                .enumerate()
                .map(|(i, v)| (i, cosine_similarity(&q, v).unwrap()))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(k);
            let got = top_k_similar(&q, &index, k).unwrap();
            prop_assert_eq!(got.len(), oracle.len());
            for ((id, s), (i, o)) in got.iter().zip(&oracle) {
                prop_assert_eq!(id, &format!("d{i:03}"));
                prop_assert!((s - o).abs() < 1e-12);
            }
        }

        #[test]
        fn mmr_invariants(seed in 0u64..10_000, n in 1usize..30, k in 1usize..12, lambda in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (index, vecs) = random_index(&mut rng, n, 6);
            let q = EmbeddingVector::new((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
            let params = MmrParams::new(lambda, k).unwrap();
            let picked = mmr_select(&q, &index, params).unwrap();
            prop_assert_eq!(picked.len(), k.min(n));
            let unique: HashSet<_> = picked.iter().collect();
            prop_assert_eq!(unique.len(), picked.len());

            let oracle: Vec<String> = naive_mmr(&q, &vecs, lambda, k).into_iter().map(|i| format!("d{i:03}")).collect();
            prop_assert_eq!(&picked, &oracle);

            for m in 1..=k {
                let prefix = mmr_select(&q, &index, MmrParams::new(lambda, m).unwrap()).unwrap();
                prop_assert_eq!(&prefix[..], &picked[..prefix.len()]);
            }

            let relevance = mmr_select(&q, &index, MmrParams::new(1.0, k).unwrap()).unwrap();
            let knn: Vec<String> = top_k_similar(&q, &index, k).unwrap().into_iter().map(|x| x.0).collect();
            prop_assert_eq!(relevance, knn);
        }
    }
}
