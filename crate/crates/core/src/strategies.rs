//! Acquisition strategies. All of them consume only probabilities and features,
//! so the same code serves proxy-driven and full-model-driven selection.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureMatrix, PoolState};
use crate::nn;
use crate::probs::Probabilities;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Random,
    Margin,
    Confidence,
    Badge,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRequest {
    pub k: usize,
    pub seed: u64,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionBatch {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub strategy: Strategy,
    /// Set when k-means++ ran out of positive-mass candidates and drew the rest uniformly.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub uniform_fallback: bool,
}

impl SelectionBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_k(pool: &PoolState, k: usize) -> Result<()> {
    if k > pool.unlabeled().len() {
        return Err(Error::Selection(format!(
            "requested {k} samples but only {} are unlabeled",
            pool.unlabeled().len()
        )));
    }
    Ok(())
}

fn check_rows(pool: &PoolState, rows: usize, what: &str) -> Result<()> {
    if rows != pool.n() {
        return Err(Error::DimensionMismatch {
            expected: pool.n(),
            found: rows,
        })
        .map_err(|e| Error::Selection(format!("{what}: {e}")));
    }
    Ok(())
}

pub fn select_random(pool: &PoolState, k: usize, seed: u64) -> Result<SelectionBatch> {
    check_k(pool, k)?;
    let u = pool.unlabeled_indices();
    let mut r = rng::derived(seed, &[rng::tag::SELECT]);
    let picks = rand::seq::index::sample(&mut r, u.len(), k);
    let indices: Vec<usize> = picks.into_iter().map(|j| u[j]).collect();
    Ok(SelectionBatch {
        scores: vec![0.0; indices.len()],
        indices,
        strategy: Strategy::Random,
        uniform_fallback: false,
    })
}

/// The `k` unlabeled indices with the smallest scores, ties to the lower index.
fn smallest_k(pool: &PoolState, k: usize, score: impl Fn(usize) -> f64, strategy: Strategy) -> SelectionBatch {
    let mut scored: Vec<(f64, usize)> = pool.unlabeled().iter().map(|&i| (score(i), i)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    SelectionBatch {
        indices: scored.iter().map(|s| s.1).collect(),
        scores: scored.iter().map(|s| s.0).collect(),
        strategy,
        uniform_fallback: false,
    }
}

/// Ascending top-1 minus top-2 probability.
pub fn select_margin(probs: &Probabilities, pool: &PoolState, k: usize) -> Result<SelectionBatch> {
    check_k(pool, k)?;
    check_rows(pool, probs.n(), "probabilities")?;
    Ok(smallest_k(pool, k, |i| probs.margin(i), Strategy::Margin))
}

/// Ascending maximum probability.
pub fn select_confidence(probs: &Probabilities, pool: &PoolState, k: usize) -> Result<SelectionBatch> {
    check_k(pool, k)?;
    check_rows(pool, probs.n(), "probabilities")?;
    Ok(smallest_k(pool, k, |i| probs.confidence(i), Strategy::Confidence))
}

/// Dense `n × m` embedding matrix in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub n: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn scaled(&self, factor: f64) -> Embeddings {
        Embeddings {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Last-layer gradient embedding `(p_i - onehot(argmax p_i)) ⊗ f_i`, row-major in
/// the class index.
pub fn badge_grad_embed(probs: &Probabilities, feats: &FeatureMatrix) -> Result<Embeddings> {
    if probs.n() != feats.n() {
        return Err(Error::DimensionMismatch {
            expected: probs.n(),
            found: feats.n(),
        });
    }
    let c = probs.classes();
    let d = feats.d();
    let mut data = Vec::with_capacity(probs.n() * c * d);
    for i in 0..probs.n() {
        let p = probs.row(i);
        let yhat = nn::argmax(p);
        let f = feats.row(i);
        for (k, &pk) in p.iter().enumerate() {
            let g = pk - if k == yhat { 1.0 } else { 0.0 };
            data.extend(f.iter().map(|&v| g * f64::from(v)));
        }
    }
    Ok(Embeddings {
        n: probs.n(),
        m: c * d,
        data,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Draws an index with probability proportional to `weights[j]`; never returns
/// an entry of zero weight.
fn draw_weighted(weights: &[f64], total: f64, r: &mut rng::Rng) -> usize {
    let target = r.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (j, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = Some(j);
            if acc > target {
                return j;
            }
        }
    }
    last_positive.expect("positive total weight")
}

/// k-means++ seeding over the unlabeled rows of `emb`.
///
/// Rows whose embedding is exactly zero (confident predictions, no gradient) are
/// held back until every nonzero candidate has been taken. Among the rest, the
/// first center is uniform and each following center is drawn with probability
/// proportional to the squared distance to its nearest chosen center. When no
/// candidate has positive mass left the remaining picks are uniform and the
/// batch is flagged.
pub fn kmeanspp_select(emb: &Embeddings, pool: &PoolState, k: usize, seed: u64) -> Result<SelectionBatch> {
    check_k(pool, k)?;
    check_rows(pool, emb.n, "embeddings")?;
    let mut r = rng::derived(seed, &[rng::tag::SELECT]);
    let u = pool.unlabeled_indices();

    let (mut active, mut held): (Vec<usize>, Vec<usize>) =
        u.iter().partition(|&&i| emb.row(i).iter().any(|&v| v != 0.0));
    let mut nearest = vec![f64::INFINITY; emb.n];
    let mut chosen = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    let mut fallback = false;

    while chosen.len() < k {
        if active.is_empty() {
            active = std::mem::take(&mut held);
        }
        let pick_pos = if chosen.is_empty() {
            r.random_range(0..active.len())
        } else {
            let weights: Vec<f64> = active.iter().map(|&i| nearest[i]).collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                draw_weighted(&weights, total, &mut r)
            } else {
                fallback = true;
                r.random_range(0..active.len())
            }
        };
        let pick = active.remove(pick_pos);
        scores.push(if nearest[pick].is_finite() { nearest[pick] } else { 0.0 });
        chosen.push(pick);
        let center = emb.row(pick);
        for &i in active.iter().chain(held.iter()) {
            let dd = sq_dist(emb.row(i), center);
            if dd < nearest[i] {
                nearest[i] = dd;
            }
        }
    }
    Ok(SelectionBatch {
        indices: chosen,
        scores,
        strategy: Strategy::Badge,
        uniform_fallback: fallback,
    })
}

/// Dispatches a request. `probs` and `feats` are required by every strategy but
/// `Random`.
pub fn select(
    req: &SelectionRequest,
    pool: &PoolState,
    probs: Option<&Probabilities>,
    feats: Option<&FeatureMatrix>,
) -> Result<SelectionBatch> {
    let need_probs = || probs.ok_or_else(|| Error::Selection(format!("{} needs probabilities", req.strategy)));
    match req.strategy {
        Strategy::Random => select_random(pool, req.k, req.seed),
        Strategy::Margin => select_margin(need_probs()?, pool, req.k),
        Strategy::Confidence => select_confidence(need_probs()?, pool, req.k),
        Strategy::Badge => {
            let feats = feats.ok_or_else(|| Error::Selection("Badge needs features".into()))?;
            let emb = badge_grad_embed(need_probs()?, feats)?;
            kmeanspp_select(&emb, pool, req.k, req.seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{acquire_labels, init_pools};
    use proptest::prelude::*;

    /// Indices `0..n` unlabeled, plus a labeled sentinel at index `n`.
    fn all_unlabeled(n: usize) -> PoolState {
        PoolState::from_labeled(n + 1, &[(n, 0)]).unwrap()
    }

    fn example_probs() -> Probabilities {
        Probabilities::from_rows(&[
            vec![0.8, 0.1, 0.1],
            vec![0.4, 0.35, 0.25],
            vec![0.5, 0.3, 0.2],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn margin_example() {
        let pool = all_unlabeled(3);
        let b = select_margin(&example_probs(), &pool, 2).unwrap();
        assert_eq!(b.indices, vec![1, 2]);
        assert!((b.scores[0] - 0.05).abs() < 1e-12);
        assert!((b.scores[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn confidence_example() {
        let pool = all_unlabeled(3);
        let b = select_confidence(&example_probs(), &pool, 1).unwrap();
        assert_eq!(b.indices, vec![1]);
        assert!(matches!(
            select_confidence(&example_probs(), &pool, 4),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn uniform_rows_tie_break_to_lowest_index() {
        let pool = all_unlabeled(6);
        let probs = Probabilities::from_rows(&vec![vec![0.25; 4]; 7]).unwrap();
        assert_eq!(select_margin(&probs, &pool, 3).unwrap().indices, vec![0, 1, 2]);
        assert_eq!(select_confidence(&probs, &pool, 2).unwrap().indices, vec![0, 1]);
    }

    #[test]
    fn one_hot_rows_come_last_for_confidence() {
        let pool = all_unlabeled(4);
        let probs = Probabilities::from_rows(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.6, 0.4],
            vec![0.5, 0.5],
        ])
        .unwrap();
        let b = select_confidence(&probs, &pool, 4).unwrap();
        assert_eq!(b.indices, vec![3, 1, 0, 2]);
    }

    #[test]
    fn random_selection() {
        let pool = all_unlabeled(10);
        let mut all = select_random(&pool, 10, 3).unwrap().indices;
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(select_random(&pool, 4, 9).unwrap(), select_random(&pool, 4, 9).unwrap());
        assert!(select_random(&pool, 0, 1).unwrap().is_empty());
        assert!(select_random(&pool, 11, 1).is_err());
    }

    #[test]
    fn grad_embedding_examples() {
        let f = FeatureMatrix::new(1, 2, vec![2.0, 3.0]).unwrap();
        let p = Probabilities::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(badge_grad_embed(&p, &f).unwrap().data, vec![0.0; 4]);

        let f = FeatureMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let p = Probabilities::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(badge_grad_embed(&p, &f).unwrap().data, vec![-0.5, 0.0, 0.5, 0.0]);

        let p2 = Probabilities::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        assert!(matches!(badge_grad_embed(&p2, &f), Err(Error::DimensionMismatch { .. })));
    }

    fn far_instance() -> Embeddings {
        let mut data = vec![0.0; 20];
        data.extend([100.0, 0.0, 0.0, 100.0]);
        Embeddings { n: 12, m: 2, data }
    }

    #[test]
    fn kmeanspp_far_points() {
        let pool = all_unlabeled(12);
        let emb = far_instance();
        let mut padded = emb.data.clone();
        padded.extend([0.0, 0.0]);
        let emb = Embeddings { n: 13, m: 2, data: padded };
        for seed in 0..50 {
            let b = kmeanspp_select(&emb, &pool, 3, seed).unwrap();
            assert!(b.indices.contains(&10) && b.indices.contains(&11), "{:?}", b.indices);
            assert_eq!(b, kmeanspp_select(&emb, &pool, 3, seed).unwrap());
        }
        let one = kmeanspp_select(&emb, &pool, 1, 5).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn kmeanspp_all_zero_falls_back() {
        let pool = all_unlabeled(5);
        let emb = Embeddings { n: 6, m: 3, data: vec![0.0; 18] };
        let b = kmeanspp_select(&emb, &pool, 3, 1).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.uniform_fallback);
        let mut s = b.indices.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|&i| i < 5));
    }

    #[test]
    fn kmeanspp_skips_duplicates_of_centers() {
        // three copies of a, one b: after choosing a copy of a and b, the only positive
        // mass is gone, so the third pick falls back
        let pool = all_unlabeled(4);
        let data = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 9.0, 9.0];
        let emb = Embeddings { n: 5, m: 2, data };
        for seed in 0..30 {
            let b = kmeanspp_select(&emb, &pool, 2, seed).unwrap();
            assert!(b.indices.contains(&3), "{:?}", b.indices);
            assert!(!b.uniform_fallback);
        }
    }

    #[test]
    fn selection_respects_labeled_set() {
        let pool = init_pools(8, 3, 2, |_| 0).unwrap();
        let pool = acquire_labels(&pool, &[pool.unlabeled_indices()[0]], |_| 1).unwrap();
        let probs = Probabilities::from_rows(&vec![vec![0.5, 0.5]; 8]).unwrap();
        let b = select_margin(&probs, &pool, 4).unwrap();
        assert!(b.indices.iter().all(|i| pool.is_unlabeled(*i)));
    }

    proptest! {
        #[test]
        fn grad_embedding_norm_identity(
            rows in proptest::collection::vec((proptest::collection::vec(0.01f64..1.0, 3), proptest::collection::vec(-2.0f32..2.0, 4)), 1..10)
        ) {
            let probs: Vec<Vec<f64>> = rows.iter().map(|(p, _)| {
                let s: f64 = p.iter().sum();
                p.iter().map(|v| v / s).collect()
            }).collect();
            let feats: Vec<Vec<f32>> = rows.iter().map(|(_, f)| f.clone()).collect();
            let probs = Probabilities::from_rows(&probs).unwrap();
            let feats = FeatureMatrix::from_rows(&feats).unwrap();
            let emb = badge_grad_embed(&probs, &feats).unwrap();
            for i in 0..emb.n {
                let g: f64 = emb.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                let yhat = probs.predicted(i);
                let pn: f64 = probs.row(i).iter().enumerate()
                    .map(|(k, &p)| { let v = p - if k == yhat { 1.0 } else { 0.0 }; v * v })
                    .sum::<f64>().sqrt();
                let fnorm: f64 = feats.row(i).iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
                prop_assert!((g - pn * fnorm).abs() <= 1e-9 * (1.0 + g));
            }
        }

        #[test]
        fn kmeanspp_scale_invariant(seed in any::<u64>(), n in 4usize..30, exp in -3i32..4) {
            let mut r = rng::seeded(seed);
            let data: Vec<f64> = (0..n * 3).map(|_| r.random_range(-1.0..1.0)).collect();
            let emb = Embeddings { n, m: 3, data };
            let pool = init_pools(n, 1, seed, |_| 0).unwrap();
            let k = (n - 1).min(5);
            let a = kmeanspp_select(&emb, &pool, k, seed).unwrap();
            let b = kmeanspp_select(&emb.scaled(2f64.powi(exp)), &pool, k, seed).unwrap();
            prop_assert_eq!(a.indices, b.indices);
        }

        #[test]
        fn batches_are_distinct_and_unlabeled(seed in any::<u64>(), n in 3usize..40) {
            let mut r = rng::seeded(seed);
            let pool = init_pools(n, 1 + (seed as usize % (n - 1)), seed, |_| 0).unwrap();
            let probs: Vec<Vec<f64>> = (0..n).map(|_| {
                let v: Vec<f64> = (0..3).map(|_| r.random_range(0.0..1.0)).collect();
                let s: f64 = v.iter().sum::<f64>() + 1e-12;
                v.into_iter().map(|x| x / s).collect()
            }).collect();
            let probs = Probabilities::from_rows(&probs).unwrap();
            let feats = FeatureMatrix::new(n, 2, (0..2 * n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap();
            let k = pool.unlabeled().len();
            for strategy in [super::Strategy::Random, super::Strategy::Margin, super::Strategy::Confidence, super::Strategy::Badge] {
                let req = SelectionRequest { k, seed, strategy };
                let b = select(&req, &pool, Some(&probs), Some(&feats)).unwrap();
                let mut s = b.indices.clone();
                s.sort_unstable();
                s.dedup();
                prop_assert_eq!(s.len(), k);
                prop_assert!(b.indices.iter().all(|i| pool.is_unlabeled(*i)));
            }
        }
    }
}
