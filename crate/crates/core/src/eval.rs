//! All-ranking evaluation: every item a user has not interacted with in
//! training is scored, ties are broken by ascending item index, and
//! Recall@K / NDCG@K are averaged over users with at least one positive.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::dataset::{Axis, DegreeBucket, InteractionDataset, Split};
use crate::error::{contract, shape_err, Result};
use crate::numerics::par;
use crate::numerics::tensor::dot;
use crate::numerics::Tensor;

/// Top-ranked items and held-out positives per user.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub top: Vec<Vec<usize>>,
    pub positives: Vec<Vec<usize>>,
}

fn rank_user(u: &[f64], item: &Tensor, excluded: &[usize], k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = (0..item.rows())
        .filter(|i| excluded.binary_search(i).is_err())
        // `+ 0.0` folds -0.0 into +0.0 so equal scores tie under total_cmp
        .map(|i| (dot(u, item.row(i)) + 0.0, i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if cand.len() > k {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// The `max_k` best items per user by `⟨e_u, e_i⟩`, skipping each user's
/// `exclude` list (sorted ascending).
pub fn rank_all(user: &Tensor, item: &Tensor, exclude: &[Vec<usize>], max_k: usize) -> Result<Vec<Vec<usize>>> {
    rank_all_with(user, item, exclude, max_k, false)
}

/// [`rank_all`] with an explicit choice of the sequential path.
pub fn rank_all_with(user: &Tensor, item: &Tensor, exclude: &[Vec<usize>], max_k: usize, sequential: bool) -> Result<Vec<Vec<usize>>> {
    if user.cols() != item.cols() {
        return shape_err("rank_all", format!("user width {} vs item width {}", user.cols(), item.cols()));
    }
    if exclude.len() != user.rows() {
        return shape_err("rank_all", "one exclusion list per user expected");
    }
    let f = |u: usize| rank_user(user.row(u), item, &exclude[u], max_k);
    Ok(if sequential {
        (0..user.rows()).map(f).collect()
    } else {
        par::map_indices(user.rows(), f)
    })
}

/// Recall and NDCG at `k` for one user; `None` without positives.
pub fn user_metrics(top: &[usize], positives: &[usize], k: usize) -> Option<(f64, f64)> {
    if positives.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (rank, item) in top.iter().take(k).enumerate() {
        if positives.contains(item) {
            hits += 1;
            dcg += 1.0 / ((rank + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(positives.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Some((hits as f64 / positives.len() as f64, dcg / idcg))
}

fn averaged(r: &RankingResult, k: usize, pick: impl Fn((f64, f64)) -> f64) -> Result<Option<f64>> {
    if k == 0 {
        return contract("K must be at least 1");
    }
    let vals: Vec<f64> = r
        .top
        .iter()
        .zip(&r.positives)
        .filter_map(|(t, p)| user_metrics(t, p, k).map(&pick))
        .collect();
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

/// Mean `|top-K ∩ P| / |P|` over users with positives.
pub fn recall_at_k(r: &RankingResult, k: usize) -> Result<Option<f64>> {
    averaged(r, k, |m| m.0)
}

/// Mean binary-relevance NDCG@K (log2 discount, ideal over `min(K, |P|)`).
pub fn ndcg_at_k(r: &RankingResult, k: usize) -> Result<Option<f64>> {
    averaged(r, k, |m| m.1)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    /// Users with at least one positive in the evaluated split.
    pub users: usize,
    /// `recall@K` and `ndcg@K` for each requested K.
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> f64 {
        self.metrics.get(name).copied().unwrap_or(0.0)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.get(&format!("recall@{k}"))
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.get(&format!("ndcg@{k}"))
    }
}

pub fn report(r: &RankingResult, ks: &[usize]) -> Result<MetricReport> {
    let mut metrics = BTreeMap::new();
    for &k in ks {
        metrics.insert(format!("recall@{k}"), recall_at_k(r, k)?.unwrap_or(0.0));
        metrics.insert(format!("ndcg@{k}"), ndcg_at_k(r, k)?.unwrap_or(0.0));
    }
    Ok(MetricReport {
        users: r.positives.iter().filter(|p| !p.is_empty()).count(),
        metrics,
    })
}

/// Ranks every user against all non-train items and scores `split`.
pub fn all_ranking_evaluate(user: &Tensor, item: &Tensor, ds: &InteractionDataset, split: Split, ks: &[usize]) -> Result<(MetricReport, RankingResult)> {
    if user.rows() != ds.n_users() || item.rows() != ds.n_items() {
        return shape_err(
            "all_ranking_evaluate",
            format!(
                "embeddings for {} users / {} items, dataset has {} / {}",
                user.rows(),
                item.rows(),
                ds.n_users(),
                ds.n_items()
            ),
        );
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut exclude = ds.positives(Split::Train);
    exclude.iter_mut().for_each(|e| e.sort_unstable());
    let top = rank_all(user, item, &exclude, max_k)?;
    debug_assert!(top
        .iter()
        .zip(&exclude)
        .all(|(t, e)| t.iter().all(|i| e.binary_search(i).is_err())));
    let result = RankingResult {
        top,
        positives: ds.positives(split),
    };
    Ok((report(&result, ks)?, result))
}

/// Metrics for one degree bucket; `None` when no user in it has positives.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketReport {
    pub label: String,
    pub ids: usize,
    pub evaluated: usize,
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
}

/// Per-bucket Recall@K / NDCG@K. User buckets restrict the average to their
/// users; item buckets restrict every user's positives to the bucket's items.
pub fn sparsity_group_report(r: &RankingResult, buckets: &[DegreeBucket], axis: Axis, k: usize) -> Result<Vec<BucketReport>> {
    buckets
        .iter()
        .map(|b| {
            let sub = match axis {
                Axis::User => RankingResult {
                    top: b.ids.iter().map(|&u| r.top[u].clone()).collect(),
                    positives: b.ids.iter().map(|&u| r.positives[u].clone()).collect(),
                },
                Axis::Item => RankingResult {
                    top: r.top.clone(),
                    positives: r
                        .positives
                        .iter()
                        .map(|p| p.iter().copied().filter(|i| b.ids.binary_search(i).is_ok()).collect())
                        .collect(),
                },
            };
            Ok(BucketReport {
                label: b.label(),
                ids: b.ids.len(),
                evaluated: sub.positives.iter().filter(|p| !p.is_empty()).count(),
                recall: recall_at_k(&sub, k)?,
                ndcg: ndcg_at_k(&sub, k)?,
            })
        })
        .collect()
}

/// Paired t-test p-value between aligned per-user (or per-seed) metrics.
pub fn paired_significance(a: &[f64], b: &[f64]) -> Result<f64> {
    crate::stats::paired_t_test(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(top: Vec<Vec<usize>>, pos: Vec<Vec<usize>>) -> RankingResult {
        RankingResult { top, positives: pos }
    }

    #[test]
    fn recall_examples() {
        let r = result(vec![vec![1, 2, 3]], vec![vec![1, 3]]);
        assert_eq!(recall_at_k(&r, 3).unwrap(), Some(1.0));
        let r = result(vec![vec![4, 5]], vec![vec![1, 3]]);
        assert_eq!(recall_at_k(&r, 2).unwrap(), Some(0.0));
        let r = result(vec![vec![1, 5]], vec![vec![1, 3]]);
        assert_eq!(recall_at_k(&r, 2).unwrap(), Some(0.5));
        assert!(recall_at_k(&r, 0).is_err());
    }

    #[test]
    fn ndcg_examples() {
        let r = result(vec![vec![7, 1]], vec![vec![7]]);
        assert_eq!(ndcg_at_k(&r, 2).unwrap(), Some(1.0));
        let r = result(vec![vec![1, 7]], vec![vec![7]]);
        assert!((ndcg_at_k(&r, 2).unwrap().unwrap() - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&r, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn ties_break_by_index_and_exclusions_hold() {
        let user = Tensor::ones(1, 1);
        let item = Tensor::from_vec(4, 1, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let top = rank_all(&user, &item, &[vec![1]], 3).unwrap();
        assert_eq!(top, vec![vec![2, 0, 3]]);
    }

    #[test]
    fn signed_zero_scores_tie() {
        let user = Tensor::from_vec(1, 1, vec![-1.0]).unwrap();
        let item = Tensor::from_vec(2, 1, vec![0.0, -0.0]).unwrap();
        // scores are -0.0 and +0.0; index order decides
        assert_eq!(rank_all(&user, &item, &[vec![]], 2).unwrap(), vec![vec![0, 1]]);
    }
}
