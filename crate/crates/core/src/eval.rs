//! Full-ranking top-K evaluation over held-out positives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ItemIdx, SplitPart, SplitStore, UserIdx};
use crate::model::Scorer;

pub const DEFAULT_KS: [usize; 2] = [10, 20];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("no user has positives in the {0} split")]
    NoEvaluableUsers(&'static str),
    #[error("evaluation is only defined for the valid and test splits")]
    TrainSplit,
    #[error("scorer covers {scorer} users / {scorer_items} items, data has {data} / {data_items}")]
    Shape {
        scorer: usize,
        scorer_items: usize,
        data: usize,
        data_items: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserMetrics {
    pub hr: f64,
    pub recall: f64,
    pub dcg: f64,
    pub idcg: f64,
    pub ndcg: f64,
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub split: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub hr: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub n_users: usize,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub split: SplitPart,
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub n_users: usize,
}

impl EvalResult {
    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }

    pub fn rows(&self, seed: u64, epoch: usize) -> Vec<MetricRow> {
        (0..self.ks.len())
            .map(|j| MetricRow {
                split: self.split.as_str().to_owned(),
                k: self.ks[j],
                hr: self.hr[j],
                recall: self.recall[j],
                ndcg: self.ndcg[j],
                n_users: self.n_users,
                seed,
                epoch,
            })
            .collect()
    }
}

/// All items not in `exclude` (sorted ascending), by score descending with
/// ties broken by ascending index.
pub fn rank_all_items(scores: &[f64], exclude: &[ItemIdx]) -> Vec<ItemIdx> {
    let mut items: Vec<ItemIdx> = (0..scores.len() as ItemIdx)
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    items.sort_by(|&a, &b| cmp_desc(scores, a, b));
    items
}

fn cmp_desc(scores: &[f64], a: ItemIdx, b: ItemIdx) -> std::cmp::Ordering {
    scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b))
}

/// Top `k` of `rank_all_items` without sorting the whole list.
pub fn top_k_items(scores: &[f64], exclude: &[ItemIdx], k: usize) -> Vec<ItemIdx> {
    let mut items: Vec<ItemIdx> = (0..scores.len() as ItemIdx)
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    if k < items.len() {
        items.select_nth_unstable_by(k, |&a, &b| cmp_desc(scores, a, b));
        items.truncate(k);
    }
    items.sort_by(|&a, &b| cmp_desc(scores, a, b));
    items
}

#[inline]
fn discount(position: usize) -> f64 {
    1.0 / ((position + 1) as f64).log2()
}

/// Metrics of one ranked list against a sorted positive set. Only the first
/// `k` entries of `ranked` are read.
pub fn metrics_at_k(ranked: &[ItemIdx], positives: &[ItemIdx], k: usize) -> Result<UserMetrics, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (j, item) in ranked.iter().take(k).enumerate() {
        if positives.binary_search(item).is_ok() {
            hits += 1;
            dcg += discount(j + 1);
        }
    }
    let idcg: f64 = (1..=k.min(positives.len())).map(discount).sum();
    let ndcg = if idcg > 0.0 { dcg / idcg } else { 0.0 };
    Ok(UserMetrics {
        hr: if hits > 0 { 1.0 } else { 0.0 },
        recall: if positives.is_empty() {
            0.0
        } else {
            hits as f64 / positives.len() as f64
        },
        dcg,
        idcg,
        ndcg,
    })
}

/// Averages per-user metrics over every user with at least one positive in
/// `split`. Train items are never candidates; valid items are also excluded
/// when evaluating test.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    store: &SplitStore,
    split: SplitPart,
    ks: &[usize],
) -> Result<EvalResult, EvalError> {
    if split == SplitPart::Train {
        return Err(EvalError::TrainSplit);
    }
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    if scorer.n_users() != store.n_users() || scorer.n_items() != store.n_items() {
        return Err(EvalError::Shape {
            scorer: scorer.n_users(),
            scorer_items: scorer.n_items(),
            data: store.n_users(),
            data_items: store.n_items(),
        });
    }
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let mut scores = vec![0.0; store.n_items()];
    let mut exclude: Vec<ItemIdx> = Vec::new();
    let mut sums = vec![[0.0f64; 3]; ks.len()];
    let mut n_users = 0usize;
    for u in 0..store.n_users() as UserIdx {
        let positives = store.part(split, u);
        if positives.is_empty() {
            continue;
        }
        exclude.clear();
        exclude.extend_from_slice(store.train(u));
        if split == SplitPart::Test {
            exclude.extend_from_slice(store.part(SplitPart::Valid, u));
            exclude.sort_unstable();
        }
        scorer.score_items(u, &mut scores);
        let top = top_k_items(&scores, &exclude, max_k);
        for (j, &k) in ks.iter().enumerate() {
            let m = metrics_at_k(&top, positives, k)?;
            sums[j][0] += m.hr;
            sums[j][1] += m.recall;
            sums[j][2] += m.ndcg;
        }
        n_users += 1;
    }
    if n_users == 0 {
        return Err(EvalError::NoEvaluableUsers(split.as_str()));
    }
    let n = n_users as f64;
    Ok(EvalResult {
        split,
        ks: ks.to_vec(),
        hr: sums.iter().map(|s| s[0] / n).collect(),
        recall: sums.iter().map(|s| s[1] / n).collect(),
        ndcg: sums.iter().map(|s| s[2] / n).collect(),
        n_users,
    })
}
