//! Ranking average precision and head/medium/tail grouped mAP.
//!
//! AP is the mean, over positive items, of precision at the item's rank.
//! Items are ranked by descending score with ties broken by ascending
//! index, so the result is deterministic even with tied scores. No
//! interpolation is applied.

use serde::{Deserialize, Serialize};

use crate::data::{ClassGroup, ClassStats, MultiLabelDataset};
use crate::error::{Error, Result};
use crate::prompt::{FrozenTextEncoder, LogitHead, PromptEmbeddings, PromptSet};

pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable; equal scores keep ascending index order
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));

    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (rank0, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            hits += 1;
            precision_sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(precision_sum / positives as f64)
}

/// Reference AP by explicit tabulation: every item's rank is found by
/// counting the items that outrank it, then precision and recall are
/// tabulated for each prefix and precision is accumulated wherever recall
/// steps up. Quadratic; intended for short inputs in tests.
pub fn brute_force_ap(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n = scores.len();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} scores for {} labels", labels.len())));
    }
    let total_pos = labels.iter().filter(|&&y| y == 1).count();
    if total_pos == 0 {
        return Err(Error::UndefinedAp);
    }
    let outranks = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let rank: Vec<usize> = (0..n).map(|k| 1 + (0..n).filter(|&j| j != k && outranks(j, k)).count()).collect();

    let mut sum = 0.0;
    let mut prev_recall_hits = 0usize;
    for prefix in 1..=n {
        let hits = (0..n).filter(|&k| rank[k] <= prefix && labels[k] == 1).count();
        let precision = hits as f64 / prefix as f64;
        if hits > prev_recall_hits {
            sum += precision;
        }
        prev_recall_hits = hits;
    }
    Ok(sum / total_pos as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `None` for classes without positives in the evaluated split.
    pub per_class_ap: Vec<Option<f64>>,
    pub map_total: f64,
    /// `None` when the group has no evaluable classes.
    pub map_head: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_tail: Option<f64>,
    pub excluded_classes: Vec<usize>,
}

impl EvalResult {
    pub fn group(&self, group: ClassGroup) -> Option<f64> {
        match group {
            ClassGroup::Head => self.map_head,
            ClassGroup::Medium => self.map_medium,
            ClassGroup::Tail => self.map_tail,
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Groups per-class APs according to `stats`.
pub fn summarize(per_class_ap: Vec<Option<f64>>, stats: &ClassStats) -> Result<EvalResult> {
    if per_class_ap.len() != stats.num_classes() {
        return Err(Error::Shape(format!(
            "{} APs for {} classes",
            per_class_ap.len(),
            stats.num_classes()
        )));
    }
    let excluded_classes: Vec<usize> = (0..per_class_ap.len()).filter(|&i| per_class_ap[i].is_none()).collect();
    let group_mean = |g: ClassGroup| mean(stats.members(g).filter_map(|i| per_class_ap[i]));
    let map_total = mean(per_class_ap.iter().flatten().copied()).ok_or(Error::UndefinedAp)?;
    Ok(EvalResult {
        map_head: group_mean(ClassGroup::Head),
        map_medium: group_mean(ClassGroup::Medium),
        map_tail: group_mean(ClassGroup::Tail),
        map_total,
        per_class_ap,
        excluded_classes,
    })
}

/// Per-class AP of class scores over `dataset`, grouped by `stats` (which
/// come from the training split). `scores[k][i]` is sample `k`'s score for class `i`.
pub fn evaluate_scores(dataset: &MultiLabelDataset, scores: &[Vec<f64>], stats: &ClassStats) -> Result<EvalResult> {
    let c = dataset.num_classes();
    let mut per_class = Vec::with_capacity(c);
    let mut column = vec![0.0; dataset.len()];
    let mut labels = vec![0u8; dataset.len()];
    for i in 0..c {
        for (k, s) in dataset.samples().iter().enumerate() {
            column[k] = scores[k][i];
            labels[k] = s.labels[i];
        }
        per_class.push(match average_precision(&column, &labels) {
            Ok(ap) => Some(ap),
            Err(Error::UndefinedAp) => None,
            Err(e) => return Err(e),
        });
    }
    summarize(per_class, stats)
}

/// Scores every sample with the prompt logits and summarizes per-class AP.
pub fn evaluate(
    dataset: &MultiLabelDataset,
    prompts: &PromptSet,
    encoder: &FrozenTextEncoder,
    head: &LogitHead,
    stats: &ClassStats,
) -> Result<EvalResult> {
    let embeddings = PromptEmbeddings::compute(encoder, prompts)?;
    let scores: Vec<Vec<f64>> = dataset
        .samples()
        .iter()
        .map(|s| head.logits(&s.image_embedding, embeddings.embeddings()))
        .collect();
    evaluate_scores(dataset, &scores, stats)
}
