//! ROC-AUC and the summary statistics reported alongside it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scores aligned with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::BadEnum {
                field: "label",
                value: bad.to_string(),
            });
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn roc_auc(&self) -> Result<f64> {
        roc_auc(&self.scores, &self.labels)
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs in which the positive scores higher, ties
/// counted as one half.
///
/// Runs in `O(n log n)` using mid-ranks. The statistic is accumulated in
/// doubled units so that it is an exact integer before the final division,
/// which makes the result bit-identical to explicit pair counting.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::OneClassOnly);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum over positives of (2 * mid-rank), 1-based ranks.
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, doubled mid-rank = start + 1 + end
        let doubled_mid = (start + 1 + end) as u128;
        let pos_in_group = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1)
            .count() as u128;
        doubled_rank_sum += doubled_mid * pos_in_group;
        start = end;
    }
    let p = n_pos as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Percentile bootstrap interval for the ROC-AUC.
///
/// Resamples with replacement; resamples that lack one class are redrawn.
pub fn bootstrap_ci(set: &ScoredSet, n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if n_boot < 100 {
        return Err(Error::InvalidConfig(format!("n_boot {n_boot} < 100")));
    }
    if !(0.0..1.0).contains(&level) || level == 0.0 {
        return Err(Error::InvalidConfig(format!("level {level} outside (0,1)")));
    }
    // Validates both classes are present.
    set.roc_auc()?;

    let n = set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aucs = Vec::with_capacity(n_boot);
    let mut scores = vec![0.0; n];
    let mut labels = vec![0u8; n];
    while aucs.len() < n_boot {
        for k in 0..n {
            let i = rng.random_range(0..n);
            scores[k] = set.scores[i];
            labels[k] = set.labels[i];
        }
        match roc_auc(&scores, &labels) {
            Ok(a) => aucs.push(a),
            Err(Error::OneClassOnly) => continue,
            Err(e) => return Err(e),
        }
    }
    aucs.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&aucs, alpha), quantile_sorted(&aucs, 1.0 - alpha)))
}

/// Linear-interpolation quantile of an ascending slice.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Mean and sample (n-1) standard deviation; the std of a single value is 0.
pub fn summarize_seeds(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// Null distribution of the ROC-AUC when labels carry no information.
///
/// Labels are permuted at the level of `groups` (all members of a group keep
/// a shared label), which is the correct null for clustered data such as
/// several images per individual. Pass `0..n` as groups for the i.i.d. case.
/// Returns the mean and standard deviation of the permuted AUCs.
pub fn permutation_null(
    scores: &[f64],
    labels: &[u8],
    groups: &[usize],
    n_perm: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if groups.len() != labels.len() {
        return Err(Error::ShapeMismatch("groups vs labels".into()));
    }
    roc_auc(scores, labels)?;

    let mut group_ids: Vec<usize> = groups.to_vec();
    group_ids.sort_unstable();
    group_ids.dedup();
    let index_of = |g: usize| group_ids.binary_search(&g).expect("group present");
    let mut group_labels = vec![0u8; group_ids.len()];
    for (&g, &l) in groups.iter().zip(labels) {
        group_labels[index_of(g)] = l;
    }
    let member_group: Vec<usize> = groups.iter().map(|&g| index_of(g)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aucs = Vec::with_capacity(n_perm);
    let mut permuted = vec![0u8; labels.len()];
    while aucs.len() < n_perm {
        group_labels.shuffle(&mut rng);
        for (slot, &g) in permuted.iter_mut().zip(&member_group) {
            *slot = group_labels[g];
        }
        match roc_auc(scores, &permuted) {
            Ok(a) => aucs.push(a),
            Err(Error::OneClassOnly) => continue,
            Err(e) => return Err(e),
        }
    }
    summarize_seeds(&aucs)
}
