//! Ranking metrics: AUC and user-grouped AUC.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Area under the ROC curve by the rank-sum statistic, with tied scores
/// sharing their midrank (a tie between a positive and a negative counts
/// one half). Labels are 0 or 1.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            op: "auc",
            left: (scores.len(), 1),
            right: (labels.len(), 1),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let mut positives = 0usize;
    for &y in labels {
        match y {
            0 => {}
            1 => positives += 1,
            other => return Err(Error::Invalid(format!("label {other} is not 0 or 1"))),
        }
    }
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass {
            positives,
            negatives,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the positive rank sum, kept integral: a tie group occupying
    // ranks i+1..=j has midrank (i + 1 + j) / 2.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as u64;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j;
    }
    let p = positives as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * negatives as u64) as f64)
}

/// Sample-weighted mean of per-user AUC. Users whose samples are all one
/// class are dropped from both the sum and the weight denominator.
pub fn gauc<K: Ord>(scores: &[f64], labels: &[u8], users: &[K]) -> Result<f64> {
    if scores.len() != labels.len() || scores.len() != users.len() {
        return Err(Error::DimensionMismatch {
            op: "gauc",
            left: (scores.len(), labels.len()),
            right: (users.len(), 1),
        });
    }
    let mut groups: BTreeMap<&K, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((s, &y), u) in scores.iter().zip(labels).zip(users) {
        let g = groups.entry(u).or_default();
        g.0.push(*s);
        g.1.push(y);
    }
    let total_users = groups.len();
    let mut included = Vec::new();
    for (s, y) in groups.values() {
        match auc(s, y) {
            Ok(a) => included.push((a, s.len())),
            Err(Error::SingleClass { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let weight: usize = included.iter().map(|&(_, n)| n).sum();
    if weight == 0 {
        return Err(Error::NoQualifyingUsers { users: total_users });
    }
    Ok(included
        .iter()
        .map(|&(a, n)| n as f64 / weight as f64 * a)
        .sum())
}
