use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of `[B, C]` logits.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// `confusion[true][predicted]` counts.
pub fn confusion(logits: &Tensor, labels: &[usize]) -> Vec<Vec<usize>> {
    let c = logits.shape()[1];
    let mut m = vec![vec![0; c]; c];
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        m[y][argmax(row)] += 1;
    }
    m
}

/// Mean hard-label cross-entropy.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let total: f64 = logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Only reported for two classes with both present.
    pub auroc: Option<f64>,
    pub loss: f64,
    pub confusion: Vec<Vec<usize>>,
    pub count: usize,
}

impl MetricsReport {
    pub fn from_logits(logits: &Tensor, labels: &[usize]) -> Self {
        let auroc = if logits.shape()[1] == 2 {
            let scores: Vec<f64> = softmax_rows(logits).iter().map(|p| p[1]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
            auroc(&scores, &pos).ok()
        } else {
            None
        };
        MetricsReport {
            accuracy: accuracy(logits, labels),
            auroc,
            loss: cross_entropy(logits, labels),
            confusion: confusion(logits, labels),
            count: labels.len(),
        }
    }
}
