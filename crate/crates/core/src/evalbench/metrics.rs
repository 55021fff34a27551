//! Classification and clustering metrics.
//!
//! Micro-F1 here is exact-match accuracy. Two macro scores are reported:
//! `macro_f1_paper` is the mean per-class recall (the printed formula of
//! the evaluation protocol), `macro_f1_standard` the usual mean of
//! per-class harmonic F1. Clustering quality uses Hungarian-matched
//! accuracy and NMI with the geometric-mean normalization.

use ndarray::Array2;
use serde::Serialize;

use crate::alignment::linear_sum_assignment;
use crate::error::{Error, Result};

/// Exact-match fraction (equals 1 − Hamming error rate).
pub fn micro_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Per-class recall over classes `0..num_classes`; classes absent from
/// the truth get recall 0.
pub fn per_class_recall(pred: &[usize], truth: &[usize], num_classes: usize) -> Vec<f64> {
    let mut correct = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        support[t] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    (0..num_classes)
        .map(|c| {
            if support[c] == 0 {
                0.0
            } else {
                correct[c] as f64 / support[c] as f64
            }
        })
        .collect()
}

/// Mean per-class recall, as the evaluation protocol prints it. Classes
/// absent from the truth contribute 0 and are counted unless
/// `skip_empty`.
pub fn macro_f1_paper(
    pred: &[usize],
    truth: &[usize],
    num_classes: usize,
    skip_empty: bool,
) -> Result<f64> {
    check_lengths(pred, truth)?;
    if let Some(&bad) = truth.iter().find(|&&t| t >= num_classes) {
        return Err(Error::data(format!(
            "truth label {bad} out of {num_classes} classes"
        )));
    }
    let recall = per_class_recall(pred, truth, num_classes);
    if skip_empty {
        let mut support = vec![false; num_classes];
        for &t in truth {
            support[t] = true;
        }
        let present: Vec<f64> = (0..num_classes)
            .filter(|&c| support[c])
            .map(|c| recall[c])
            .collect();
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    } else {
        Ok(recall.iter().sum::<f64>() / num_classes as f64)
    }
}

/// Conventional macro-F1: mean over classes of the harmonic mean of
/// precision and recall, zero for classes without support or predictions.
pub fn macro_f1_standard(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            if p < num_classes {
                fp[p] += 1;
            }
            fn_[t] += 1;
        }
    }
    let mut acc = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            acc += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(acc / num_classes as f64)
}

/// Hungarian-matched clustering accuracy: the best injective matching of
/// clusters to classes on the contingency table. Handles any
/// cluster/class count by zero-padding.
pub fn clustering_acc(assign: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(assign, truth)?;
    let clusters = assign.iter().max().map(|&m| m + 1).unwrap_or(0);
    let classes = truth.iter().max().map(|&m| m + 1).unwrap_or(0);
    let rows = clusters.max(classes);
    let mut contingency = Array2::zeros((rows, classes));
    for (&a, &t) in assign.iter().zip(truth) {
        contingency[[a, t]] += 1.0;
    }
    // minimize negated counts = maximize matched mass
    let cost = contingency.mapv(|v: f64| -v);
    let mapping = linear_sum_assignment(&cost.view())?;
    let matched: f64 = (0..classes)
        .map(|class| contingency[[mapping.cluster_of(class), class]])
        .sum();
    Ok(matched / truth.len() as f64)
}

/// Normalized mutual information, `I(A;T)/sqrt(H(A)·H(T))` with natural
/// logs; 0 when either marginal entropy is 0.
pub fn nmi(assign: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(assign, truth)?;
    let n = assign.len() as f64;
    let clusters = assign.iter().max().unwrap() + 1;
    let classes = truth.iter().max().unwrap() + 1;
    let mut joint = Array2::zeros((clusters, classes));
    for (&a, &t) in assign.iter().zip(truth) {
        joint[[a, t]] += 1.0 / n;
    }
    let pa: Vec<f64> = (0..clusters).map(|a| joint.row(a).sum()).collect();
    let pt: Vec<f64> = (0..classes).map(|t| joint.column(t).sum()).collect();
    let entropy = |p: &[f64]| -> f64 { -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>() };
    let ha = entropy(&pa);
    let ht = entropy(&pt);
    if ha == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for a in 0..clusters {
        for t in 0..classes {
            let p = joint[[a, t]];
            if p > 0.0 {
                mi += p * (p / (pa[a] * pt[t])).ln();
            }
        }
    }
    Ok((mi / (ha * ht).sqrt()).clamp(0.0, 1.0))
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::data("metric on empty input".to_string()));
    }
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "metric length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// One method×seed evaluation row.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub micro_f1: f64,
    pub macro_f1_paper: f64,
    pub macro_f1_standard: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clustering_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    pub per_class_recall: Vec<f64>,
    pub seed: u64,
    pub scenario: String,
}
