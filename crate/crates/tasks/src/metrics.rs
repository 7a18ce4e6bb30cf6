//! Evaluation metrics for the five tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use units_core::error::{shape_err, Result};

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(shape_err(format!("prediction and truth lengths differ ({a} vs {b})")));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// `C x C` counts, rows = truth, columns = prediction.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    same_len(pred.len(), truth.len())?;
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(shape_err(format!("label outside [0, {n_classes})")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1 scores.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    let m = confusion_matrix(pred, truth, n_classes)?;
    let mut total = 0.0;
    for c in 0..n_classes {
        let tp = m[c][c] as f64;
        let predicted: usize = (0..n_classes).map(|t| m[t][c]).sum();
        let actual: usize = m[c].iter().sum();
        let denom = predicted as f64 + actual as f64;
        total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(total / n_classes.max(1) as f64)
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

fn contingency(a: &[usize], b: &[usize]) -> (BTreeMap<(usize, usize), f64>, BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let mut joint = BTreeMap::new();
    let mut ma = BTreeMap::new();
    let mut mb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
        *ma.entry(x).or_insert(0.0) += 1.0;
        *mb.entry(y).or_insert(0.0) += 1.0;
    }
    (joint, ma, mb)
}

/// Adjusted Rand index; 1 for identical partitions up to relabeling.
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    let n = pred.len() as f64;
    let (joint, ma, mb) = contingency(pred, truth);
    let index: f64 = joint.values().map(|&v| choose2(v)).sum();
    let sa: f64 = ma.values().map(|&v| choose2(v)).sum();
    let sb: f64 = mb.values().map(|&v| choose2(v)).sum();
    let expected = if n < 2.0 { 0.0 } else { sa * sb / choose2(n) };
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Normalized mutual information (arithmetic-mean normalization).
pub fn normalized_mutual_info(pred: &[usize], truth: &[usize]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    let n = pred.len() as f64;
    if n == 0.0 {
        return Ok(0.0);
    }
    let (joint, ma, mb) = contingency(pred, truth);
    let entropy = |m: &BTreeMap<usize, f64>| -> f64 { m.values().map(|&v| -(v / n) * (v / n).ln()).sum() };
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &v)| (v / n) * ((v * n) / (ma[&x] * mb[&y])).ln())
        .sum();
    let (ha, hb) = (entropy(&ma), entropy(&mb));
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * mi / (ha + hb))
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len().max(1) as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Point-wise precision/recall/F1 of binary flags.
pub fn detection_scores(pred: &[bool], truth: &[bool]) -> Result<DetectionScores> {
    same_len(pred.len(), truth.len())?;
    let mut tp = 0;
    let mut fp = 0;
    let mut fneg = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(DetectionScores {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
    })
}
