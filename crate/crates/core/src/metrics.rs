//! Classification metrics: accuracy, Brier score, confidence-thresholded
//! accuracy, and negative log-likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const NORMALISATION_TOL: f64 = 1e-6;

/// One evaluation of a predictor on a split. `acc50`/`acc90` are `None`
/// when no prediction clears the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub brier: f64,
    pub acc50: Option<f64>,
    pub cov50: f64,
    pub acc90: Option<f64>,
    pub cov90: f64,
    pub nll: f64,
    pub n_examples: usize,
}

impl EvalReport {
    /// Builds the full report from a probability matrix and class targets.
    pub fn from_probs(probs: &Matrix, targets: &[usize]) -> Result<Self> {
        let (a50, c50) = confident_accuracy(probs, targets, 0.5)?;
        let (a90, c90) = confident_accuracy(probs, targets, 0.9)?;
        Ok(EvalReport {
            accuracy: accuracy(probs, targets)?,
            brier: brier(probs, targets)?,
            acc50: a50,
            cov50: c50,
            acc90: a90,
            cov90: c90,
            nll: nll(probs, targets)?,
            n_examples: targets.len(),
        })
    }

    /// Row in the metrics CSV schema
    /// epoch,split,accuracy,brier,acc50,cov50,acc90,cov90,nll.
    /// Absent accuracies become empty cells.
    pub fn csv_row(&self, epoch: usize, split: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            epoch,
            split,
            self.accuracy,
            self.brier,
            opt(self.acc50),
            self.cov50,
            opt(self.acc90),
            self.cov90,
            self.nll
        )
    }
}

pub const METRICS_CSV_HEADER: &str = "epoch,split,accuracy,brier,acc50,cov50,acc90,cov90,nll";

fn check_inputs(probs: &Matrix, targets: &[usize]) -> Result<()> {
    if probs.rows() != targets.len() {
        return Err(Error::shape(
            "metrics",
            probs.shape(),
            (targets.len(), probs.cols()),
        ));
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= probs.cols() {
            return Err(Error::TargetOutOfRange {
                class: t,
                num_classes: probs.cols(),
            });
        }
        let sum: f64 = probs.row(i).iter().sum();
        if (sum - 1.0).abs() > NORMALISATION_TOL {
            return Err(Error::NotNormalized { row: i, sum });
        }
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy(probs: &Matrix, targets: &[usize]) -> Result<f64> {
    check_inputs(probs, targets)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| argmax(probs.row(i)) == t)
        .count();
    Ok(correct as f64 / targets.len() as f64)
}

/// Mean over examples of sum_k (p_k - onehot_k)^2.
pub fn brier(probs: &Matrix, targets: &[usize]) -> Result<f64> {
    check_inputs(probs, targets)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        for (j, &p) in probs.row(i).iter().enumerate() {
            let y = if j == t { 1.0 } else { 0.0 };
            total += (p - y) * (p - y);
        }
    }
    Ok(total / targets.len() as f64)
}

/// Accuracy restricted to examples whose top probability strictly exceeds
/// `threshold`, plus the fraction selected. Accuracy is `None` when the
/// selection is empty.
pub fn confident_accuracy(
    probs: &Matrix,
    targets: &[usize],
    threshold: f64,
) -> Result<(Option<f64>, f64)> {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must be in (0,1)");
    check_inputs(probs, targets)?;
    let (mut selected, mut correct) = (0usize, 0usize);
    for (i, &t) in targets.iter().enumerate() {
        let row = probs.row(i);
        let top = argmax(row);
        if row[top] > threshold {
            selected += 1;
            if top == t {
                correct += 1;
            }
        }
    }
    let coverage = if targets.is_empty() {
        0.0
    } else {
        selected as f64 / targets.len() as f64
    };
    let acc = if selected == 0 {
        None
    } else {
        Some(correct as f64 / selected as f64)
    };
    Ok((acc, coverage))
}

/// Mean negative log predicted probability of the target class.
pub fn nll(probs: &Matrix, targets: &[usize]) -> Result<f64> {
    check_inputs(probs, targets)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        total -= probs.get(i, t).max(1e-300).ln();
    }
    Ok(total / targets.len() as f64)
}

/// Root-mean-square error for regression outputs.
pub fn rmse(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("rmse", pred.shape(), truth.shape()));
    }
    let n = pred.len() as f64;
    let sq: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sq / n).sqrt())
}
