//! Accuracy matrix bookkeeping and the benchmark metrics: average accuracy,
//! average forgetting, average precision and copyright-identification
//! accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `B[i][j]`: accuracy on test set `i` after training session `j`, defined
/// only for `j ≥ i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    n: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Matrix("accuracy matrix needs at least one session".into()));
        }
        Ok(Self {
            n,
            cells: vec![None; n * n],
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i < self.n && j < self.n {
            self.cells[i * self.n + j]
        } else {
            None
        }
    }

    pub fn record(&mut self, i: usize, j: usize, acc: f64) -> Result<()> {
        if i >= self.n || j >= self.n {
            return Err(Error::Matrix(format!("cell ({i}, {j}) outside {0}x{0}", self.n)));
        }
        if j < i {
            return Err(Error::Matrix(format!("cell ({i}, {j}) is below the diagonal")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Matrix(format!("accuracy {acc} outside [0, 1]")));
        }
        let cell = &mut self.cells[i * self.n + j];
        if cell.is_some() {
            return Err(Error::Matrix(format!("cell ({i}, {j}) already recorded")));
        }
        *cell = Some(acc);
        Ok(())
    }

    pub fn final_column(&self) -> Result<Vec<f64>> {
        (0..self.n)
            .map(|i| {
                self.get(i, self.n - 1)
                    .ok_or_else(|| Error::Matrix(format!("final column missing row {i}")))
            })
            .collect()
    }

    /// Rows are test sets, columns sessions; blank below the diagonal.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("test_set");
        for j in 0..self.n {
            s += &format!(",after_{j}");
        }
        s.push('\n');
        for i in 0..self.n {
            s += &i.to_string();
            for j in 0..self.n {
                s.push(',');
                if let Some(v) = self.get(i, j) {
                    s += &format!("{v:.17}");
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Mean of the final column.
pub fn aa(b: &AccuracyMatrix) -> Result<f64> {
    Ok(mean(&b.final_column()?))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean over rows `i < n` of `(1/(n−i)) Σ_{j>i} (B[i][j] − B[i][i])` (rows
/// 1-based). Negative values mean forgetting.
pub fn af(b: &AccuracyMatrix) -> Result<f64> {
    let n = b.size();
    if n < 2 {
        return Err(Error::Matrix("forgetting needs at least two sessions".into()));
    }
    let cell = |i: usize, j: usize| {
        b.get(i, j)
            .ok_or_else(|| Error::Matrix(format!("cell ({i}, {j}) missing")))
    };
    let mut total = 0.0;
    for i in 0..n - 1 {
        let diag = cell(i, i)?;
        let mut s = 0.0;
        for j in i + 1..n {
            s += cell(i, j)? - diag;
        }
        total += s / (n - 1 - i) as f64;
    }
    Ok(total / (n - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each ranked sample.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Precision-recall curve over the ranking by descending score, ties broken
/// by lower sample index first; AP is the step sum `Σ (R_k − R_{k−1}) P_k`.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape("pr_curve", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::invalid("average precision needs both classes"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut points = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (k + 1) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(PrCurve { points, ap })
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(pr_curve(scores, labels)?.ap)
}

pub fn map_score(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::invalid("no average precisions to combine"));
    }
    Ok(mean(aps))
}

/// Fraction of samples assigned their exact class, with every conart
/// expected (and collapsed) to the single conart class.
pub fn ca(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::shape("ca", format!("{} predictions vs {} labels", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Fraction of binary (conart vs deepart) decisions that are right.
pub fn binary_accuracy(predicted: &[bool], truth: &[bool]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::shape("binary_accuracy", format!("{} vs {}", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}
