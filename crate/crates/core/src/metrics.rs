//! Confusion matrices, segmentation scores and t-based confidence intervals.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::math;

/// `counts[t·K + p]` = pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(shape_err("confusion", format!("{} counts for {} classes", counts.len(), k)));
        }
        Ok(Self { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(shape_err("confusion", format!("{} predictions vs {} labels", pred.len(), truth.len())));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(Error::Label { label: p.max(t), classes: self.k });
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    /// Elementwise sum, for merging evaluation shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(shape_err("confusion", format!("merging {} and {} classes", self.k, other.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

pub fn confusion(pred: &[u8], truth: &[u8], k: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, truth)?;
    Ok(cm)
}

/// Treatment of classes without true pixels in the macro averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ZeroSupport {
    /// Count them with score 0.
    #[default]
    IncludeAsZero,
    /// Leave them out of the averages.
    Exclude,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub per_class_iou: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub per_class_mcc: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub miou_with_bg: f64,
    pub miou_wo_bg: f64,
    pub f1_with_bg: f64,
    pub f1_wo_bg: f64,
    pub balanced_acc: f64,
    pub mean_mcc: f64,
    pub fw_iou: f64,
    pub pixel_acc: f64,
}

fn ratio(n: f64, d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        n / d
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix, background: Option<usize>, zero: ZeroSupport) -> Result<SegMetrics> {
    let k = cm.k;
    let total = cm.total();
    if total == 0 {
        return Err(arg_err("compute_metrics", format!("empty confusion matrix")));
    }
    if let Some(b) = background {
        if b >= k {
            return Err(Error::Label { label: b, classes: k });
        }
    }
    let n = total as f64;
    let mut iou = vec![0.0; k];
    let mut f1 = vec![0.0; k];
    let mut mcc = vec![0.0; k];
    let mut recall = vec![0.0; k];
    let mut support = vec![0u64; k];
    let mut diag = 0u64;
    for c in 0..k {
        let tp = cm.get(c, c);
        let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let col: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        let (fnn, fp) = (row - tp, col - tp);
        let tn = total - tp - fp - fnn;
        support[c] = row;
        diag += tp;
        let (tp, fp, fnn, tn) = (tp as f64, fp as f64, fnn as f64, tn as f64);
        iou[c] = ratio(tp, tp + fp + fnn);
        f1[c] = ratio(2.0 * tp, 2.0 * tp + fp + fnn);
        recall[c] = ratio(tp, tp + fnn);
        mcc[c] = if fp == 0.0 && fnn == 0.0 {
            1.0
        } else {
            let den = (tp + fp) * (tp + fnn) * (tn + fp) * (tn + fnn);
            ratio(tp * tn - fp * fnn, math::sqrt(den))
        };
    }
    let mean_over = |v: &[f64], skip_bg: bool| -> f64 {
        let mut s = 0.0;
        let mut c = 0usize;
        for i in 0..k {
            if skip_bg && Some(i) == background {
                continue;
            }
            if zero == ZeroSupport::Exclude && support[i] == 0 {
                continue;
            }
            s += v[i];
            c += 1;
        }
        ratio(s, c as f64)
    };
    let fw_iou = (0..k).map(|c| support[c] as f64 / n * iou[c]).sum();
    Ok(SegMetrics {
        miou_with_bg: mean_over(&iou, false),
        miou_wo_bg: mean_over(&iou, true),
        f1_with_bg: mean_over(&f1, false),
        f1_wo_bg: mean_over(&f1, true),
        balanced_acc: mean_over(&recall, false),
        mean_mcc: mean_over(&mcc, false),
        fw_iou,
        pixel_acc: diag as f64 / n,
        per_class_iou: iou,
        per_class_f1: f1,
        per_class_mcc: mcc,
        per_class_recall: recall,
    })
}

// Two-sided Student t critical values, df = 1..=30.
const T90: [f64; 30] = [
    6.314, 2.920, 2.353, 2.132, 2.015, 1.943, 1.895, 1.860, 1.833, 1.812, 1.796, 1.782, 1.771, 1.761, 1.753,
    1.746, 1.740, 1.734, 1.729, 1.725, 1.721, 1.717, 1.714, 1.711, 1.708, 1.706, 1.703, 1.701, 1.699, 1.697,
];
const T95: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
    2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
];
const T99: [f64; 30] = [
    63.657, 9.925, 5.841, 4.604, 4.032, 3.707, 3.499, 3.355, 3.250, 3.169, 3.106, 3.055, 3.012, 2.977, 2.947,
    2.921, 2.898, 2.878, 2.861, 2.845, 2.831, 2.819, 2.807, 2.797, 2.787, 2.779, 2.771, 2.763, 2.756, 2.750,
];

/// Critical value `t_{df, (1−confidence)/2}`; normal quantile beyond the table.
pub fn t_critical(df: usize, confidence: f64) -> Result<f64> {
    let (table, z) = if (confidence - 0.90).abs() < 1e-12 {
        (&T90, 1.645)
    } else if (confidence - 0.95).abs() < 1e-12 {
        (&T95, 1.960)
    } else if (confidence - 0.99).abs() < 1e-12 {
        (&T99, 2.576)
    } else {
        return Err(arg_err("mean_ci", format!("confidence {} not tabulated (0.90, 0.95, 0.99)", confidence)));
    };
    if df == 0 {
        return Err(arg_err("mean_ci", format!("need at least one degree of freedom")));
    }
    Ok(table.get(df - 1).copied().unwrap_or(z))
}

/// `mean ± t_{n−1}·s/√n`, returned as `(mean, lo, hi)`.
pub fn mean_ci(values: &[f64], confidence: f64) -> Result<(f64, f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(arg_err("mean_ci", format!("need at least 2 values, got {}", n)));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let half = t_critical(n - 1, confidence)? * math::sqrt(var) / math::sqrt(n as f64);
    Ok((mean, mean - half, mean + half))
}
