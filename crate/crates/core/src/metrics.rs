//! Segmentation metrics: overall IoU, mean IoU and precision at IoU thresholds.

use std::fmt::Write as _;

use mafn_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

pub const CSV_HEADER: &str = "epoch,oIoU,mIoU,P@0.5,P@0.6,P@0.7,P@0.8,P@0.9";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub oiou: f64,
    pub miou: f64,
    /// Fraction of samples with IoU at least `THRESHOLDS[i]`.
    pub precision: [f64; 5],
    pub count: usize,
}

impl MetricsReport {
    pub fn precision_at(&self, threshold: f64) -> Option<f64> {
        THRESHOLDS
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.precision[i])
    }

    /// Values in the CSV column order, without the epoch.
    pub fn columns(&self) -> [f64; 7] {
        let p = self.precision;
        [self.oiou, self.miou, p[0], p[1], p[2], p[3], p[4]]
    }

    pub fn csv_row(&self, epoch: usize) -> String {
        let mut s = epoch.to_string();
        for v in self.columns() {
            let _ = write!(s, ",{v:.6}");
        }
        s
    }

    /// Fixed-width table: header line, then one value line.
    pub fn table(&self) -> String {
        let head = ["P@0.5", "P@0.6", "P@0.7", "P@0.8", "P@0.9", "oIoU", "mIoU"];
        let p = self.precision;
        let vals = [p[0], p[1], p[2], p[3], p[4], self.oiou, self.miou];
        let mut s = String::new();
        for h in head {
            let _ = write!(s, "{h:>8}");
        }
        s.push('\n');
        for v in vals {
            let _ = write!(s, "{v:>8.4}");
        }
        s
    }
}

/// Pixels with positive logit.
pub fn binarize<T: Scalar>(logits: &Tensor<T>) -> Vec<bool> {
    logits.data().iter().map(|&x| x > T::zero()).collect()
}

pub fn mask_bits<T: Scalar>(mask: &Tensor<T>) -> Vec<bool> {
    mask.data().iter().map(|&x| x.as_f64() > 0.5).collect()
}

/// `(|pred ∩ gt|, |pred ∪ gt|)`.
pub fn overlap(pred: &[bool], gt: &[bool]) -> (usize, usize) {
    pred.iter().zip(gt).fold((0, 0), |(i, u), (&p, &g)| {
        (i + (p && g) as usize, u + (p || g) as usize)
    })
}

/// IoU with the convention that two empty masks agree perfectly.
pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    let (i, u) = overlap(pred, gt);
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

pub fn compute_metrics(preds: &[Vec<bool>], truths: &[Vec<bool>]) -> Result<MetricsReport> {
    if preds.len() != truths.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut ious = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(Error::Data(format!(
                "prediction of {} pixels against mask of {}",
                p.len(),
                t.len()
            )));
        }
        let (i, u) = overlap(p, t);
        inter += i;
        union += u;
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    let n = ious.len() as f64;
    let mut precision = [0.0; 5];
    for (slot, &t) in precision.iter_mut().zip(&THRESHOLDS) {
        *slot = ious.iter().filter(|&&v| v >= t).count() as f64 / n;
    }
    Ok(MetricsReport {
        oiou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        miou: ious.iter().sum::<f64>() / n,
        precision,
        count: ious.len(),
    })
}
