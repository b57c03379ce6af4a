//! Per-class IoU, mIoU and detection average precision.

use crate::{Error, Result};

/// `counts[t * k + p]` cells of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Adds cells where `mask` holds; `truth` of `None` is never evaluated.
    pub fn add(&mut self, pred: &[usize], truth: &[Option<usize>], mask: &[bool]) -> Result<()> {
        if pred.len() != truth.len() || pred.len() != mask.len() {
            return Err(Error::Shape {
                op: "confusion",
                left: vec![pred.len()],
                right: vec![truth.len(), mask.len()],
            });
        }
        let k = self.classes;
        for ((&p, t), &m) in pred.iter().zip(truth).zip(mask) {
            let Some(t) = *t else { continue };
            if !m {
                continue;
            }
            if p >= k || t >= k {
                return Err(Error::Invalid(format!("class index out of range ({p}, {t}) for {k} classes")));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)` per class, `None` when the denominator is zero.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let row: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
                let col: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl IouReport {
    pub fn from_confusion(c: &Confusion) -> Result<Self> {
        let per_class = c.per_class_iou();
        let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
        if vals.is_empty() {
            return Err(Error::Invalid("no class has any evaluable cell".into()));
        }
        let miou = vals.iter().sum::<f64>() / vals.len() as f64;
        Ok(Self { per_class, miou })
    }
}

/// IoU over cells where `mask` holds and the truth is labeled.
pub fn iou(pred: &[usize], truth: &[Option<usize>], mask: &[bool], classes: usize) -> Result<IouReport> {
    let mut c = Confusion::new(classes);
    c.add(pred, truth, mask)?;
    IouReport::from_confusion(&c)
}

/// Area under the step precision-recall curve, `sum_k P(k) * dr(k)`, of
/// detections `(score, is_true_positive)` against `num_gt` ground truths.
/// Detections are ranked by descending score, ties kept in input order.
pub fn average_precision(detections: &[(f64, bool)], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::Invalid("average precision with no ground truth".into()));
    }
    if detections.iter().any(|d| !d.0.is_finite()) {
        return Err(Error::NonFinite("detection score".into()));
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].0.total_cmp(&detections[a].0));
    let (mut tp, mut ap, mut prev_r) = (0usize, 0.0, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if detections[i].1 {
            tp += 1;
        }
        let p = tp as f64 / (rank + 1) as f64;
        let r = tp as f64 / num_gt as f64;
        ap += p * (r - prev_r);
        prev_r = r;
    }
    Ok(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let t = vec![Some(0), Some(1), Some(1), None];
        let r = iou(&[0, 1, 1, 0], &t, &[true; 4], 3).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn hand_case() {
        // class 0: tp 1 fp 1 fn 0; class 1: tp 1 fp 0 fn 1
        let t = vec![Some(0), Some(1), Some(1)];
        let r = iou(&[0, 1, 0], &t, &[true; 3], 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.5)]);
    }

    #[test]
    fn masked_out_everything() {
        assert!(iou(&[0], &[Some(0)], &[false], 2).is_err());
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2).unwrap(), 1.0);
        // tp, fp, tp over 2 gt: 1*0.5 + (2/3)*0.5
        let ap = average_precision(&[(0.9, true), (0.5, false), (0.4, true)], 2).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision(&[(0.9, false), (0.1, true)], 1).unwrap(), 0.5);
        assert_eq!(average_precision(&[], 3).unwrap(), 0.0);
        assert!(average_precision(&[], 0).is_err());
    }
}
