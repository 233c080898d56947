use crate::error::{invalid, Error, Result};
use crate::io::IGNORE_LABEL;

/// Counts indexed `[ground truth][prediction]` over an ordered class list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<u32>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: &[u32]) -> Self {
        Self {
            classes: classes.to_vec(),
            counts: vec![0; classes.len() * classes.len()],
        }
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    fn index(&self, class: u32) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn get(&self, gt: u32, pred: u32) -> u64 {
        match (self.index(gt), self.index(pred)) {
            (Some(g), Some(p)) => self.counts[g * self.classes.len() + p],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one point; ignore-label ground truth is skipped.
    pub fn add(&mut self, pred: u32, gt: u32) -> Result<()> {
        if gt == IGNORE_LABEL {
            return Ok(());
        }
        let g = self.index(gt).ok_or(Error::LabelOutOfRange(gt))?;
        let p = self
            .index(pred)
            .ok_or_else(|| invalid(format!("prediction {pred} is not an evaluated class")))?;
        let n = self.classes.len();
        self.counts[g * n + p] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(invalid("confusion matrices over different classes"));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the denominator is zero.
    pub fn iou(&self, class: u32) -> Option<f64> {
        let k = self.index(class)?;
        let n = self.classes.len();
        let tp = self.counts[k * n + k];
        let row: u64 = self.counts[k * n..(k + 1) * n].iter().sum();
        let col: u64 = (0..n).map(|g| self.counts[g * n + k]).sum();
        let denom = row + col - tp;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }
}

pub fn confusion(preds: &[u32], labels: &[u32], classes: &[u32]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &g) in preds.iter().zip(labels) {
        cm.add(p, g)?;
    }
    Ok(cm)
}

/// Mean IoU over `subset`, skipping classes with a zero denominator.
/// NaN when every class is skipped.
pub fn miou(cm: &ConfusionMatrix, subset: &[u32]) -> f64 {
    let ious: Vec<f64> = subset.iter().filter_map(|&c| cm.iou(c)).collect();
    if ious.is_empty() {
        return f64::NAN;
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: u32 = 1;
    const B: u32 = 2;
    const C: u32 = 3;

    fn six_point() -> ConfusionMatrix {
        confusion(&[A, B, B, B, C, C], &[A, A, B, B, B, C], &[A, B, C]).unwrap()
    }

    #[test]
    fn hand_counted_case() {
        let cm = six_point();
        assert_eq!((cm.get(A, A), cm.get(A, B)), (1, 1));
        assert_eq!((cm.get(B, B), cm.get(B, C)), (2, 1));
        assert_eq!(cm.get(C, C), 1);
        assert_eq!(cm.total(), 6);
        assert_eq!(cm.iou(A), Some(0.5));
        assert_eq!(cm.iou(B), Some(0.5));
        assert_eq!(cm.iou(C), Some(0.5));
        assert_eq!(miou(&cm, &[A, B, C]), 0.5);
    }

    #[test]
    fn perfect_and_empty() {
        let cm = confusion(&[A, B, C, C], &[A, B, C, C], &[A, B, C]).unwrap();
        assert_eq!(miou(&cm, &[A, B, C]), 1.0);
        assert_eq!(cm.get(A, B) + cm.get(B, C) + cm.get(C, A), 0);
        let empty = confusion(&[], &[], &[A, B]).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(miou(&empty, &[A, B]).is_nan());
    }

    #[test]
    fn ignore_is_skipped_and_unknown_rejected() {
        let cm = confusion(&[A, B], &[IGNORE_LABEL, B], &[A, B]).unwrap();
        assert_eq!(cm.total(), 1);
        assert!(matches!(
            confusion(&[A], &[9], &[A, B]),
            Err(Error::LabelOutOfRange(9))
        ));
        assert!(confusion(&[9], &[A], &[A, B]).is_err());
        assert!(confusion(&[A], &[], &[A]).is_err());
    }

    #[test]
    fn absent_class_is_excluded() {
        let cm = confusion(&[A, A], &[A, A], &[A, B]).unwrap();
        assert_eq!(cm.iou(B), None);
        assert_eq!(miou(&cm, &[A, B]), 1.0);
    }
}
