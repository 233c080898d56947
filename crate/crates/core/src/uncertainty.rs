//! Per-class adaptive confidence thresholds (the selection function φ).

use crate::autodiff::Tensor;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Kept point indices, ascending.
    pub kept: Vec<usize>,
    /// Argmax class of every input point.
    pub predicted: Vec<usize>,
    /// `τ_c` per class; `None` when no point predicts the class.
    pub thresholds: Vec<Option<f64>>,
}

/// Nearest-rank percentile: the `ceil(p·n)`-th smallest value, rank ≥ 1.
/// `sorted` must be ascending and non-empty.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Keeps, for each class, the points predicting it whose probability is at
/// least the `p`-th percentile of those points' probabilities.
///
/// `probs` is `m × C` with one distribution per row.
pub fn select_phi(probs: &Tensor, p: f64) -> Result<Selection> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("percentile {p} outside [0, 1)")));
    }
    let (m, c) = probs
        .dims2()
        .ok_or_else(|| invalid("class probabilities must be m × C"))?;
    let mut predicted = Vec::with_capacity(m);
    let mut confidence = Vec::with_capacity(m);
    for i in 0..m {
        let row = probs.row_slice(i);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|v| !(0.0..=1.0 + 1e-9).contains(v)) || (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(format!(
                "row {i} is not a probability distribution"
            )));
        }
        // First maximum wins so ties resolve to the lower class index.
        let (arg, best) = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
            );
        predicted.push(arg);
        confidence.push(best);
    }
    let mut thresholds = vec![None; c];
    for (class, t) in thresholds.iter_mut().enumerate() {
        let mut vals: Vec<f64> = (0..m)
            .filter(|&i| predicted[i] == class)
            .map(|i| confidence[i])
            .collect();
        if vals.is_empty() {
            continue;
        }
        vals.sort_by(f64::total_cmp);
        *t = Some(nearest_rank(&vals, p));
    }
    let kept = (0..m)
        .filter(|&i| confidence[i] >= thresholds[predicted[i]].expect("class has members"))
        .collect();
    Ok(Selection {
        kept,
        predicted,
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(rows: &[[f64; 2]]) -> Tensor {
        Tensor::matrix(rows.len(), 2, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn nearest_rank_example() {
        let t = probs(&[[0.9, 0.1], [0.8, 0.2], [0.6, 0.4], [0.4, 0.6], [0.45, 0.55]]);
        // Class 0 confidences {0.9, 0.8, 0.6}; class 1 {0.6, 0.55}.
        let s = select_phi(&t, 0.5).unwrap();
        assert_eq!(s.thresholds, vec![Some(0.8), Some(0.55)]);

        let four = [0.9, 0.8, 0.6, 0.4];
        assert_eq!(nearest_rank(&[0.4, 0.6, 0.8, 0.9], 0.5), 0.6);
        let t = Tensor::matrix(4, 1, four.to_vec()).unwrap();
        assert!(select_phi(&t, 0.5).is_err(), "rows must be distributions");
    }

    #[test]
    fn four_point_class_keeps_top_three() {
        let t = probs(&[[0.9, 0.1], [0.8, 0.2], [0.6, 0.4], [0.55, 0.45]]);
        let s = select_phi(&t, 0.3).unwrap();
        assert_eq!(s.thresholds[0], Some(0.6));
        assert_eq!(s.kept, vec![0, 1, 2]);
        assert_eq!(s.thresholds[1], None);
    }

    #[test]
    fn zero_percentile_keeps_everything() {
        let t = probs(&[[0.9, 0.1], [0.3, 0.7], [0.5, 0.5]]);
        assert_eq!(select_phi(&t, 0.0).unwrap().kept, vec![0, 1, 2]);
        assert!(select_phi(&t, 1.0).is_err());
    }

    fn random_probs() -> impl Strategy<Value = Tensor> {
        (1usize..40, 1usize..6).prop_flat_map(|(m, c)| {
            prop::collection::vec(0.01f64..1.0, m * c).prop_map(move |raw| {
                let mut data = raw;
                for row in data.chunks_mut(c) {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                Tensor::matrix(m, c, data).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn selections_shrink_as_p_grows(t in random_probs(), p1 in 0.0f64..0.99, dp in 0.0f64..0.99) {
            let p2 = (p1 + dp).min(0.99);
            let lo = select_phi(&t, p1).unwrap();
            let hi = select_phi(&t, p2).unwrap();
            prop_assert!(hi.kept.iter().all(|i| lo.kept.contains(i)));
            prop_assert_eq!(select_phi(&t, 0.0).unwrap().kept.len(), t.rows());
            for &i in &hi.kept {
                let c = hi.predicted[i];
                prop_assert!(t.get(i, c) >= hi.thresholds[c].unwrap());
            }
            for c in 0..t.cols() {
                if hi.thresholds[c].is_some() {
                    prop_assert!(hi.kept.iter().any(|&i| hi.predicted[i] == c));
                }
            }
        }
    }
}
