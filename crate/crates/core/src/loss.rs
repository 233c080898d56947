//! Weighted cross entropy and the swapped two-view objective.
//!
//! These are the reference formulas. Training evaluates the same quantity
//! inside the graph by folding weights, sign and the `1/N` mean into the
//! target tensor: `loss = Σ T ⊙ log softmax(logits / temperature)`.

use crate::autodiff::{Tensor, LOG_FLOOR};
use crate::error::{invalid, Result};

/// Per-class loss weights over the concatenated base + novel label space.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub base: Vec<f64>,
    pub novel: f64,
}

impl LossWeights {
    /// Inverse relative frequency of each base class, scaled to mean 1.
    /// Classes never observed are weighted as if seen once.
    pub fn from_base_counts(counts: &[usize]) -> Self {
        let total: usize = counts.iter().sum();
        let inv: Vec<f64> = counts
            .iter()
            .map(|&c| total.max(1) as f64 / c.max(1) as f64)
            .collect();
        let mean = inv.iter().sum::<f64>() / inv.len().max(1) as f64;
        Self {
            base: inv.iter().map(|w| w / mean).collect(),
            novel: 1.0,
        }
    }

    pub fn uniform(n_base: usize) -> Self {
        Self {
            base: vec![1.0; n_base],
            novel: 1.0,
        }
    }

    /// Weights for a label space of `n_base` base columns then `n_novel` novel ones.
    pub fn expand(&self, n_novel: usize) -> Vec<f64> {
        self.base
            .iter()
            .copied()
            .chain(std::iter::repeat_n(self.novel, n_novel))
            .collect()
    }
}

/// Mean over rows of `−Σ_c w_c · t_c · ln max(q_c, 1e-12)`.
pub fn weighted_ce(pred: &Tensor, target: &Tensor, weights: &[f64]) -> Result<f64> {
    if pred.shape() != target.shape() || pred.dims2().is_none() {
        return Err(invalid(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (n, c) = pred.dims2().expect("checked");
    if weights.len() != c {
        return Err(invalid(format!(
            "{} weights for {c} classes",
            weights.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        for ((&q, &t), &w) in pred
            .row_slice(i)
            .iter()
            .zip(target.row_slice(i))
            .zip(weights)
        {
            if t != 0.0 {
                total -= w * t * q.max(LOG_FLOOR).ln();
            }
        }
    }
    Ok(total / n as f64)
}

/// `ℓ(Ŷ′, Ỹ″) + ℓ(Ŷ″, Ỹ′)`: each view is scored against the other's targets.
pub fn swapped_loss(
    pred_a: &Tensor,
    pred_b: &Tensor,
    target_a: &Tensor,
    target_b: &Tensor,
    weights: &[f64],
) -> Result<f64> {
    if pred_a.shape() != pred_b.shape() {
        return Err(invalid("views differ in size"));
    }
    Ok(weighted_ce(pred_a, target_b, weights)? + weighted_ce(pred_b, target_a, weights)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn uniform_prediction_costs_ln_classes() {
        let q = rows(&[&[0.25; 4]]);
        let t = rows(&[&[0.0, 1.0, 0.0, 0.0]]);
        assert!((weighted_ce(&q, &t, &[1.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_nearly_free() {
        let t = rows(&[&[0.0, 1.0, 0.0]]);
        assert!(weighted_ce(&t, &t, &[1.0; 3]).unwrap() <= 1e-11);
    }

    #[test]
    fn soft_weighted_case() {
        let q = rows(&[&[0.5, 0.5]]);
        let t = rows(&[&[0.6, 0.4]]);
        let want = -(2.0 * 0.6 * 0.5f64.ln() + 0.4 * 0.5f64.ln());
        let got = weighted_ce(&q, &t, &[2.0, 1.0]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 1.6 * 2f64.ln()).abs() < 1e-12);
        assert!(weighted_ce(&q, &rows(&[&[1.0, 0.0, 0.0]]), &[1.0; 3]).is_err());
    }

    #[test]
    fn swapped_loss_cases() {
        let q = rows(&[&[0.7, 0.3], &[0.2, 0.8]]);
        let t = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = [1.0, 1.0];
        let single = weighted_ce(&q, &t, &w).unwrap();
        assert!((swapped_loss(&q, &q, &t, &t, &w).unwrap() - 2.0 * single).abs() < 1e-15);

        // Two points, two classes, crossed targets expanded by hand.
        let qa = rows(&[&[0.9, 0.1], &[0.4, 0.6]]);
        let qb = rows(&[&[0.6, 0.4], &[0.3, 0.7]]);
        let ta = rows(&[&[1.0, 0.0], &[0.25, 0.75]]);
        let tb = rows(&[&[1.0, 0.0], &[0.5, 0.5]]);
        let w = [3.0, 0.5];
        let ab = (-(3.0 * 0.9f64.ln()) - (3.0 * 0.5 * 0.4f64.ln() + 0.5 * 0.5 * 0.6f64.ln())) / 2.0;
        let ba =
            (-(3.0 * 0.6f64.ln()) - (3.0 * 0.25 * 0.3f64.ln() + 0.5 * 0.75 * 0.7f64.ln())) / 2.0;
        assert!((swapped_loss(&qa, &qb, &ta, &tb, &w).unwrap() - (ab + ba)).abs() < 1e-12);
        assert!(swapped_loss(&qa, &rows(&[&[0.5, 0.5]]), &ta, &tb, &w).is_err());
    }

    #[test]
    fn base_weights_have_unit_mean_and_inverse_order() {
        let w = LossWeights::from_base_counts(&[700, 200, 100]);
        assert!((w.base.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!(w.base[0] < w.base[1] && w.base[1] < w.base[2]);
        assert!((w.base[2] / w.base[0] - 7.0).abs() < 1e-12);
        assert_eq!(w.expand(2)[3..], [1.0, 1.0]);
    }
}
