//! Entropic transport of points onto prototypes with equal class mass.

use crate::autodiff::Tensor;
use crate::error::{invalid, Result};

/// Linear per-epoch decay of the entropic regularizer.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub eps_start: f64,
    pub eps_end: f64,
    pub total_epochs: usize,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            eps_start: 0.3,
            eps_end: 0.05,
            total_epochs: 10,
        }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_end > 0.0 && self.eps_start >= self.eps_end && self.eps_start.is_finite()) {
            return Err(invalid(format!(
                "need eps_start >= eps_end > 0, got {} and {}",
                self.eps_start, self.eps_end
            )));
        }
        Ok(())
    }
}

/// `eps_start` at epoch 0, `eps_end` at epoch `total_epochs − 1`.
pub fn epsilon_at(s: &EpsilonSchedule, epoch: usize) -> f64 {
    if s.total_epochs <= 1 {
        return s.eps_start;
    }
    let last = (s.total_epochs - 1) as f64;
    let t = (epoch as f64 / last).min(1.0);
    (s.eps_start - t * (s.eps_start - s.eps_end)).clamp(s.eps_end, s.eps_start)
}

/// Soft assignment `Q` (`ρ × m`) of `m` columns to `ρ` prototypes.
///
/// Starts from `exp(scores / eps)` with each column's maximum subtracted,
/// scaled to unit total mass. One iteration rescales columns to `1/m`, then
/// rows to `1/ρ`, so row marginals are exact after every iteration.
// Negated comparisons reject NaN as well.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn sinkhorn_assign(scores: &Tensor, eps: f64, n_iters: usize) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(invalid(format!("eps must be positive, got {eps}")));
    }
    let (rho, m) = scores
        .dims2()
        .ok_or_else(|| invalid("scores must be a ρ × m matrix"))?;
    if !scores.is_finite() {
        return Err(invalid("scores contain non-finite values"));
    }
    let mut q = scores.data().to_vec();
    for j in 0..m {
        let max = (0..rho)
            .map(|i| q[i * m + j])
            .fold(f64::NEG_INFINITY, f64::max);
        (0..rho).for_each(|i| q[i * m + j] = ((q[i * m + j] - max) / eps).exp());
    }
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);

    let (col_mass, row_mass) = (1.0 / m as f64, 1.0 / rho as f64);
    let mut col_sums = vec![0.0; m];
    for _ in 0..n_iters {
        col_sums.iter_mut().for_each(|s| *s = 0.0);
        for row in q.chunks(m) {
            col_sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        for row in q.chunks_mut(m) {
            row.iter_mut()
                .zip(&col_sums)
                .for_each(|(v, s)| *v *= col_mass / s.max(f64::MIN_POSITIVE));
        }
        for row in q.chunks_mut(m) {
            let s: f64 = row.iter().sum();
            row.iter_mut()
                .for_each(|v| *v *= row_mass / s.max(f64::MIN_POSITIVE));
        }
    }
    Tensor::matrix(rho, m, q)
}

/// Per-point distributions (`m_batch × ρ`) from the first `m_batch` columns
/// of `Q`; trailing queue columns are dropped.
pub fn pseudo_labels_from(q: &Tensor, m_batch: usize) -> Result<Tensor> {
    let (rho, m) = q.dims2().ok_or_else(|| invalid("Q must be a matrix"))?;
    if m_batch == 0 || m_batch > m {
        return Err(invalid(format!("m_batch {m_batch} outside 1..={m}")));
    }
    let mut out = vec![0.0; m_batch * rho];
    for j in 0..m_batch {
        let s: f64 = (0..rho).map(|i| q.get(i, j)).sum();
        for i in 0..rho {
            out[j * rho + i] = q.get(i, j) / s.max(f64::MIN_POSITIVE);
        }
    }
    Tensor::matrix(m_batch, rho, out)
}
