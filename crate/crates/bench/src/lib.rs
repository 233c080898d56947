//! Seeded inputs shared by the kernel benchmarks.

use nops_core::autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows x cols` scores drawn from U[-1, 1].
pub fn scores(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..rows * cols)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// `n` points uniform in the unit cube.
pub fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| [r.random(), r.random(), r.random()])
        .collect()
}

/// Square cost matrix with entries in [0, 1).
pub fn cost(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| (0..n).map(|_| r.random()).collect())
        .collect()
}

/// `n` points of dimension `d` around `k` separated centres.
pub fn blobs(n: usize, d: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            (0..d)
                .map(|j| if j == i % k { 4.0 } else { 0.0 } + r.random_range(-1.0..1.0))
                .collect()
        })
        .collect()
}

/// One-hot rows over `classes` columns, for feeding supervised targets.
pub fn one_hot(rows: usize, classes: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mut data = vec![0.0; rows * classes];
    for row in data.chunks_mut(classes) {
        row[r.random_range(0..classes)] = 1.0;
    }
    Tensor::matrix(rows, classes, data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_seeded_and_shaped() {
        assert_eq!(scores(4, 3, 1).shape(), &[4, 3]);
        assert_eq!(cloud(5, 2), cloud(5, 2));
        assert_eq!(cost(3, 0).len(), 3);
        assert!(one_hot(6, 4, 0)
            .data()
            .chunks(4)
            .all(|r| r.iter().sum::<f64>() == 1.0));
        assert_eq!(blobs(9, 3, 3, 0)[2].len(), 3);
    }
}
