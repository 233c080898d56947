//! Minimum-cost perfect assignment on a square matrix (shortest augmenting
//! paths with row/column potentials, O(n³)).

use crate::error::{invalid, Result};

/// Returns `assign` with `assign[row] = col` minimizing `Σ cost[row][col]`.
pub fn hungarian_min(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(invalid("assignment cost matrix must be square"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(invalid("assignment costs must be finite"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based internally; column 0 is the virtual start of each search.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for r in 1..=n {
        row_of[0] = r;
        let mut col = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col] = true;
            let r0 = row_of[col];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[r0 - 1][j - 1] - u[r0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = col;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    next = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            col = next;
            if row_of[col] == 0 {
                break;
            }
        }
        while col != 0 {
            let prev = way[col];
            row_of[col] = row_of[prev];
            col = prev;
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[row_of[j] - 1] = j - 1;
    }
    Ok(assign)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cost_of(cost: &[Vec<f64>], a: &[usize]) -> f64 {
        a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn small_cases() {
        assert_eq!(hungarian_min(&[]).unwrap(), Vec::<usize>::new());
        let c = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = hungarian_min(&c).unwrap();
        assert_eq!(cost_of(&c, &a), 5.0);
        assert!(hungarian_min(&[vec![1.0, 2.0]]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(n in 1usize..=5, raw in prop::collection::vec(0i32..20, 25)) {
            let cost: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| raw[r * 5 + c] as f64).collect()).collect();
            let a = hungarian_min(&cost).unwrap();
            let mut seen = a.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            let best = permutations(n).iter().map(|p| cost_of(&cost, p)).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(cost_of(&cost, &a), best);
        }
    }
}
