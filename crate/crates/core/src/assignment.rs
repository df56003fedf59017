//! Maximum-weight bipartite matching between latents (rows) and factors
//! (columns) via the Hungarian algorithm with potentials, O(k³) for
//! `k = max(rows, cols)`.

use crate::error::{Error, Result};
use crate::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(latent, factor)` pairs, sorted by factor.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

impl Matching {
    pub fn latent_for(&self, factor: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == factor).map(|p| p.0)
    }
}

/// Maximum-total-weight one-to-one partial matching. Pairs of zero weight
/// are left unmatched.
pub fn max_weight_matching(weights: &Matrix) -> Result<Matching> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Domain(
            "matching weights must be finite and nonnegative".into(),
        ));
    }
    let (rows, cols) = weights.shape();
    let k = rows.max(cols);
    if k == 0 {
        return Ok(Matching {
            pairs: Vec::new(),
            total: 0.0,
        });
    }
    let wmax = weights.max().max(0.0);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            wmax - weights[(i, j)]
        } else {
            wmax
        }
    };

    // 1-based potentials formulation; column 0 is the virtual root.
    let mut u = vec![0.0f64; k + 1];
    let mut v = vec![0.0f64; k + 1];
    let mut row_of_col = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=k)
        .filter_map(|j| {
            let (i, j) = (row_of_col[j] - 1, j - 1);
            (i < rows && j < cols && weights[(i, j)] > 0.0).then_some((i, j))
        })
        .collect();
    pairs.sort_by_key(|p| p.1);
    let total = pairs.iter().map(|&(i, j)| weights[(i, j)]).fold(0.0, |acc, w| acc + w);
    Ok(Matching { pairs, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, DMatrix};

    #[test]
    fn zero_matrix_gives_empty_matching() {
        let m = max_weight_matching(&DMatrix::zeros(3, 2)).unwrap();
        assert!(m.pairs.is_empty());
        assert!(m.total == 0.0 && m.total.is_sign_positive());
    }

    #[test]
    fn anti_diagonal() {
        let m = max_weight_matching(&dmatrix![1.0, 2.0; 2.0, 1.0]).unwrap();
        assert_eq!(m.pairs, vec![(1, 0), (0, 1)]);
        assert_eq!(m.total, 4.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let w = dmatrix![0.1, 0.9, 0.0; 0.8, 0.7, 0.2];
        let m = max_weight_matching(&w).unwrap();
        assert!((m.total - 1.7).abs() < 1e-15);
        let mt = max_weight_matching(&w.transpose()).unwrap();
        assert!((mt.total - 1.7).abs() < 1e-15);
    }

    #[test]
    fn rejects_negative_weights() {
        assert!(max_weight_matching(&dmatrix![-1.0]).is_err());
        assert!(max_weight_matching(&dmatrix![f64::NAN]).is_err());
    }
}
