//! Symmetric positive-definite matrices with a validated Cholesky factor.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::Matrix;

/// Relative symmetry tolerance: `max|M - Mᵀ| <= SYMMETRY_TOL * max|M|`.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Relative Cholesky pivot threshold, scaled by `trace / dim`.
pub const PIVOT_TOL: f64 = 1e-12;

/// A symmetric positive-definite matrix together with its lower Cholesky
/// factor. Construction fails rather than regularizing, so a value of this
/// type is always strictly positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dense: Matrix,
    chol: Matrix,
}

impl SpdMatrix {
    pub fn new(dense: Matrix) -> Result<Self> {
        check_shape(&dense)?;
        let scale = dense.amax();
        let asym = max_asymmetry(&dense);
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotPositiveDefinite(format!(
                "asymmetry {asym:.3e} exceeds {SYMMETRY_TOL:.0e} x max entry {scale:.3e}"
            )));
        }
        Self::factor(dense)
    }

    /// Replaces `m` by `(m + mᵀ)/2` before validation. Used for matrices
    /// assembled from products that are symmetric only up to rounding.
    pub fn symmetrized(mut m: Matrix) -> Result<Self> {
        check_shape(&m)?;
        symmetrize_in_place(&mut m);
        Self::factor(m)
    }

    fn factor(dense: Matrix) -> Result<Self> {
        if dense.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite("non-finite entry".into()));
        }
        let floor = PIVOT_TOL * dense.trace() / dense.nrows() as f64;
        let chol = cholesky_lower(&dense, floor).map_err(|(idx, pivot)| {
            Error::NotPositiveDefinite(format!(
                "Cholesky pivot {pivot:.3e} at index {idx} is below threshold {floor:.3e}"
            ))
        })?;
        Ok(Self { dense, chol })
    }

    /// From a lower-triangular factor with a strictly positive, finite
    /// diagonal; the dense matrix is `LLᵀ` and `L` is kept as the factor.
    pub fn from_cholesky(l: Matrix) -> Result<Self> {
        if !l.is_square() || l.nrows() == 0 {
            return Err(Error::Dimension(format!("bad factor shape {}x{}", l.nrows(), l.ncols())));
        }
        let l = l.lower_triangle();
        if l.iter().any(|v| !v.is_finite()) || l.diagonal().iter().any(|&d| !(d > 0.0)) {
            return Err(Error::NotPositiveDefinite(
                "factor must be finite with a positive diagonal".into(),
            ));
        }
        let mut dense = &l * l.transpose();
        symmetrize_in_place(&mut dense);
        Ok(Self { dense, chol: l })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dense: DMatrix::identity(dim, dim),
            chol: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dense.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.dense
    }

    pub fn into_matrix(self) -> Matrix {
        self.dense
    }

    /// Lower-triangular `L` with `L Lᵀ = self`.
    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `self * X = rhs` with two triangular solves.
    pub fn solve(&self, rhs: &Matrix) -> Matrix {
        let y = self
            .chol
            .solve_lower_triangular(rhs)
            .expect("Cholesky factor has a strictly positive diagonal");
        self.chol
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a strictly positive diagonal")
    }

    /// `L⁻¹ rhs`, the whitening half of a solve.
    pub fn whiten(&self, rhs: &Matrix) -> Matrix {
        self.chol
            .solve_lower_triangular(rhs)
            .expect("Cholesky factor has a strictly positive diagonal")
    }

    pub fn inverse(&self) -> Result<Self> {
        let n = self.dim();
        Self::symmetrized(self.solve(&DMatrix::identity(n, n)))
    }
}

fn check_shape(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }
    Ok(())
}

pub(crate) fn max_asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let a = m.as_slice();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[j * n + i] - a[i * n + j]).abs());
        }
    }
    worst
}

pub(crate) fn symmetrize_in_place(m: &mut Matrix) {
    let n = m.nrows();
    let a = m.as_mut_slice();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[j * n + i] + a[i * n + j]);
            a[j * n + i] = v;
            a[i * n + j] = v;
        }
    }
}

/// Lower Cholesky factor. Fails with `(index, pivot)` at the first pivot
/// that does not exceed `floor`.
pub(crate) fn cholesky_lower(
    a: &Matrix,
    floor: f64,
) -> std::result::Result<Matrix, (usize, f64)> {
    // The pivots of the factorization are the squared diagonal of L.
    if let Some(c) = nalgebra::Cholesky::new(a.clone()) {
        let l = c.unpack();
        if l.diagonal().iter().all(|&d| d * d > floor && d.is_finite()) {
            return Ok(l);
        }
    }
    cholesky_reference(a, floor)
}

/// Column-oriented factorization that reports where it breaks down.
fn cholesky_reference(a: &Matrix, floor: f64) -> std::result::Result<Matrix, (usize, f64)> {
    let n = a.nrows();
    let mut l = a.lower_triangle();
    for j in 0..n {
        // Update column j with the already-finished columns k < j.
        for k in 0..j {
            let f = l[(j, k)];
            if f == 0.0 {
                continue;
            }
            // Column-major storage: column k precedes column j.
            let (head, tail) = l.as_mut_slice().split_at_mut(j * n);
            let src = &head[k * n + j..k * n + n];
            for (d, s) in tail[j..n].iter_mut().zip(src) {
                *d -= f * s;
            }
        }
        let pivot = l[(j, j)];
        if !(pivot > floor) || !pivot.is_finite() {
            return Err((j, pivot));
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        let inv = 1.0 / d;
        for i in (j + 1)..n {
            l[(i, j)] *= inv;
        }
    }
    Ok(l)
}
