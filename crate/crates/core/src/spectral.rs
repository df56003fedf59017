//! Largest singular value by power iteration.

use nalgebra::DVector;

use crate::Matrix;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `‖M‖₂` with the default tolerance (relative 1e-12, cap 10⁴ iterations).
pub fn spectral_norm(m: &Matrix) -> SpectralNorm {
    spectral_norm_with(m, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

/// Convenience wrapper returning only the value.
pub fn norm2(m: &Matrix) -> f64 {
    spectral_norm(m).value
}

/// Power iteration on the smaller Gram matrix of `M / max|M|`. The
/// rescaling keeps the Gram entries representable when `M` is near the
/// underflow range, which is exactly where collapsing encoder gains live.
pub fn spectral_norm_with(m: &Matrix, tol: f64, max_iter: usize) -> SpectralNorm {
    let scale = m.amax();
    if scale == 0.0 || m.is_empty() {
        return SpectralNorm {
            value: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let scaled = m / scale;
    let gram = if scaled.nrows() < scaled.ncols() {
        &scaled * scaled.transpose()
    } else {
        scaled.transpose() * &scaled
    };
    let k = gram.nrows();

    // Deterministic, generically non-orthogonal start vector.
    let mut v = DVector::from_fn(k, |i, _| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.754_877_666).fract());
    v /= v.norm();

    let mut estimate = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter.max(1) {
        iterations = it;
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            // Start vector in the null space: restart from the heaviest column.
            let (j, _) = gram
                .column_iter()
                .enumerate()
                .map(|(j, c)| (j, c.norm()))
                .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            v = gram.column(j).into_owned();
            let nv = v.norm();
            if nv == 0.0 {
                return SpectralNorm {
                    value: 0.0,
                    iterations,
                    converged: true,
                };
            }
            v /= nv;
            continue;
        }
        let next = v.dot(&w);
        v = w / norm;
        if it > 1 && (next - estimate).abs() <= tol * next.abs() {
            estimate = next;
            converged = true;
            break;
        }
        estimate = next;
    }
    SpectralNorm {
        value: estimate.max(0.0).sqrt() * scale,
        iterations,
        converged,
    }
}
