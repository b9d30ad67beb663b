//! Dense linear-algebra helpers shared by the Gaussian core and the tape.
//!
//! Every quadratic form goes through a Cholesky factor and triangular
//! solves; nothing in the crate forms an explicit inverse.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{BnnpError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Smallest relative jitter tried after a failed factorisation.
pub const JITTER_START: f64 = 1e-10;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Lower Cholesky factor of `a`, retrying with diagonal jitter
/// `1e-10 * mean(diag)`, escalating by 10x up to `1e-4 * mean(diag)`.
///
/// Returns the factor and the absolute jitter that was added (0 when none).
pub fn cholesky_jittered(a: &Mat, context: &str) -> Result<(Mat, f64)> {
    if a.nrows() != a.ncols() {
        return Err(BnnpError::DimensionMismatch(format!(
            "{context}: cholesky of {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(BnnpError::InvalidInput(format!(
            "{context}: non-finite entry in matrix to factorise"
        )));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok((Mat::zeros(0, 0), 0.0));
    }
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c.unpack(), 0.0));
    }
    let mean_diag = a.diagonal().mean();
    if !(mean_diag > 0.0) {
        return Err(BnnpError::NotPositiveDefinite {
            context: context.to_string(),
            jitter: 0.0,
        });
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * mean_diag;
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(b) {
            log::debug!("{context}: cholesky succeeded with jitter {jitter:.3e}");
            return Ok((c.unpack(), jitter));
        }
        rel *= 10.0;
    }
    Err(BnnpError::NotPositiveDefinite {
        context: context.to_string(),
        jitter: JITTER_MAX * mean_diag,
    })
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Mat, b: &Mat) -> Mat {
    let mut x = b.clone();
    l.solve_lower_triangular_unchecked_mut(&mut x);
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Mat, b: &Mat) -> Mat {
    let mut x = b.clone();
    l.tr_solve_lower_triangular_unchecked_mut(&mut x);
    x
}

/// `log det(L Lᵀ)` from a lower factor.
pub fn log_det_from_factor(l: &Mat) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>()
}

/// Lower triangle (diagonal included) of `a`.
pub fn tril(a: &Mat) -> Mat {
    let mut out = a.clone();
    for j in 0..a.ncols() {
        for i in 0..j.min(a.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

/// Block-diagonal matrix from square or rectangular blocks.
pub fn block_diag(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Symmetrises `a` in place as `(a + aᵀ) / 2`.
pub fn symmetrize(a: &mut Mat) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Numerically stable `log Σ exp(v)`; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Largest absolute entrywise difference divided by the largest magnitude in `reference`.
pub fn max_relative_diff(a: &Mat, reference: &Mat) -> f64 {
    assert_eq!(a.shape(), reference.shape(), "shape mismatch");
    let scale = reference.amax().max(f64::MIN_POSITIVE);
    (a - reference).amax() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_semidefinite() {
        // rank one: fails plain factorisation, passes with jitter
        let v = Mat::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let (l, jitter) = cholesky_jittered(&a, "rank one").unwrap();
        assert!(jitter > 0.0);
        let mut shifted = a.clone();
        for i in 0..3 {
            shifted[(i, i)] += jitter;
        }
        assert!(max_relative_diff(&(&l * l.transpose()), &shifted) < 1e-10);
    }

    #[test]
    fn indefinite_fails_with_context() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -5.0]);
        match cholesky_jittered(&a, "layer 2 unit 0") {
            Err(BnnpError::NotPositiveDefinite { context, .. }) => {
                assert!(context.contains("layer 2 unit 0"))
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn triangular_solves_match_reference_inverse() {
        let l = Mat::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.5, 1.5, 0.0, -0.3, 0.2, 0.7]);
        let b = Mat::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.0]);
        let inv = l.clone().try_inverse().unwrap();
        assert!(max_relative_diff(&solve_lower(&l, &b), &(&inv * &b)) < 1e-12);
        assert!(max_relative_diff(&solve_lower_transpose(&l, &b), &(inv.transpose() * &b)) < 1e-12);
    }

    #[test]
    fn log_sum_exp_is_shift_invariant() {
        let v = [-1000.0, -1001.0, -999.5];
        let shifted: Vec<f64> = v.iter().map(|x| x + 1000.0).collect();
        assert!((log_sum_exp(&v) + 1000.0 - log_sum_exp(&shifted)).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
