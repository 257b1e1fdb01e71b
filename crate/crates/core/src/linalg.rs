//! Dense helpers on row-major `&[f64]` buffers.
//!
//! Hot loops work on flat slices; anything needing a factorization goes
//! through nalgebra.

use nalgebra::DMatrix;

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Hilbert–Schmidt (Frobenius) norm of a flat matrix or tensor.
pub fn hs_norm(m: &[f64]) -> f64 {
    norm(m)
}

/// `out = m · v` for an `rows × cols` row-major matrix.
pub fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    for i in 0..rows {
        let mut acc = 0.0;
        for j in 0..cols {
            acc += m[i * cols + j] * v[j];
        }
        out[i] = acc;
    }
}

/// `out = mᵀ · v` for an `rows × cols` row-major matrix.
pub fn matvec_t(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for j in 0..cols {
        let mut acc = 0.0;
        for i in 0..rows {
            acc += m[i * cols + j] * v[i];
        }
        out[j] = acc;
    }
}

/// `out = a · b` with `a: n × m`, `b: m × p`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, m: usize, p: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..p {
            let mut acc = 0.0;
            for l in 0..m {
                acc += a[i * m + l] * b[l * p + j];
            }
            out[i * p + j] = acc;
        }
    }
}

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn to_dmatrix(m: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, m)
}

/// Inverse of a `d × d` matrix together with the max-entry residual of
/// `m · m⁻¹ − I`. `None` when the LU factorization reports singularity.
pub fn inverse_with_residual(m: &[f64], d: usize) -> Option<(Vec<f64>, f64)> {
    if d == 1 {
        if m[0] == 0.0 || !m[0].is_finite() {
            return None;
        }
        let inv = 1.0 / m[0];
        return Some((vec![inv], (m[0] * inv - 1.0).abs()));
    }
    let inv = to_dmatrix(m, d).try_inverse()?;
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = inv[(i, j)];
        }
    }
    let mut prod = vec![0.0; d * d];
    matmul(m, &out, d, d, d, &mut prod);
    let residual = max_abs_diff(&prod, &identity(d));
    Some((out, residual))
}

/// Spectral norm (largest singular value).
pub fn op_norm(m: &[f64], d: usize) -> f64 {
    if d == 1 {
        return m[0].abs();
    }
    let svd = to_dmatrix(m, d).svd(false, false);
    svd.singular_values.iter().cloned().fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn det(m: &[f64], d: usize) -> f64 {
    if d == 1 {
        return m[0];
    }
    to_dmatrix(m, d).determinant()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_rotation_scaled() {
        let m = [2.0, 1.0, -1.0, 3.0];
        let (inv, res) = inverse_with_residual(&m, 2).unwrap();
        assert!(res < 1e-14);
        let mut prod = [0.0; 4];
        matmul(&m, &inv, 2, 2, 2, &mut prod);
        assert!(max_abs_diff(&prod, &identity(2)) < 1e-14);
    }

    #[test]
    fn singular_is_none() {
        assert!(inverse_with_residual(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
        assert!(inverse_with_residual(&[0.0], 1).is_none());
    }

    #[test]
    fn op_norm_of_diag() {
        assert!((op_norm(&[3.0, 0.0, 0.0, -4.0], 2) - 4.0).abs() < 1e-12);
        assert_eq!(op_norm(&[-0.5], 1), 0.5);
    }
}
