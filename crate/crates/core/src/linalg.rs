//! Small dense linear-algebra helpers shared by the identification, tracking
//! and recognition code. Everything here works on `nalgebra` dynamic types.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value threshold below which a direction counts as zero.
pub const RANK_TOL: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Numerical rank of a set of singular values at the relative tolerance `tol`.
pub fn numerical_rank(singular_values: &[f64], tol: f64) -> usize {
    let max = singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 || !max.is_finite() {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > tol * max).count()
}

/// Thin SVD with singular values sorted in decreasing order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn sorted_svd(m: &DMatrix<f64>) -> SortedSvd {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return SortedSvd {
            u: DMatrix::zeros(rows, 0),
            singular_values: Vec::new(),
            v_t: DMatrix::zeros(0, cols),
        };
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    SortedSvd {
        u: DMatrix::from_fn(rows, k, |i, j| u[(i, order[j])]),
        singular_values: order.iter().map(|&j| svd.singular_values[j]).collect(),
        v_t: DMatrix::from_fn(k, cols, |i, j| v_t[(order[i], j)]),
    }
}

/// Moore-Penrose pseudo-inverse via SVD, treating singular values below
/// `RANK_TOL * sigma_max` as zero.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let svd = sorted_svd(m);
    let rank = numerical_rank(&svd.singular_values, RANK_TOL);
    let mut out = DMatrix::zeros(cols, rows);
    for k in 0..rank {
        let s = svd.singular_values[k];
        let u = svd.u.column(k);
        let v = svd.v_t.row(k);
        out += (v.transpose() / s) * u.transpose();
    }
    out
}

/// Symmetric square root of a PSD matrix with negative eigenvalues clamped
/// to zero. Returns `B` with `B B^T = Q` (up to the clamping).
pub fn psd_sqrt(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = symmetrize(q).symmetric_eigen();
    let d = DVector::from_iterator(n, eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Pseudo-inverse of a symmetric PSD matrix; eigenvalues at or below `floor`
/// are dropped.
pub fn psd_pinv(q: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = q.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = symmetrize(q).symmetric_eigen();
    let d = DVector::from_iterator(
        n,
        eig.eigenvalues
            .iter()
            .map(|&l| if l > floor && l > 0.0 { 1.0 / l } else { 0.0 }),
    );
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()))
}

/// Smallest eigenvalue of a symmetric matrix (`+inf` for an empty matrix).
pub fn min_eigenvalue(q: &DMatrix<f64>) -> f64 {
    if q.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(q)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Thin QR with the sign convention `diag(R) >= 0`, so that a matrix with
/// orthonormal columns maps to itself with `R = I`.
pub fn thin_qr(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return (DMatrix::zeros(rows, 0), DMatrix::zeros(0, 0));
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for k in 0..q.ncols().min(r.nrows()) {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
            r.row_mut(k).neg_mut();
        }
    }
    (q, r)
}

/// Orthonormal basis for the column span of `m` at the relative tolerance
/// `tol` (via SVD, so rank-deficient inputs yield fewer columns).
pub fn orthonormal_basis(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let svd = sorted_svd(m);
    let rank = numerical_rank(&svd.singular_values, tol);
    svd.u.columns(0, rank).into_owned()
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Solution of the discrete Lyapunov equation `S = A S A^T + Q` by summing
/// the series; `A` must be strictly stable.
pub fn stationary_covariance(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = q.clone();
    let mut term = q.clone();
    for _ in 0..100_000 {
        term = a * &term * a.transpose();
        s += &term;
        if term.norm() <= 1e-15 * s.norm().max(1e-300) {
            break;
        }
    }
    symmetrize(&s)
}

/// Largest absolute entry of `m^T m - I`.
pub fn orthonormality_defect(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let n = g.nrows();
    (&g - DMatrix::identity(n, n)).amax()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_matches_inverse_for_full_rank() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0]);
        let inv = m.clone().try_inverse().unwrap();
        assert!((pinv(&m) - inv).amax() < 1e-12);
    }

    #[test]
    fn pinv_of_rank_deficient_satisfies_penrose() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let p = pinv(&m);
        assert!((&m * &p * &m - &m).amax() < 1e-12);
        assert!((&p * &m * &p - &p).amax() < 1e-12);
    }

    #[test]
    fn psd_sqrt_clamps_negative_eigenvalues() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let b = psd_sqrt(&q);
        let rebuilt = &b * b.transpose();
        assert!((rebuilt[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(rebuilt[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn thin_qr_is_identity_on_orthonormal_input() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let (q, r) = thin_qr(&m);
        assert!((q - &m).amax() < 1e-14);
        assert!((r - DMatrix::<f64>::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn stationary_covariance_scalar() {
        let a = DMatrix::from_element(1, 1, 0.9);
        let q = DMatrix::from_element(1, 1, 1.0);
        let s = stationary_covariance(&a, &q);
        assert!((s[(0, 0)] - 1.0 / (1.0 - 0.81)).abs() < 1e-10);
    }
}
