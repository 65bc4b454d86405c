//! Dense symmetric eigenvalues and Gershgorin discs.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};

/// Eigenvalues of a symmetric matrix, descending.
///
/// Householder tridiagonalisation followed by implicit symmetric QR.
pub fn symmetric_eigenvalues(h: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !h.is_square() {
        return invalid("eigenvalues need a square matrix");
    }
    if h.iter().any(|v| !v.is_finite()) {
        return invalid("matrix has non-finite entries");
    }
    let sym = (h + h.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev)
}

/// `(center, radius)` of each row's Gershgorin disc.
pub fn gershgorin_discs(h: &DMatrix<f64>) -> Vec<(f64, f64)> {
    (0..h.nrows())
        .map(|i| {
            let r: f64 = (0..h.ncols()).filter(|&j| j != i).map(|j| h[(i, j)].abs()).sum();
            (h[(i, i)], r)
        })
        .collect()
}

/// True when every eigenvalue lies in the union of the discs (with slack `tol`).
pub fn within_gershgorin(eigs: &[f64], discs: &[(f64, f64)], tol: f64) -> bool {
    eigs.iter().all(|&l| discs.iter().any(|&(c, r)| (l - c).abs() <= r + tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = symmetric_eigenvalues(&h).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
        assert!(within_gershgorin(&e, &gershgorin_discs(&h), 0.0));
    }
}
