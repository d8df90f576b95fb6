//! Small dense helpers shared by the filter, the solver and the oracles.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::NAN)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(f64::NAN)
}

/// Spectral condition number of a symmetric positive matrix; infinite if singular.
pub fn sym_condition(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Checks square, symmetric and Cholesky-factorizable.
pub fn require_spd(m: &DMatrix<f64>, name: &'static str) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(name));
    }
    if !is_symmetric(m, 1e-12) || m.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(name));
    }
    Ok(())
}

pub fn require_finite(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn require_len(v: &DVector<f64>, expected: usize, what: &'static str) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got: v.len(),
        })
    }
}

/// Block-diagonal matrix from `(scale, size)` identity blocks.
pub fn block_diag_scaled(blocks: &[(f64, usize)]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(diag_from_blocks(blocks)))
}

pub fn diag_from_blocks(blocks: &[(f64, usize)]) -> Vec<f64> {
    blocks
        .iter()
        .flat_map(|&(s, n)| std::iter::repeat_n(s, n))
        .collect()
}

/// Skew-symmetric cross-product matrix: `skew(a) * b == a x b`.
pub fn skew(a: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0])
}
