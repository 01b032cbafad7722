//! Dense small-matrix kernels shared by the LQR and duality code.
//!
//! Matrices are `nalgebra` dynamic matrices. Every public routine rejects
//! non-finite input and re-checks its output, so a divergent iteration fails
//! at the first kernel it touches instead of propagating NaN.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative symmetry tolerance used when callers do not supply one.
pub const SYMMETRY_TOL: f64 = 1e-9;

const SCHUR_EPS: f64 = 1e-15;
const SCHUR_MAX_ITER: usize = 10_000;

pub fn ensure_finite(m: &Mat, op: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

pub fn ensure_square(m: &Mat, op: &'static str) -> Result<()> {
    if m.is_square() && m.nrows() > 0 {
        Ok(())
    } else {
        Err(Error::Dimension {
            op,
            expected: "non-empty square matrix".into(),
            got: format!("{}x{}", m.nrows(), m.ncols()),
        })
    }
}

pub fn ensure_shape(m: &Mat, rows: usize, cols: usize, op: &'static str) -> Result<()> {
    if m.shape() == (rows, cols) {
        Ok(())
    } else {
        Err(Error::Dimension {
            op,
            expected: format!("{rows}x{cols}"),
            got: format!("{}x{}", m.nrows(), m.ncols()),
        })
    }
}

/// Largest eigenvalue modulus, from a real Schur decomposition.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    ensure_square(m, "spectral_radius")?;
    ensure_finite(m, "spectral_radius")?;
    let schur = Schur::try_new(m.clone(), SCHUR_EPS, SCHUR_MAX_ITER).ok_or(
        Error::Convergence {
            what: "Schur decomposition",
            iters: SCHUR_MAX_ITER,
            residual: f64::NAN,
        },
    )?;
    let rho = schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0_f64, f64::max);
    if rho.is_finite() {
        Ok(rho)
    } else {
        Err(Error::NonFinite("spectral_radius"))
    }
}

/// `(m + mᵀ) / 2`.
pub fn sym_part(m: &Mat) -> Result<Mat> {
    ensure_square(m, "sym_part")?;
    ensure_finite(m, "sym_part")?;
    Ok(symmetrize(m))
}

// Unchecked variant for inner loops that already validated their operands.
pub(crate) fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Max absolute asymmetry of `m` relative to `1 + ‖m‖_F`.
pub fn asymmetry(m: &Mat) -> f64 {
    let diff = (m - m.transpose()).abs().max();
    diff / (1.0 + m.norm())
}

fn min_eigenvalue(m: &Mat, tol: f64) -> Result<f64> {
    ensure_square(m, "is_psd")?;
    ensure_finite(m, "is_psd")?;
    let asym = asymmetry(m);
    if asym > tol.max(SYMMETRY_TOL) {
        return Err(Error::Asymmetric { asymmetry: asym });
    }
    let eig = SymmetricEigen::try_new(symmetrize(m), 1e-15, 10_000).ok_or(
        Error::Convergence {
            what: "symmetric eigendecomposition",
            iters: 10_000,
            residual: f64::NAN,
        },
    )?;
    Ok(eig.eigenvalues.min())
}

/// True iff the smallest eigenvalue of the symmetric matrix `m` is `>= -tol`.
pub fn is_psd(m: &Mat, tol: f64) -> Result<bool> {
    Ok(min_eigenvalue(m, tol)? >= -tol)
}

/// True iff the smallest eigenvalue of the symmetric matrix `m` is `> tol`.
pub fn is_pd(m: &Mat, tol: f64) -> Result<bool> {
    Ok(min_eigenvalue(m, tol)? > tol)
}

/// Numerical rank of `m` with singular-value cutoff `rel_tol · σ_max`.
pub fn rank(m: &Mat, rel_tol: f64) -> usize {
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// `[B, AB, …, Aⁿ⁻¹B]`.
pub fn controllability_matrix(a: &Mat, b: &Mat) -> Mat {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = Mat::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    out
}

pub fn is_controllable(a: &Mat, b: &Mat) -> bool {
    rank(&controllability_matrix(a, b), 1e-10) == a.nrows()
}

/// `Tr(a · b)` without forming the product.
pub fn trace_product(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b.transpose().iter())
        .map(|(x, y)| x * y)
        .sum()
}

/// Builds a matrix from row-major nested rows; rejects ragged input.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::Dimension {
            op: "from_rows",
            expected: "non-empty matrix".into(),
            got: format!("{nrows}x{ncols}"),
        });
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::Dimension {
            op: "from_rows",
            expected: format!("{ncols} columns in every row"),
            got: format!("a row with {} columns", bad.len()),
        });
    }
    let m = Mat::from_fn(nrows, ncols, |i, j| rows[i][j]);
    ensure_finite(&m, "from_rows")?;
    Ok(m)
}

/// Row-major nested rows of `m`.
pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
