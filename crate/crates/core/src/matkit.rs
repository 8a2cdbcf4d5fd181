//! Dense linear-algebra helpers shared by every other module.
//!
//! Conventions:
//! - `vec` stacks columns (the natural nalgebra storage order).
//! - `vecs` stacks the upper triangle of a symmetric matrix row by row,
//!   doubling off-diagonal entries; `vecv` stacks the matching monomials of a
//!   vector, so that `xᵀ S x == vecs(S) · vecv(x)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative singular-value cutoff for rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Symmetry tolerance applied before accepting a matrix as symmetric.
pub const SYM_TOL: f64 = 1e-8;

/// Length of `vecs`/`vecv` for an `a`-dimensional argument.
pub fn tri_len(a: usize) -> usize {
    a * (a + 1) / 2
}

pub fn vecs(s: &Mat) -> Result<Vector> {
    let a = s.nrows();
    if a != s.ncols() {
        return Err(Error::Dimension(format!(
            "vecs expects a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let scale = s.amax().max(1.0);
    if (s - s.transpose()).amax() > SYM_TOL * scale {
        return Err(Error::Dimension("vecs expects a symmetric matrix".into()));
    }
    Ok(vecs_unchecked(s))
}

/// `vecs` of the symmetric part of `s`, without the symmetry check.
pub fn vecs_unchecked(s: &Mat) -> Vector {
    let a = s.nrows();
    let mut out = Vector::zeros(tri_len(a));
    let mut k = 0;
    for i in 0..a {
        out[k] = s[(i, i)];
        k += 1;
        for j in (i + 1)..a {
            out[k] = s[(i, j)] + s[(j, i)];
            k += 1;
        }
    }
    out
}

/// Inverse of [`vecs`]: rebuilds the symmetric `a x a` matrix.
pub fn unvecs(v: &Vector, a: usize) -> Result<Mat> {
    if v.len() != tri_len(a) {
        return Err(Error::Dimension(format!(
            "unvecs: length {} does not match a = {a}",
            v.len()
        )));
    }
    let mut s = Mat::zeros(a, a);
    let mut k = 0;
    for i in 0..a {
        s[(i, i)] = v[k];
        k += 1;
        for j in (i + 1)..a {
            s[(i, j)] = 0.5 * v[k];
            s[(j, i)] = 0.5 * v[k];
            k += 1;
        }
    }
    Ok(s)
}

pub fn vecv(x: &Vector) -> Vector {
    let a = x.len();
    let mut out = Vector::zeros(tri_len(a));
    let mut k = 0;
    for i in 0..a {
        for j in i..a {
            out[k] = x[i] * x[j];
            k += 1;
        }
    }
    out
}

/// Column-stacking vectorization.
pub fn vec(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "unvec: length {} does not match {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Mat::from_column_slice(rows, cols, v.as_slice()))
}

/// Kronecker product of two column vectors, `a ⊗ b`.
pub fn kron_vec(a: &Vector, b: &Vector) -> Vector {
    let mut out = Vector::zeros(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[i * b.len() + j] = a[i] * b[j];
        }
    }
    out
}

pub fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn spectral_radius(m: &Mat) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "spectral radius of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite entries in eigenvalue input (max |entry| {:e})",
            m.amax()
        )));
    }
    let eig = m.complex_eigenvalues();
    let rho = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !rho.is_finite() {
        return Err(Error::Numerical(format!(
            "eigen-solver failed on matrix with norm {:e}",
            m.norm()
        )));
    }
    Ok(rho)
}

pub fn singular_values(m: &Mat) -> Vector {
    if m.is_empty() {
        return Vector::zeros(0);
    }
    m.clone().svd(false, false).singular_values
}

pub fn sigma_max(m: &Mat) -> f64 {
    singular_values(m).iter().cloned().fold(0.0, f64::max)
}

pub fn sigma_min(m: &Mat) -> f64 {
    let s = singular_values(m);
    if s.is_empty() {
        return 0.0;
    }
    s.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Spectral (induced 2-) norm.
pub fn norm2(m: &Mat) -> f64 {
    sigma_max(m)
}

/// Number of singular values above `tol * sigma_max`.
pub fn rank_with_tol(m: &Mat, tol: f64) -> usize {
    let s = singular_values(m);
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > tol * smax).count()
}

/// Orthonormal basis of `{x : M x ≈ 0}`, ordered by singular-vector index.
pub fn null_space_basis(m: &Mat, tol: f64) -> Vec<Vector> {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return Vec::new();
    }
    // Pad wide matrices so the SVD returns a full right basis.
    let padded = if rows < cols {
        let mut p = Mat::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = tol * smax;
    let mut idx: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax == 0.0 || svd.singular_values[i] <= cutoff)
        .collect();
    idx.sort_unstable();
    idx.into_iter().map(|i| v_t.row(i).transpose().into_owned()).collect()
}

pub fn min_eigenvalue(s: &Mat) -> f64 {
    if s.nrows() == 0 {
        return 0.0;
    }
    sym(s)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_positive_definite(s: &Mat, tol: f64) -> bool {
    s.is_square() && min_eigenvalue(s) > tol
}

/// Solution of a batch least-squares problem together with the rank used.
#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub x: Vector,
    pub rank: usize,
}

/// Minimum-norm minimizer of `‖Φx − y‖` via the singular value decomposition.
///
/// Singular values below `tol * σ_max` are treated as zero.
pub fn min_norm_least_squares(phi: &Mat, y: &Vector, tol: f64) -> Result<LstsqSolution> {
    if phi.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "least squares: {} rows vs rhs length {}",
            phi.nrows(),
            y.len()
        )));
    }
    if phi.ncols() == 0 {
        return Ok(LstsqSolution {
            x: Vector::zeros(0),
            rank: 0,
        });
    }
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(LstsqSolution {
            x: Vector::zeros(phi.ncols()),
            rank: 0,
        });
    }
    let cutoff = tol * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut x = Vector::zeros(phi.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            let coeff = u.column(i).dot(y) / s;
            x += v_t.row(i).transpose() * coeff;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("least-squares solution is not finite".into()));
    }
    Ok(LstsqSolution { x, rank })
}

/// Least squares that insists on full column rank, reporting `condition`
/// (the excitation requirement behind the regressor) when it fails.
pub fn full_rank_least_squares(phi: &Mat, y: &Vector, tol: f64, condition: &'static str) -> Result<Vector> {
    let sol = min_norm_least_squares(phi, y, tol)?;
    if sol.rank < phi.ncols() {
        return Err(Error::RankCondition {
            condition,
            required: phi.ncols(),
            achieved: sol.rank,
        });
    }
    Ok(sol.x)
}

/// Solves the square system `M x = b`, failing on singular `M`.
pub fn solve_square(m: &Mat, b: &Mat) -> Result<Mat> {
    if !m.is_square() || m.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "solve: {}x{} against {}x{}",
            m.nrows(),
            m.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    m.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Numerical("singular linear system".into()))
}

/// Builds a matrix from row-major nested slices (used by configs and tests).
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
