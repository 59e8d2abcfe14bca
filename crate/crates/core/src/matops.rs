//! Dense real linear algebra: Lyapunov solves, matrix exponentials and
//! spectral queries.
//!
//! `Matrix` is nalgebra's heap-allocated `DMatrix<f64>`; finiteness is
//! checked at the public entry points ([`checked`], [`from_rows`]) rather
//! than carried in a wrapper type.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{GleError, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type Complex64 = Complex<f64>;

/// Default margin for positive-stability checks.
pub const DEFAULT_MARGIN: f64 = 1e-8;

/// Dimension at or below which Lyapunov equations use the Kronecker solve.
pub const KRONECKER_MAX_DIM: usize = 8;

const SCHUR_EPS: f64 = 1e-14;
const SCHUR_MAX_ITER: usize = 10_000;

/// Eigenvalues of a square matrix together with `min(-Re λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex64>,
    pub stability_margin: f64,
}

impl Spectrum {
    /// Smallest real part, i.e. the positive-stability margin.
    pub fn min_real(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.re).fold(f64::INFINITY, f64::min)
    }
}

/// Rejects matrices with NaN or infinite entries.
pub fn checked(m: Matrix) -> Result<Matrix> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(m)
    } else {
        Err(GleError::NonFinite("matrix entry".into()))
    }
}

/// Builds a matrix from row slices; all rows must have equal length.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(GleError::DimensionMismatch("ragged rows".into()));
    }
    checked(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn scalar(v: f64) -> Matrix {
    Matrix::from_element(1, 1, v)
}

pub fn diag(values: &[f64]) -> Matrix {
    Matrix::from_diagonal(&Vector::from_column_slice(values))
}

/// (M + M*)/2
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Kronecker product a ⊗ b.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Block-diagonal assembly; zero-sized blocks are skipped.
pub fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), (b.nrows(), b.ncols())).copy_from(*b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

/// Eigenvalues via the real Schur form.
pub fn spectrum(a: &Matrix) -> Result<Spectrum> {
    if !a.is_square() {
        return Err(GleError::DimensionMismatch(format!(
            "spectrum of {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Ok(Spectrum { eigenvalues: vec![], stability_margin: f64::INFINITY });
    }
    let schur = a.clone().try_schur(SCHUR_EPS, SCHUR_MAX_ITER).ok_or(GleError::EigenFailure)?;
    let eigenvalues: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    if eigenvalues.iter().any(|l| !l.re.is_finite() || !l.im.is_finite()) {
        return Err(GleError::EigenFailure);
    }
    let stability_margin = eigenvalues.iter().map(|l| -l.re).fold(f64::INFINITY, f64::min);
    Ok(Spectrum { eigenvalues, stability_margin })
}

/// True iff every eigenvalue has real part strictly above `margin`, so a
/// purely imaginary spectrum is never stable.
pub fn is_positive_stable(a: &Matrix, margin: f64) -> Result<(bool, Spectrum)> {
    let s = spectrum(a)?;
    Ok((s.min_real() > margin, s))
}

/// e^{At} by scaling and squaring with Padé approximation.
pub fn matrix_exp(a: &Matrix, t: f64) -> Result<Matrix> {
    if !a.is_square() {
        return Err(GleError::DimensionMismatch("matrix_exp of non-square matrix".into()));
    }
    if !t.is_finite() {
        return Err(GleError::NonFinite("time".into()));
    }
    if a.nrows() == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let e = (a * t).exp();
    if e.iter().all(|v| v.is_finite()) {
        Ok(e)
    } else {
        Err(GleError::Overflow)
    }
}

/// Solves A J + J A* = −Q for a Hurwitz-stable `a` and symmetric `q`.
///
/// Uses the vectorized Kronecker-sum system up to [`KRONECKER_MAX_DIM`] and
/// Bartels–Stewart on the real Schur form above that. The result is
/// symmetrized.
pub fn lyapunov_solve(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if !a.is_square() || q.nrows() != n || q.ncols() != n {
        return Err(GleError::DimensionMismatch(format!(
            "lyapunov: A {}x{}, Q {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    if (q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) {
        return Err(GleError::NotSymmetric("Lyapunov right-hand side".into()));
    }
    let spec = spectrum(a)?;
    if spec.stability_margin <= 1e-10 {
        return Err(GleError::NotStable { margin: spec.stability_margin });
    }
    let j = if n <= KRONECKER_MAX_DIM { lyapunov_kronecker(a, q)? } else { lyapunov_schur(a, q)? };
    checked(symmetrize(&j))
}

/// Vectorized solve (I⊗A + A⊗I) vec J = −vec Q (column-major vec).
pub fn lyapunov_kronecker(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let id = Matrix::identity(n, n);
    let big = kron(&id, a) + kron(a, &id);
    let rhs = -Vector::from_column_slice(q.as_slice());
    let lu = big.lu();
    let x = lu.solve(&rhs).ok_or_else(|| GleError::SingularSolve("Kronecker system".into()))?;
    Ok(Matrix::from_column_slice(n, n, x.as_slice()))
}

/// Bartels–Stewart: A = U T U*, solve T Y + Y T* = −U* Q U block by block.
pub fn lyapunov_schur(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let (u, t) = a.clone().try_schur(SCHUR_EPS, SCHUR_MAX_ITER).ok_or(GleError::EigenFailure)?.unpack();
    let c = -(u.transpose() * q * &u);

    // diagonal blocks of the quasi-triangular factor
    let mut starts = Vec::new();
    let mut i = 0;
    while i < n {
        starts.push(i);
        i += if i + 1 < n && t[(i + 1, i)] != 0.0 { 2 } else { 1 };
    }
    let blocks: Vec<(usize, usize)> =
        starts.iter().enumerate().map(|(k, &s)| (s, starts.get(k + 1).copied().unwrap_or(n) - s)).collect();
    for &(s, len) in &blocks {
        if len == 2 && s + 2 < n && t[(s + 2, s + 1)] != 0.0 {
            // not a standardized quasi-triangular form; fall back
            return lyapunov_kronecker(a, q);
        }
    }

    let mut y = Matrix::zeros(n, n);
    for bi in (0..blocks.len()).rev() {
        let (ri, li) = blocks[bi];
        for bj in (0..blocks.len()).rev() {
            let (rj, lj) = blocks[bj];
            let mut rhs = c.view((ri, rj), (li, lj)).clone_owned();
            if ri + li < n {
                let tail = n - ri - li;
                rhs -= t.view((ri, ri + li), (li, tail)) * y.view((ri + li, rj), (tail, lj));
            }
            if rj + lj < n {
                let tail = n - rj - lj;
                rhs -= y.view((ri, rj + lj), (li, tail)) * t.view((rj, rj + lj), (lj, tail)).transpose();
            }
            // T_ii Y + Y T_jj* = rhs, at most 4x4 after vectorization
            let tii = t.view((ri, ri), (li, li)).clone_owned();
            let tjj = t.view((rj, rj), (lj, lj)).clone_owned();
            let sys = kron(&Matrix::identity(lj, lj), &tii) + kron(&tjj, &Matrix::identity(li, li));
            let v = Vector::from_column_slice(rhs.as_slice());
            let sol = sys.lu().solve(&v).ok_or_else(|| GleError::SingularSolve("Schur block".into()))?;
            y.view_mut((ri, rj), (li, lj)).copy_from(&Matrix::from_column_slice(li, lj, sol.as_slice()));
        }
    }
    Ok(&u * y * u.transpose())
}

/// Residual ‖A J + J A* + Q‖_F.
pub fn lyapunov_residual(a: &Matrix, j: &Matrix, q: &Matrix) -> f64 {
    (a * j + j * a.transpose() + q).norm()
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_sym_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Factor L with L L* = m for symmetric PSD m (eigenvalues clipped at 0).
pub fn psd_sqrt(m: &Matrix) -> Matrix {
    let n = m.nrows();
    if n == 0 {
        return Matrix::zeros(0, 0);
    }
    if let Some(ch) = symmetrize(m).cholesky() {
        return ch.l();
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for (k, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(k).scale_mut(s);
    }
    l
}

/// Inverse with a singularity check.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(GleError::DimensionMismatch("inverse of non-square matrix".into()));
    }
    if m.nrows() == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let inv = m.clone().try_inverse().ok_or_else(|| GleError::SingularSolve("matrix inverse".into()))?;
    checked(inv)
}

/// Singular values in decreasing order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return vec![];
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}
